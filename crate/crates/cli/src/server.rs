//! HTTP inference service. One model instance; forward passes are
//! serialized so identical requests always yield identical bytes.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use p2i_core::evaluation::benchmark_fps;
use p2i_core::networks::ModelBundle;
use p2i_core::synthesis::{pose_from_values, synthesize, ImageFormat, SynthesisRequest};
use p2i_core::Error;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::CliError;

pub const WARNING_HEADER: &str = "x-p2i-warning";

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    pub fps_warmup: usize,
    pub fps_timed: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        ServeOptions {
            fps_warmup: 2,
            fps_timed: 10,
        }
    }
}

pub struct AppState {
    model: Mutex<ModelBundle<f32>>,
    info: Value,
}

impl AppState {
    /// Measures throughput once so `/info` can report it.
    pub fn new(bundle: ModelBundle<f32>, checkpoint_id: String, opts: ServeOptions) -> Result<Self, Error> {
        let fps = benchmark_fps(&bundle, bundle.config.resolution, opts.fps_warmup, opts.fps_timed)?;
        let info = json!({
            "resolution": bundle.config.resolution,
            "in_channels": bundle.config.in_channels,
            "bounds": bundle.scene.bounds,
            "depth_max_m": bundle.scene.depth_max_m,
            "checkpoint_id": checkpoint_id,
            "fps_estimate": fps.fps_mean,
            "enhancer": bundle.enet.is_some(),
        });
        Ok(AppState {
            model: Mutex::new(bundle),
            info,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthesizeBody {
    pose: Vec<f64>,
    #[serde(default)]
    enhanced: bool,
    #[serde(default = "default_format")]
    format: String,
}

fn default_format() -> String {
    "png_rgb".into()
}

fn error(status: StatusCode, kind: &str, message: impl ToString) -> Response {
    (status, Json(json!({ "error": kind, "message": message.to_string() }))).into_response()
}

fn core_error(e: Error) -> Response {
    match e {
        Error::InvalidPose(_) => error(StatusCode::BAD_REQUEST, "invalid_pose", e),
        Error::Unsupported(_) => error(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported_format", e),
        other => error(StatusCode::INTERNAL_SERVER_ERROR, other.kind(), other),
    }
}

async fn health() -> &'static str {
    "ok"
}

async fn info(State(s): State<Arc<AppState>>) -> Json<Value> {
    Json(s.info.clone())
}

async fn synthesize_handler(State(s): State<Arc<AppState>>, body: Bytes) -> Response {
    let body: SynthesizeBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, "malformed_request", e),
    };
    let format = match body.format.parse::<ImageFormat>() {
        Ok(f) => f,
        Err(e) => return core_error(e),
    };
    let pose = match pose_from_values(&body.pose) {
        Ok(p) => p,
        Err(e) => return core_error(e),
    };
    let req = SynthesisRequest {
        pose,
        enhanced: body.enhanced,
        format,
    };
    let state = s.clone();
    let out = tokio::task::spawn_blocking(move || {
        let model = state.model.lock().unwrap_or_else(|p| p.into_inner());
        synthesize(&model, &req)
    })
    .await;
    match out {
        Ok(Ok(img)) => {
            let mut resp = (
                [(header::CONTENT_TYPE, HeaderValue::from_static(img.content_type))],
                img.bytes,
            )
                .into_response();
            if let Some(w) = img.warning.and_then(|w| HeaderValue::from_str(&w).ok()) {
                resp.headers_mut().insert(WARNING_HEADER, w);
            }
            resp
        }
        Ok(Err(e)) => core_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/info", get(info))
        .route("/synthesize", post(synthesize_handler))
        .with_state(state)
}

/// Runs until interrupted.
pub fn serve(bundle: ModelBundle<f32>, checkpoint_id: String, host: &str, port: u16, opts: ServeOptions) -> Result<(), CliError> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid listen address {host}:{port}")))?;
    let state = Arc::new(AppState::new(bundle, checkpoint_id, opts)?);
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start runtime: {e}")))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {addr}: {e}")))?;
        log::info!("listening on http://{}", listener.local_addr().map_or(addr, |a| a));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::Usage(format!("server error: {e}")))
    })
}
