//! Image-quality metrics, split evaluation against a mean-image baseline,
//! and the synthesis throughput benchmark.
//!
//! Metrics use 8-bit RGB rescaled to `[0, 1]`. PSNR uses peak 1 and is
//! capped at 100 dB. SSIM is single scale on luminance
//! (`0.299 R + 0.587 G + 0.114 B`) with an 11×11 Gaussian window
//! (σ = 1.5), `C1 = (0.01 L)²`, `C2 = (0.03 L)²`, `L = 1`, averaged over
//! all fully contained windows.

use std::fmt::Write as _;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::{FrameRef, Setting, SplitPlan, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::networks::{ModelBundle, NetworkConfig};
use crate::pose::Pose7;
use crate::synthesis::synthesize_frame;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// `10·log10(peak² / MSE)` over equally sized value slices.
pub fn psnr_values(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Metric(format!("PSNR needs equal non-empty inputs ({} vs {})", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(Error::Metric(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

fn unit(img: &RgbImage) -> Vec<f64> {
    img.as_raw().iter().map(|v| *v as f64 / 255.0).collect()
}

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.dimensions() != b.dimensions() {
        return Err(Error::Metric(format!(
            "image sizes differ: {:?} vs {:?}",
            a.dimensions(),
            b.dimensions()
        )));
    }
    Ok(())
}

pub fn psnr(a: &RgbImage, b: &RgbImage, peak: f64) -> Result<f64> {
    same_dims(a, b)?;
    psnr_values(&unit(a), &unit(b), peak)
}

pub fn luminance(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| (0..3).map(|c| LUMA[c] * p[c] as f64 / 255.0).sum())
        .collect()
}

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w×h` plane.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (wo, ho) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; wo * h];
    for r in 0..h {
        for c in 0..wo {
            rows[r * wo + c] = (0..n).map(|i| k[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; wo * ho];
    for r in 0..ho {
        for c in 0..wo {
            out[r * wo + c] = (0..n).map(|i| k[i] * rows[(r + i) * wo + c]).sum();
        }
    }
    out
}

/// Window-averaged SSIM and its luminance and contrast-structure factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimTerms {
    pub ssim: f64,
    pub luminance: f64,
    /// `(2σ_xy + C2) / (σ_x² + σ_y² + C2)`
    pub contrast_structure: f64,
}

/// SSIM of two `w×h` single-channel planes with values in `[0, 1]`.
pub fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize) -> Result<SsimTerms> {
    if a.len() != w * h || b.len() != w * h {
        return Err(Error::Metric("SSIM planes do not match their dimensions".into()));
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Metric(format!("SSIM needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {w}×{h}")));
    }
    let k = gaussian_kernel();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(a, w, h, &k);
    let mu_b = filter_valid(b, w, h, &k);
    let aa = filter_valid(&prod(a, a), w, h, &k);
    let bb = filter_valid(&prod(b, b), w, h, &k);
    let ab = filter_valid(&prod(a, b), w, h, &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.len() as f64;
    let (mut s, mut l, mut cs) = (0.0, 0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let li = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        let csi = (2.0 * cov + c2) / (va + vb + c2);
        l += li;
        cs += csi;
        s += li * csi;
    }
    Ok(SsimTerms {
        ssim: s / n,
        luminance: l / n,
        contrast_structure: cs / n,
    })
}

pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    let (w, h) = a.dimensions();
    Ok(ssim_plane(&luminance(a), &luminance(b), w as usize, h as usize)?.ssim)
}

/// Perceptual distance supplied from outside the library.
pub trait PerceptualScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, a: &RgbImage, b: &RgbImage) -> Result<f64>;
}

/// Delegates to `scorer`, or reports the metric as unavailable.
pub fn lpips_adapter(scorer: Option<&dyn PerceptualScorer>, a: &RgbImage, b: &RgbImage) -> Result<OptionalMetric> {
    match scorer {
        Some(s) => {
            same_dims(a, b)?;
            Ok(OptionalMetric::Value(s.score(a, b)?))
        }
        None => Ok(OptionalMetric::Unavailable),
    }
}

/// A metric that serializes as a number or as the string `"unavailable"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptionalMetric {
    Value(f64),
    Unavailable,
}

pub const UNAVAILABLE: &str = "unavailable";

impl OptionalMetric {
    pub fn value(&self) -> Option<f64> {
        match self {
            OptionalMetric::Value(v) => Some(*v),
            OptionalMetric::Unavailable => None,
        }
    }
}

impl Serialize for OptionalMetric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            OptionalMetric::Value(v) => s.serialize_f64(*v),
            OptionalMetric::Unavailable => s.serialize_str(UNAVAILABLE),
        }
    }
}

impl<'de> Deserialize<'de> for OptionalMetric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(OptionalMetric::Value(v)),
            Raw::Str(s) if s == UNAVAILABLE => Ok(OptionalMetric::Unavailable),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("unexpected metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: FrameRef,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: OptionalMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: OptionalMetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDescriptor {
    pub setting: Setting,
    #[serde(rename = "N")]
    pub n: u32,
    pub train_frames: usize,
    pub test_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: SplitDescriptor,
    pub checkpoint_id: String,
    pub enhanced: bool,
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: Aggregate,
    /// Same frames scored against the mean training image.
    pub baseline: Aggregate,
    pub fps: Option<FpsReport>,
    pub conventions: String,
}

pub const CONVENTIONS: &str = "8-bit RGB scaled to [0,1]; PSNR peak 1, capped at 100 dB; SSIM on luminance, \
                               11x11 Gaussian window sigma 1.5, K1 0.01, K2 0.03, valid windows";

fn aggregate(frames: &[FrameMetrics]) -> Aggregate {
    let n = frames.len() as f64;
    let lp: Option<Vec<f64>> = frames.iter().map(|f| f.lpips.value()).collect();
    Aggregate {
        psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        lpips: match lp {
            Some(v) if !v.is_empty() => OptionalMetric::Value(v.iter().sum::<f64>() / n),
            _ => OptionalMetric::Unavailable,
        },
    }
}

fn score_frames(
    ds: &TrajectoryDataset,
    refs: &[FrameRef],
    scorer: Option<&dyn PerceptualScorer>,
    mut predict: impl FnMut(&Pose7) -> Result<RgbImage>,
) -> Result<Vec<FrameMetrics>> {
    refs.iter()
        .map(|r| {
            let f = ds
                .frame(*r)
                .ok_or_else(|| Error::InvalidSplit(format!("test frame {r:?} not in dataset")))?;
            let pred = predict(&f.pose)?;
            Ok(FrameMetrics {
                frame: *r,
                psnr: psnr(&pred, &f.rgb, 1.0)?,
                ssim: ssim(&pred, &f.rgb)?,
                lpips: lpips_adapter(scorer, &pred, &f.rgb)?,
            })
        })
        .collect()
}

/// Per-pixel mean of the training frames' RGB, rounded to 8 bits.
pub fn mean_image(ds: &TrajectoryDataset, refs: &[FrameRef]) -> Result<RgbImage> {
    let (w, h) = ds.resolution();
    let mut acc = vec![0.0f64; (w * h * 3) as usize];
    for r in refs {
        let f = ds
            .frame(*r)
            .ok_or_else(|| Error::InvalidSplit(format!("frame {r:?} not in dataset")))?;
        for (a, v) in acc.iter_mut().zip(f.rgb.as_raw()) {
            *a += *v as f64;
        }
    }
    if refs.is_empty() {
        return Err(Error::InvalidSplit("no frames to average".into()));
    }
    let n = refs.len() as f64;
    let data = acc.iter().map(|a| (a / n).round().clamp(0.0, 255.0) as u8).collect();
    Ok(RgbImage::from_raw(w, h, data).expect("sized buffer"))
}

pub fn evaluate_baseline(
    ds: &TrajectoryDataset,
    split: &SplitPlan,
    scorer: Option<&dyn PerceptualScorer>,
) -> Result<Aggregate> {
    if split.test.is_empty() {
        return Err(Error::EmptyTest("split has no test frames".into()));
    }
    let mean = mean_image(ds, &split.train)?;
    Ok(aggregate(&score_frames(ds, &split.test, scorer, |_| Ok(mean.clone()))?))
}

/// Scores synthesized views of every test frame against ground truth.
/// Only test frames are read, apart from the training frames averaged
/// into the baseline image.
pub fn evaluate_split(
    bundle: &ModelBundle<f32>,
    checkpoint_id: &str,
    ds: &TrajectoryDataset,
    split: &SplitPlan,
    scorer: Option<&dyn PerceptualScorer>,
) -> Result<MetricsReport> {
    if split.test.is_empty() {
        return Err(Error::EmptyTest("split has no test frames".into()));
    }
    let (w, h) = ds.resolution();
    let r = bundle.config.resolution;
    if w as usize != r || h as usize != r {
        return Err(Error::Config(format!("model resolution {r} differs from dataset {w}×{h}")));
    }
    let enhanced = bundle.enet.is_some();
    let per_frame = score_frames(ds, &split.test, scorer, |p| Ok(synthesize_frame(bundle, p, enhanced)?.rgb))?;
    Ok(MetricsReport {
        split: SplitDescriptor {
            setting: split.setting,
            n: split.n,
            train_frames: split.train.len(),
            test_frames: split.test.len(),
        },
        checkpoint_id: checkpoint_id.to_string(),
        enhanced,
        aggregate: aggregate(&per_frame),
        per_frame,
        baseline: evaluate_baseline(ds, split, scorer)?,
        fps: None,
        conventions: CONVENTIONS.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpsReport {
    pub resolution: usize,
    pub batch: usize,
    pub device: String,
    pub n_warmup: usize,
    pub n_timed: usize,
    pub fps_mean: f64,
    pub fps_std: f64,
    pub ms_per_frame: f64,
    /// True when timed on freshly initialized weights of the same
    /// architecture because the checkpoint has another resolution.
    pub reinitialized: bool,
}

pub fn device_descriptor() -> String {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!("cpu ({} {}, 1 of {threads} hardware threads)", std::env::consts::OS, std::env::consts::ARCH)
}

/// Same architecture at another resolution: stage lists are truncated or
/// extended with their end values.
pub fn config_at_resolution(cfg: &NetworkConfig, resolution: usize) -> NetworkConfig {
    let mut c = cfg.clone();
    c.resolution = resolution;
    let stages = c.num_stages();
    if !cfg.g_channels.is_empty() {
        let mut g = cfg.g_channels.clone();
        let last = *g.last().expect("non-empty");
        g.resize(stages + 1, last);
        c.g_channels = g;
    }
    if !cfg.d_channels.is_empty() {
        let mut d = cfg.d_channels.clone();
        d.pop();
        let first = d.first().copied().unwrap_or(cfg.latent_dim.min(64));
        while d.len() + 1 < stages {
            d.insert(0, first);
        }
        d.truncate(stages.saturating_sub(1));
        d.push(cfg.latent_dim);
        c.d_channels = d;
    }
    c
}

/// End-to-end synthesis throughput at batch 1: pose encoding, generator,
/// enhancer and quantization.
pub fn benchmark_fps(bundle: &ModelBundle<f32>, resolution: usize, n_warmup: usize, n_timed: usize) -> Result<FpsReport> {
    if n_timed < 10 {
        return Err(Error::InvalidParams(format!("n_timed must be >= 10, got {n_timed}")));
    }
    let reinit;
    let model = if resolution == bundle.config.resolution {
        reinit = None;
        bundle
    } else {
        let cfg = config_at_resolution(&bundle.config, resolution);
        reinit = Some(ModelBundle::<f32>::new(cfg, bundle.scene, 0)?);
        reinit.as_ref().expect("just set")
    };
    let b = &model.scene.bounds;
    let poses: Vec<Pose7> = (0..n_warmup + n_timed)
        .map(|i| {
            let s = (i as f64 * 0.37).sin() * 0.5;
            Pose7::new(
                [b.center[0] + s * b.extent[0], b.center[1], b.center[2] - s * b.extent[2]],
                [1.0, 0.0, s * 0.2, 0.0],
            )
        })
        .collect::<Result<_>>()?;
    let enhanced = model.enet.is_some();
    for p in &poses[..n_warmup] {
        synthesize_frame(model, p, enhanced)?;
    }
    let mut secs = Vec::with_capacity(n_timed);
    for p in &poses[n_warmup..] {
        let t = Instant::now();
        std::hint::black_box(synthesize_frame(model, p, enhanced)?);
        secs.push(t.elapsed().as_secs_f64().max(1e-9));
    }
    let fps: Vec<f64> = secs.iter().map(|s| 1.0 / s).collect();
    let n = fps.len() as f64;
    let mean = fps.iter().sum::<f64>() / n;
    let var = fps.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(FpsReport {
        resolution,
        batch: 1,
        device: device_descriptor(),
        n_warmup,
        n_timed,
        fps_mean: mean,
        fps_std: var.sqrt(),
        ms_per_frame: 1000.0 * secs.iter().sum::<f64>() / n,
        reinitialized: reinit.is_some(),
    })
}

fn cell(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

/// Aligned plain-text table: PSNR↑ SSIM↑ LPIPS↓ FPS↑.
pub fn format_table(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>9} {:>7} {:>7} {:>9}",
        "method", "PSNR↑", "SSIM↑", "LPIPS↓", "FPS↑"
    );
    let fps = report.fps.as_ref().map(|f| f.fps_mean);
    for (name, a, f) in [("mean image", &report.baseline, None), ("model", &report.aggregate, fps)] {
        let _ = writeln!(
            s,
            "{:<14} {:>9} {:>7} {:>7} {:>9}",
            name,
            cell(Some(a.psnr), 3),
            cell(Some(a.ssim), 3),
            a.lpips.value().map_or(UNAVAILABLE.to_string(), |v| format!("{v:.3}")),
            cell(f, 1)
        );
    }
    let _ = writeln!(
        s,
        "setting {:?}, N = {}, {} test frames",
        report.split.setting, report.split.n, report.split.test_frames
    );
    s
}

pub fn format_fps(r: &FpsReport) -> String {
    format!(
        "resolution {r}x{r}  batch {b}  device {d}\nFPS {m:.2} ± {sd:.2}  ({ms:.2} ms/frame, {n} timed, {w} warmup){re}\n",
        r = r.resolution,
        b = r.batch,
        d = r.device,
        m = r.fps_mean,
        sd = r.fps_std,
        ms = r.ms_per_frame,
        n = r.n_timed,
        w = r.n_warmup,
        re = if r.reinitialized { "  [freshly initialized weights]" } else { "" },
    )
}
