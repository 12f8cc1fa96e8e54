//! Pose → image inference shared by every front end, so that all of them
//! produce identical bytes for identical requests.

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use serde::{Deserialize, Serialize};

use crate::dataset::{denormalize_frame, DenormalizedFrame};
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::pose::{canonicalize, encode_pose, Pose7, POSE_DIM};
use crate::tensor::Tensor;

/// Poses farther than this many extents from the scene center are served
/// with a warning.
pub const FAR_POSE_EXTENTS: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    #[default]
    PngRgb,
    PngDepth16,
}

impl ImageFormat {
    pub fn content_type(&self) -> &'static str {
        "image/png"
    }
}

impl std::str::FromStr for ImageFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "png_rgb" => Ok(ImageFormat::PngRgb),
            "png_depth16" => Ok(ImageFormat::PngDepth16),
            other => Err(Error::Unsupported(format!("image format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisRequest {
    /// World units; canonicalized before use.
    pub pose: Pose7,
    pub enhanced: bool,
    pub format: ImageFormat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthesized {
    pub bytes: Vec<u8>,
    pub content_type: &'static str,
    /// Set when the pose lies far outside the training bounds.
    pub warning: Option<String>,
}

/// Raw 7-number pose (`tx ty tz qw qx qy qz`) to a canonical pose.
pub fn pose_from_values(v: &[f64]) -> Result<Pose7> {
    let arr: [f64; POSE_DIM] = v
        .try_into()
        .map_err(|_| Error::InvalidPose(format!("expected {POSE_DIM} numbers, got {}", v.len())))?;
    canonicalize(&Pose7 {
        t: [arr[0], arr[1], arr[2]],
        q: [arr[3], arr[4], arr[5], arr[6]],
    })
}

pub fn far_pose_warning(bundle: &ModelBundle<f32>, pose: &Pose7) -> Option<String> {
    let off = bundle.scene.bounds.normalized_offset(&pose.t);
    (off > FAR_POSE_EXTENTS).then(|| {
        format!("pose is {off:.2} extents from the scene center; output is an extrapolation")
    })
}

/// Encoded pose batch of one.
pub fn encode_one(bundle: &ModelBundle<f32>, pose: &Pose7) -> Result<Tensor<f32>> {
    let p = canonicalize(pose)?;
    let enc = encode_pose(&p, &bundle.scene.bounds)?;
    Ok(Tensor::from_vec(&[1, POSE_DIM], enc.iter().map(|v| *v as f32).collect()))
}

/// Quantized RGB (enhanced when requested and available) and, for RGBD
/// models, the generator's depth.
pub fn synthesize_frame(bundle: &ModelBundle<f32>, pose: &Pose7, enhanced: bool) -> Result<DenormalizedFrame> {
    let y = encode_one(bundle, pose)?;
    let (rgb, raw) = bundle.synthesize(&y, enhanced)?;
    let r = bundle.config.resolution;
    let rgb = denormalize_frame(&rgb.reshape(&[3, r, r]), bundle.scene.depth_max_m).rgb;
    let depth = if raw.dim(1) == 4 {
        let c = raw.shape()[1..].to_vec();
        denormalize_frame(&raw.reshape(&c), bundle.scene.depth_max_m).depth
    } else {
        None
    };
    Ok(DenormalizedFrame { rgb, depth })
}

pub fn encode_png_rgb(img: &image::RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .expect("in-memory PNG encoding");
    out
}

pub fn encode_png_depth(img: &crate::dataset::DepthImage) -> Vec<u8> {
    let bytes: Vec<u8> = img.as_raw().iter().flat_map(|v| v.to_ne_bytes()).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(&bytes, img.width(), img.height(), ExtendedColorType::L16)
        .expect("in-memory PNG encoding");
    out
}

pub fn synthesize(bundle: &ModelBundle<f32>, req: &SynthesisRequest) -> Result<Synthesized> {
    let pose = canonicalize(&req.pose)?;
    if req.format == ImageFormat::PngDepth16 && bundle.config.in_channels < 4 {
        return Err(Error::Unsupported("this model does not synthesize depth".into()));
    }
    let frame = synthesize_frame(bundle, &pose, req.enhanced)?;
    let bytes = match req.format {
        ImageFormat::PngRgb => encode_png_rgb(&frame.rgb),
        ImageFormat::PngDepth16 => encode_png_depth(frame.depth.as_ref().expect("RGBD model")),
    };
    Ok(Synthesized {
        bytes,
        content_type: req.format.content_type(),
        warning: far_pose_warning(bundle, &pose),
    })
}
