//! Pose-to-image view synthesis.
//!
//! A noise-free conditional generator maps a 7-D camera pose to an RGBD
//! view of a fixed scene. It is trained adversarially against a projection
//! discriminator with two auxiliary pose-consistency heads and refined by a
//! separately trained enhancement network.

pub mod checkpoint;
pub mod dataset;
pub mod evaluation;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod objective;
pub mod oracle;
pub mod pose;
pub mod synthesis;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
