//! Burst super-resolution from RAW Bayer bursts.
//!
//! The pipeline synthesizes misaligned noisy RAW bursts from RGB images,
//! estimates coarse-to-fine optical flow between each frame and the
//! reference, aligns frame features with flow-guided deformable
//! convolutions, fuses them, and reconstructs a high-resolution RGB image
//! with a windowed-attention backbone. Everything runs on a small
//! reverse-mode autodiff engine so the whole model trains end to end on
//! the CPU in either single or double precision.

pub mod align;
pub mod autodiff;
pub mod flow;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod params;
pub mod raw;
pub mod rng;
pub mod swin;
pub mod tensor;

mod error;

pub use error::{Error, Result};
