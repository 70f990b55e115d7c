//! Pose-augmented pedestrian trajectory prediction.
//!
//! The crate covers the whole pipeline: synthetic pose-annotated scenes,
//! a transformer pose encoder fused with several trajectory backbones,
//! training and metrics, robustness analysis, and a social-force navigation
//! simulator that consumes predictions.

pub mod analysis;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod navsim;
pub mod nn;
pub mod plot;
pub mod pose_encoder;
pub mod scene;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
