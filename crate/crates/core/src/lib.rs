//! Multi-task driving perception: one shared convolutional encoder feeding a
//! three-scale anchor-based object detector, a drivable-area segmentation head
//! and a lane segmentation head.
//!
//! The crate carries its own small reverse-mode autograd ([`autograd`]), so
//! the model trains on the CPU without external ML runtimes. Losses are
//! evaluated in `f64` outside the tape and seed the backward pass with their
//! gradients with respect to the head outputs.
//!
//! Typical flow: generate or load a dataset ([`data`]), train with
//! [`training::fit`], score with [`training::evaluate`], and run single images
//! through [`inference::predict_image`].

pub mod ablation;
pub mod autograd;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod heads;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod training;

pub use config::{LaneDecoderKind, LaneLossKind, ModelConfig, RunConfig};
pub use error::{Error, Result};
pub use model::PerceptionModel;
