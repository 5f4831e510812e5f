//! FocusNet-style polyp segmentation on a small reverse-mode autodiff engine.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors and the reverse-mode engine, [`gradcheck`] to verify it;
//! * [`nn`]: convolution (standard and deformable), normalization, resizing, pooling;
//! * [`attention`]: channel, spatial and efficient-channel gates;
//! * [`cidm`], [`dem`], [`fam`]: the decoder, detail-enhancement and focus-attention modules;
//! * [`model`]: backbone stand-in, full network wiring, checkpoints, accounting;
//! * [`train`], [`data`], [`metrics`]: losses and the optimizer loop, datasets, evaluation;
//! * [`verify`]: the 64-bit gradient suites exposed by the CLI.

pub mod attention;
pub mod cidm;
pub mod config;
pub mod data;
pub mod dem;
pub mod error;
pub mod fam;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod module;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{CheckpointError, Error, Result};
pub use module::{Buffer, ForwardCtx, Module, ParamBuilder, Parameter};
pub use tensor::{Real, Tensor};
