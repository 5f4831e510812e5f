//! The assembled network and its artifacts.

pub mod accounting;
pub mod backbone;
pub mod checkpoint;
pub mod focusnet;

pub use accounting::{analytic_macs, analytic_params, counted_macs, counted_params, Accounting};
pub use backbone::{Backbone, BackboneConfig, FeaturePyramid};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use focusnet::{FocusNet, ForwardOutput, ModelConfig, SegmentationHeads, MODULE_NAMES};
