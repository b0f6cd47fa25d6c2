//! Segmentation of diabetic-retinopathy lesions (microaneurysms, hard
//! exudates, soft exudates, hemorrhages) in color fundus photographs.
//!
//! * [`dataset`] discovers and loads lesion-annotated fundus images.
//! * [`augment`] holds the training augmentation and the evaluation transform.
//! * [`model`] holds Attention-DeepLab and the DeepLab-V3+, U-Net and gated
//!   U-Net baselines.
//! * [`losses`] holds the Dice/BCE/focal/boundary composite loss.
//! * [`metrics`] computes per-class IoU and threshold-swept AP.
//! * [`trainer`] runs optimisation, validation and checkpointing.

pub mod augment;
pub mod config;
pub mod dataset;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use dataset::{FundusSample, LesionClass, Split};
