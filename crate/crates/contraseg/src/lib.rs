//! Desk-scale laboratory for momentum-contrastive pretraining and
//! windowed-attention segmentation of multimodal phantom MRI.
//!
//! The crate is organized around the pipeline stages:
//!
//! * [`synthdata`] — deterministic phantom slices, dataset manifests, splits
//! * [`augment`] — the contrastive and segmentation augmentation pipelines
//! * [`nets`] — the hierarchical windowed-attention encoder and the U-shaped
//!   segmentation network, with per-parameter component tags
//! * [`cl_pretrain`] — momentum-contrastive pretraining of the encoder
//! * [`dec_pretrain`] — the decoder-targeted contrastive pretrainer
//! * [`transfer`] — checkpoints and tag-aware weight surgery
//! * [`metrics`] — DSC / MPA / MIoU / Hausdorff evaluation
//! * [`exp`] — training loops, LR schedule, ablation harness, plots
//!
//! All numeric kernels are generic over the scalar type through
//! [`scalar::Scalar`]; `f32` aliases are the practical training precision and
//! `f64` is used where verification demands it (gradient checks, oracles).

pub mod augment;
pub mod autodiff;
pub mod cl_pretrain;
pub mod dec_pretrain;
pub mod error;
pub mod exp;
pub mod metrics;
pub mod nets;
pub mod npyio;
pub mod optim;
pub mod scalar;
pub mod synthdata;
pub mod transfer;

pub use error::{Error, Result};

/// Autodiff graph at training precision.
pub type GraphF32 = autodiff::Graph<f32>;
/// Autodiff graph at verification precision.
pub type GraphF64 = autodiff::Graph<f64>;
/// Tagged parameter set at training precision.
pub type ParamsF32 = nets::TaggedParameters<f32>;
/// Tagged parameter set at verification precision.
pub type ParamsF64 = nets::TaggedParameters<f64>;
/// Checkpoint at training precision.
pub type CheckpointF32 = transfer::Checkpoint<f32>;
/// Checkpoint at verification precision.
pub type CheckpointF64 = transfer::Checkpoint<f64>;
