//! Multi-task learning models built on a minimal tape-based autodiff core.
//!
//! The centerpiece is an adaptive task-to-task fusion network (AdaTT): stacked
//! fusion levels of task-specific (and optional shared) units, each combining
//! every expert through an input-conditioned softmax gate and adding a linear
//! combination of its own native experts as a residual. Five reference
//! architectures — shared-bottom, MMoE, multi-level MMoE, cross-stitch, and
//! PLE — share the same tensor core, model interface, training loop, and
//! checkpoint format, so experiments are architecture-agnostic.
//!
//! The `adatt` binary exposes the experiment surface (`train`, `evaluate`,
//! `sweep`, `ablate`, `gates`); see the repository README.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gates;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{ArchKind, ArchModel, ModelConfig, TaskKind};
pub use tensor::Tensor;
