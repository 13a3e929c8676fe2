//! Counterfactual routing laboratory for sparse mixture-of-experts models.
//!
//! The crate trains a small MoE transformer, runs the offline causal analysis
//! (token stratification, layer perturbation sensitivity, counterfactual
//! expert ablation) and applies compute-preserving routing plans at
//! inference time. Stages exchange data through documented files so each
//! one can be run and tested in isolation.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, kernels and the reverse-mode tape
//! - [`model`]: the MoE transformer, routing hooks and checkpoints
//! - [`trainer`]: language-model training with a load-balancing loss
//! - [`calibration`]: per-token losses and hard/easy stratification
//! - [`layer_analysis`]: perturbation sensitivity, relative knowledge
//!   intensity and the synthetic residual cascade
//! - [`expert_analysis`]: virtual ablation and counterfactual expert impact
//! - [`router`]: budget reallocation, prior fusion and routing plans
//! - [`eval`]: fact corpora, routing-mode comparisons and figure exports

pub mod calibration;
pub mod error;
pub mod eval;
pub mod expert_analysis;
pub mod layer_analysis;
pub mod model;
pub mod numerics;
pub mod router;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{ModelConfig, MoeModel, RoutingOverride};
pub use numerics::{Real, Tensor};
