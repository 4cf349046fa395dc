//! Scale-invariant recurrent and attention language models trained with
//! simulated cross-device federated learning, optionally under DP-FTRL.
//!
//! Everything is built on a small reverse-mode differentiation engine over
//! `f64` tensors ([`autodiff`]). [`models`] defines CIFG and transformer
//! language models in standard and scale-invariant form, [`federated`] and
//! [`dp`] implement one training round, and [`experiment`] drives whole runs.

pub mod activations;
pub mod autodiff;
pub mod data;
pub mod dp;
pub mod experiment;
pub mod federated;
pub mod models;
pub mod rng;

pub use activations::{ActivationKind, DEFAULT_EPS};
pub use autodiff::{GradMap, Graph, ParamTree, Tensor, TensorError, Var};
pub use data::{FederatedDataset, Tokenizer, Vocab};
pub use dp::{DpConfig, TreeAggState};
pub use experiment::{ExperimentConfig, ExperimentError, MetricsRecord};
pub use federated::{ClientConfig, ClientUpdate, QuantConfig, ServerOptimizer, ServerState, Weighting};
pub use models::{LmParams, MetricMode, ModelConfig, ModelVariant, TokenCounts};
