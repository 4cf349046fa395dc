//! CIFG and transformer language models, standard and scale-invariant.

mod attention;
mod cifg;
mod lm;
mod metrics;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::activations::{ActivationKind, DEFAULT_EPS};
use crate::autodiff::TensorError;

pub use attention::{attention, attention_graph, layer_norm_graph, transformer_block, transformer_block_graph, AttnParams, LAYER_NORM_EPS};
pub use cifg::{cifg_step, cifg_step_graph, CifgParams};
pub use lm::{batch_loss_and_grad, batch_metrics, lm_forward, lm_loss_graph, LmBody, LmParams};
pub use metrics::{loss_and_metrics, MetricMode, TokenCounts};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    #[serde(rename = "cifg")]
    CifgStandard,
    #[serde(rename = "si_cifg")]
    CifgScaleInvariant,
    #[serde(rename = "transformer")]
    TransformerStandard,
    #[serde(rename = "si_transformer")]
    TransformerScaleInvariant,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 4] = [
        ModelVariant::CifgStandard,
        ModelVariant::CifgScaleInvariant,
        ModelVariant::TransformerStandard,
        ModelVariant::TransformerScaleInvariant,
    ];

    pub fn is_cifg(self) -> bool {
        matches!(self, ModelVariant::CifgStandard | ModelVariant::CifgScaleInvariant)
    }

    pub fn is_scale_invariant(self) -> bool {
        matches!(self, ModelVariant::CifgScaleInvariant | ModelVariant::TransformerScaleInvariant)
    }

    /// Activation used for the CIFG forget and output gates.
    pub fn gate_activation(self) -> ActivationKind {
        if self.is_scale_invariant() {
            ActivationKind::SiSigmoid
        } else {
            ActivationKind::Sigmoid
        }
    }

    /// Activation used for the CIFG candidate cell and `h_t = o ⊙ act(c_t)`.
    pub fn cell_activation(self) -> ActivationKind {
        if self.is_scale_invariant() {
            ActivationKind::SiTanh
        } else {
            ActivationKind::Tanh
        }
    }

    /// The standard counterpart of a scale-invariant variant, or itself.
    pub fn standard_counterpart(self) -> ModelVariant {
        match self {
            ModelVariant::CifgScaleInvariant => ModelVariant::CifgStandard,
            ModelVariant::TransformerScaleInvariant => ModelVariant::TransformerStandard,
            other => other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelVariant::CifgStandard => "cifg",
            ModelVariant::CifgScaleInvariant => "si_cifg",
            ModelVariant::TransformerStandard => "transformer",
            ModelVariant::TransformerScaleInvariant => "si_transformer",
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ModelVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| format!("unknown model variant {s:?} (expected cifg, si_cifg, transformer or si_transformer)"))
    }
}

/// Architecture hyperparameters of a language model.
///
/// CIFG variants use `embed_dim` and `hidden_dim`; transformer variants use
/// `embed_dim` as the model width together with `layers`, `heads`,
/// `ffn_dim` and `max_positions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub eps: f64,
}

impl ModelConfig {
    pub fn new(variant: ModelVariant, vocab_size: usize) -> Self {
        Self {
            variant,
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            layers: 2,
            heads: 2,
            ffn_dim: 64,
            max_positions: 20,
            eps: DEFAULT_EPS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |detail: String| Err(ModelError::Config(detail));
        if self.vocab_size < 4 {
            return bad(format!("vocab_size {} < 4", self.vocab_size));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("embed_dim and hidden_dim must be positive".into());
        }
        if !self.variant.is_cifg() {
            if self.layers == 0 || self.heads == 0 || self.ffn_dim == 0 || self.max_positions == 0 {
                return bad("transformer layers, heads, ffn_dim and max_positions must be positive".into());
            }
            if !self.embed_dim.is_multiple_of(self.heads) {
                return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
            }
        }
        if !(self.eps >= 0.0) {
            return bad(format!("eps {} must be >= 0", self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("invalid sequence: {0}")]
    InvalidSequence(String),
    #[error("parameter {0:?} missing")]
    MissingParam(String),
    #[error("parameter {name:?} has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("{0}")]
    Config(String),
    #[error("operation needs a {expected} variant, got {got}")]
    WrongFamily { expected: &'static str, got: ModelVariant },
}

/// Generates a parameter struct generic over its leaf type (`Tensor` for
/// values, `Var` for graph nodes, `Vec<usize>` for shapes) plus a
/// name-aware `try_map` between leaf types.
macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::autodiff::Tensor> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            /// Maps every leaf, passing `prefix` + field name.
            pub fn try_map<U, E>(
                &self,
                prefix: &str,
                f: &mut impl FnMut(&str, &T) -> Result<U, E>,
            ) -> Result<$name<U>, E> {
                Ok($name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field)?,)*
                })
            }
        }
    };
}
pub(crate) use param_struct;
