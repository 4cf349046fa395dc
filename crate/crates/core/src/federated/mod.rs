//! One round of cross-device federated training.
//!
//! Clients run plain SGD from a snapshot of the global model and upload the
//! difference `final - initial`. Uploads can be clipped and stochastically
//! quantized; the server averages them and treats the mean as an ascent
//! direction for FedAdam or SGD with momentum.

mod client;
mod compress;
mod server;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

pub use client::{client_update, ClientConfig, ClientUpdate};
pub use compress::{clip_update, l2_norm, quantize_update, stochastic_round, QuantConfig};
pub use server::{OptimizerState, ServerOptimizer, ServerState};

use crate::models::ModelError;
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FedError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("client {0:?} has no training sequences")]
    EmptyClient(String),
    #[error("cannot sample {requested} clients from a pool of {available}")]
    NotEnoughClients { requested: usize, available: usize },
    #[error("no client updates to aggregate")]
    EmptyRound,
    #[error("vector length {found} does not match expected {expected}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("client {0:?} produced a non-finite update")]
    NonFinite(String),
    #[error("server optimizer state does not match the requested {0} step")]
    OptimizerMismatch(&'static str),
    #[error("{0}")]
    InvalidArgument(String),
}

impl FedError {
    /// True when the error signals numerical blow-up rather than misuse.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            FedError::NonFinite(_) | FedError::Model(ModelError::Tensor(crate::autodiff::TensorError::NonFinite { .. }))
        )
    }
}

/// Uniform sample of `n` distinct ids without replacement, fixed by `(seed, round)`.
pub fn sample_clients(pool: &[String], n: usize, round: u64, seed: u64) -> Result<Vec<String>, FedError> {
    if n > pool.len() {
        return Err(FedError::NotEnoughClients { requested: n, available: pool.len() });
    }
    let mut rng = stream(seed, Purpose::ClientSampling, round, 0);
    Ok(pool.choose_multiple(&mut rng, n).cloned().collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    #[default]
    ExampleWeighted,
}

impl std::str::FromStr for Weighting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "example_weighted" => Ok(Weighting::ExampleWeighted),
            _ => Err(format!("unknown weighting {s:?} (expected uniform or example_weighted)")),
        }
    }
}

/// Sum of equal-length vectors, accumulated in list order.
pub fn sum_vectors<'a>(vectors: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>, FedError> {
    let mut iter = vectors.into_iter();
    let mut total = iter.next().ok_or(FedError::EmptyRound)?.to_vec();
    for v in iter {
        if v.len() != total.len() {
            return Err(FedError::LengthMismatch { expected: total.len(), found: v.len() });
        }
        for (t, x) in total.iter_mut().zip(v) {
            *t += x;
        }
    }
    Ok(total)
}

/// Weighted mean of the client deltas.
///
/// Uniform weighting sums in list order and divides by the count, which is
/// the same arithmetic the private path uses.
pub fn aggregate(updates: &[ClientUpdate], weighting: Weighting) -> Result<Vec<f64>, FedError> {
    weighted_mean(updates, weighting, |u| &u.delta)
}

/// Weighted mean of the clients' local models, with the same weights as
/// [`aggregate`].
pub fn average_models(updates: &[ClientUpdate], weighting: Weighting) -> Result<Vec<f64>, FedError> {
    weighted_mean(updates, weighting, |u| &u.local)
}

fn weighted_mean(
    updates: &[ClientUpdate],
    weighting: Weighting,
    field: impl Fn(&ClientUpdate) -> &Vec<f64>,
) -> Result<Vec<f64>, FedError> {
    if updates.is_empty() {
        return Err(FedError::EmptyRound);
    }
    match weighting {
        Weighting::Uniform => {
            let mut total = sum_vectors(updates.iter().map(|u| field(u).as_slice()))?;
            let n = updates.len() as f64;
            total.iter_mut().for_each(|x| *x /= n);
            Ok(total)
        }
        Weighting::ExampleWeighted => {
            let w_total: f64 = updates.iter().map(|u| u.weight).sum();
            if !(w_total > 0.0) {
                return Err(FedError::InvalidArgument(format!("total client weight {w_total} must be positive")));
            }
            let dim = field(&updates[0]).len();
            let mut total = vec![0.0; dim];
            for u in updates {
                let v = field(u);
                if v.len() != dim {
                    return Err(FedError::LengthMismatch { expected: dim, found: v.len() });
                }
                let share = u.weight / w_total;
                for (t, x) in total.iter_mut().zip(v) {
                    *t += share * x;
                }
            }
            Ok(total)
        }
    }
}
