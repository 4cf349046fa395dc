use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FedError;
use crate::autodiff::ParamTree;
use crate::models::{batch_loss_and_grad, ModelConfig, TokenCounts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub max_batches: usize,
    pub max_seq_len: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self { learning_rate: 0.1, batch_size: 10, epochs: 1, max_batches: 120, max_seq_len: 20 }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(FedError::InvalidArgument(format!(
                "client learning rate {} must be finite and >= 0",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.max_batches == 0 || self.max_seq_len < 2 {
            return Err(FedError::InvalidArgument(
                "batch_size, epochs and max_batches must be positive and max_seq_len >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Number of local steps for a client holding `examples` sequences.
    pub fn num_batches(&self, examples: usize) -> usize {
        (self.epochs * examples.div_ceil(self.batch_size)).min(self.max_batches)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    /// `final - initial`, flattened in parameter order.
    pub delta: Vec<f64>,
    /// The local model the delta leads to, flattened.
    pub local: Vec<f64>,
    /// Training examples consumed, counting repeats across epochs.
    pub weight: f64,
    pub batches: usize,
    /// Token statistics of the local training batches, each measured at the
    /// weights the batch was trained from.
    pub train: TokenCounts,
}

impl ClientUpdate {
    /// Replaces the delta after post-processing such as clipping, moving
    /// `local` to `initial + delta`. An unchanged delta keeps `local` as is.
    pub fn set_delta(&mut self, initial: &[f64], delta: Vec<f64>) {
        if delta != self.delta {
            self.local = initial.iter().zip(&delta).map(|(i, d)| i + d).collect();
            self.delta = delta;
        }
    }
}

/// Local SGD on one client's sequences starting from `global`.
///
/// Every epoch visits the data in a fresh random order drawn from `rng`;
/// the last batch of an epoch may be short. Training stops after
/// [`ClientConfig::num_batches`] steps.
pub fn client_update(
    global: &ParamTree,
    data: &[Vec<u32>],
    cfg: &ClientConfig,
    model: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<ClientUpdate, FedError> {
    if data.is_empty() {
        return Err(FedError::EmptyClient(String::new()));
    }
    let total = cfg.num_batches(data.len());
    let mut params = global.clone();
    let mut train = TokenCounts::default();
    let mut weight = 0usize;
    let mut done = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    'epochs: loop {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            if done == total {
                break 'epochs;
            }
            let batch: Vec<Vec<u32>> = chunk.iter().map(|i| data[*i].clone()).collect();
            let (_, counts, grads) = batch_loss_and_grad(model, &params, &batch)?;
            sgd_step(&mut params, &grads, cfg.learning_rate);
            train.merge(&counts);
            weight += chunk.len();
            done += 1;
        }
    }
    let delta: Vec<f64> = params.flatten().iter().zip(global.flatten()).map(|(f, i)| f - i).collect();
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(FedError::NonFinite(String::new()));
    }
    Ok(ClientUpdate { delta, local: params.flatten(), weight: weight as f64, batches: done, train })
}

/// `params -= lr · grads`, tensor by tensor.
pub(crate) fn sgd_step(params: &mut ParamTree, grads: &ParamTree, lr: f64) {
    for (name, g) in grads.iter() {
        let p = params.get_mut(name).expect("gradient names match parameters");
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
}
