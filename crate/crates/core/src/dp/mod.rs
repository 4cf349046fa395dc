//! Differentially private aggregation with online tree noise.
//!
//! Each round the server adds the sum of clipped client deltas to a running
//! prefix sum and releases that prefix plus Gaussian noise from the binary
//! tree nodes covering `[1, t]`. Round `t` is covered by one node per set
//! bit of `t`, so only `popcount(t)` noise vectors are open at a time. Node
//! noise is drawn from a stream keyed by `(seed, level, index)`, so a state
//! can be rebuilt from its round and true prefix alone.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::federated::{clip_update, sum_vectors, FedError};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub clients_per_round: usize,
    /// Privacy level reported alongside a run; not computed here.
    pub reported_zcdp: Option<f64>,
}

impl DpConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        if !(self.clip_norm > 0.0) {
            return Err(DpError::InvalidConfig(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return Err(DpError::InvalidConfig(format!(
                "noise_multiplier {} must be finite and >= 0",
                self.noise_multiplier
            )));
        }
        if self.clients_per_round == 0 {
            return Err(DpError::InvalidConfig("clients_per_round must be positive".into()));
        }
        Ok(())
    }

    /// Per-coordinate standard deviation of every tree node.
    pub fn node_std(&self) -> f64 {
        if self.noise_multiplier == 0.0 { 0.0 } else { self.noise_multiplier * self.clip_norm }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DpError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("clients_per_round must be positive")]
    ZeroClients,
    #[error(transparent)]
    Fed(#[from] FedError),
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    level: u32,
    index: u64,
    noise: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeRelease {
    /// Noisy prefix sum `S̃_t`.
    pub noisy_prefix: Vec<f64>,
    /// `S̃_t - S̃_{t-1}`, computed as `clipped_sum + (noise_t - noise_{t-1})`
    /// so that without noise it is exactly this round's clipped sum.
    pub increment: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeAggState {
    t: u64,
    dim: usize,
    std: f64,
    seed: u64,
    prefix: Vec<f64>,
    nodes: Vec<Node>,
    /// Total noise in the latest release.
    noise: Vec<f64>,
}

impl TreeAggState {
    pub fn new(dim: usize, cfg: &DpConfig, seed: u64) -> Self {
        assert!(dim > 0, "tree dimension must be positive");
        Self {
            t: 0,
            dim,
            std: cfg.node_std(),
            seed,
            prefix: vec![0.0; dim],
            nodes: Vec::new(),
            noise: vec![0.0; dim],
        }
    }

    /// Rebuilds the state after `t` rounds with true prefix sum `prefix`.
    pub fn restore(cfg: &DpConfig, seed: u64, t: u64, prefix: Vec<f64>) -> Self {
        let mut s = Self::new(prefix.len(), cfg, seed);
        s.t = t;
        s.prefix = prefix;
        s.refresh_nodes();
        s
    }

    pub fn round(&self) -> u64 {
        self.t
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn true_prefix(&self) -> &[f64] {
        &self.prefix
    }

    /// Noise vectors contributing to the latest release.
    pub fn contributing_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// `(level, index)` of the open nodes, highest level first.
    pub fn open_nodes(&self) -> Vec<(u32, u64)> {
        self.nodes.iter().map(|n| (n.level, n.index)).collect()
    }

    fn node_noise(&self, level: u32, index: u64) -> Vec<f64> {
        if self.std == 0.0 {
            return vec![0.0; self.dim];
        }
        let mut rng = stream(self.seed, Purpose::TreeNoise, level as u64, index);
        (0..self.dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                self.std * z
            })
            .collect()
    }

    /// Opens the nodes for set bits of `t`, keeping any still-open node.
    fn refresh_nodes(&mut self) {
        let mut nodes = Vec::with_capacity(self.t.count_ones() as usize);
        for level in (0..64u32).rev() {
            if self.t >> level & 1 == 0 {
                continue;
            }
            // Dyadic block of size 2^level ending at (t >> level) << level.
            let index = (self.t >> level) - 1;
            match self.nodes.iter().position(|n| n.level == level && n.index == index) {
                Some(i) => nodes.push(self.nodes.swap_remove(i)),
                None => nodes.push(Node { level, index, noise: self.node_noise(level, index) }),
            }
        }
        self.nodes = nodes;
        let mut noise = vec![0.0; self.dim];
        for n in &self.nodes {
            for (a, b) in noise.iter_mut().zip(&n.noise) {
                *a += b;
            }
        }
        self.noise = noise;
    }

    /// Adds this round's clipped sum and releases the noisy prefix.
    pub fn step(&mut self, clipped_sum: &[f64]) -> Result<TreeRelease, DpError> {
        if clipped_sum.len() != self.dim {
            return Err(DpError::DimensionMismatch { expected: self.dim, found: clipped_sum.len() });
        }
        for (s, x) in self.prefix.iter_mut().zip(clipped_sum) {
            *s += x;
        }
        self.t += 1;
        if self.std == 0.0 {
            self.nodes = (0..64u32)
                .rev()
                .filter(|l| self.t >> l & 1 == 1)
                .map(|level| Node { level, index: (self.t >> level) - 1, noise: Vec::new() })
                .collect();
            return Ok(TreeRelease { noisy_prefix: self.prefix.clone(), increment: clipped_sum.to_vec() });
        }
        let previous = std::mem::take(&mut self.noise);
        self.refresh_nodes();
        let noisy_prefix = self.prefix.iter().zip(&self.noise).map(|(s, n)| s + n).collect();
        let increment = clipped_sum
            .iter()
            .zip(self.noise.iter().zip(&previous))
            .map(|(c, (now, before))| c + (now - before))
            .collect();
        Ok(TreeRelease { noisy_prefix, increment })
    }
}

/// Functional form of [`TreeAggState::new`].
pub fn tree_init(dim: usize, cfg: &DpConfig, seed: u64) -> TreeAggState {
    TreeAggState::new(dim, cfg, seed)
}

/// Functional form of [`TreeAggState::step`].
pub fn tree_step(state: &mut TreeAggState, clipped_sum: &[f64]) -> Result<TreeRelease, DpError> {
    state.step(clipped_sum)
}

/// Per-round mean recovered from two consecutive releases.
pub fn dp_round_delta(prev_release: &[f64], new_release: &[f64], n: usize) -> Result<Vec<f64>, DpError> {
    if n == 0 {
        return Err(DpError::ZeroClients);
    }
    if prev_release.len() != new_release.len() {
        return Err(DpError::DimensionMismatch { expected: prev_release.len(), found: new_release.len() });
    }
    Ok(prev_release.iter().zip(new_release).map(|(a, b)| (b - a) / n as f64).collect())
}

/// Clips every client delta, sums them in order and steps the tree. Returns
/// the release and the server-side mean delta `increment / clients_per_round`.
pub fn private_round(
    state: &mut TreeAggState,
    deltas: &[Vec<f64>],
    cfg: &DpConfig,
) -> Result<(TreeRelease, Vec<f64>), DpError> {
    if cfg.clients_per_round == 0 {
        return Err(DpError::ZeroClients);
    }
    let clipped: Vec<Vec<f64>> = deltas.iter().map(|d| clip_update(d, cfg.clip_norm)).collect();
    let sum = sum_vectors(clipped.iter().map(Vec::as_slice))?;
    let release = state.step(&sum)?;
    let n = cfg.clients_per_round as f64;
    let mean = release.increment.iter().map(|x| x / n).collect();
    Ok((release, mean))
}
