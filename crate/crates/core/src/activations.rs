//! Standard and scale-invariant activations.
//!
//! The scale-invariant family divides by a maximum (or a row sum) that can be
//! zero, so every denominator is floored at `eps`. A degenerate input (all
//! zero, or all non-positive for SI-σ) therefore maps to the zero vector.
//!
//! Each activation comes in two forms: a plain slice function, and a
//! `*_graph` builder that records the same computation on a [`Graph`] so it
//! can be differentiated. Graph forms normalize along axis 0, i.e. per column
//! of an `h × batch` matrix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, TensorError, Var};

pub const DEFAULT_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActivationKind {
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    SiSigmoid,
    SiTanh,
}

impl ActivationKind {
    pub fn is_scale_invariant(self) -> bool {
        matches!(self, ActivationKind::SiSigmoid | ActivationKind::SiTanh)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ActivationError {
    #[error("row_normalize requires non-negative entries, found {value} at ({row}, {col})")]
    NegativeEntry { row: usize, col: usize, value: f64 },
    #[error("{0:?} is not a baseline activation")]
    NotBaseline(ActivationKind),
    #[error("activation input is empty")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// A zero floor would turn 0/0 into NaN; the smallest positive normal keeps
/// the quotient at exactly zero instead.
fn denominator_floor(eps: f64) -> f64 {
    eps.max(f64::MIN_POSITIVE)
}

/// `x_i / max(max_j |x_j|, eps)`.
pub fn maxn(x: &[f64], eps: f64) -> Vec<f64> {
    let m = x.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let d = m.max(denominator_floor(eps));
    x.iter().map(|v| v / d).collect()
}

/// `ReLU(x)_i / max(max_j ReLU(x)_j, eps)`, in `[0, 1]`.
pub fn si_sigmoid(x: &[f64], eps: f64) -> Vec<f64> {
    let relu: Vec<f64> = x.iter().map(|v| v.max(0.0)).collect();
    let m = relu.iter().fold(0.0_f64, |acc, v| acc.max(*v));
    let d = m.max(denominator_floor(eps));
    relu.iter().map(|v| v / d).collect()
}

/// Scale-invariant tanh: MaxN itself, in `[-1, 1]`.
pub fn si_tanh(x: &[f64], eps: f64) -> Vec<f64> {
    maxn(x, eps)
}

/// Row-wise normalization `A_ij / max(sum_j A_ij, eps)` of a non-negative matrix.
pub fn row_normalize(a: &Tensor, eps: f64) -> Result<Tensor, ActivationError> {
    let (rows, cols) = a.dims2().ok_or(TensorError::ShapeMismatch {
        op: "row_normalize",
        detail: format!("expected a matrix, got shape {:?}", a.shape()),
    })?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = a.row(r);
        if let Some((c, v)) = row.iter().enumerate().find(|(_, v)| **v < 0.0) {
            return Err(ActivationError::NegativeEntry { row: r, col: c, value: *v });
        }
        let d = row.iter().sum::<f64>().max(denominator_floor(eps));
        out.extend(row.iter().map(|v| v / d));
    }
    Ok(Tensor::matrix(rows, cols, out)?)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Sigmoid, tanh, ReLU or softmax of a vector.
pub fn baseline_activation(kind: ActivationKind, x: &[f64]) -> Result<Vec<f64>, ActivationError> {
    if x.is_empty() {
        return Err(ActivationError::Empty);
    }
    Ok(match kind {
        ActivationKind::Sigmoid => x.iter().map(|v| sigmoid(*v)).collect(),
        ActivationKind::Tanh => x.iter().map(|v| v.tanh()).collect(),
        ActivationKind::Relu => x.iter().map(|v| v.max(0.0)).collect(),
        ActivationKind::Softmax => softmax(x),
        other => return Err(ActivationError::NotBaseline(other)),
    })
}

/// Any activation of a vector; `eps` only matters for the scale-invariant kinds.
pub fn activate(kind: ActivationKind, x: &[f64], eps: f64) -> Vec<f64> {
    match kind {
        ActivationKind::SiSigmoid => si_sigmoid(x, eps),
        ActivationKind::SiTanh => si_tanh(x, eps),
        _ => baseline_activation(kind, x).unwrap_or_default(),
    }
}

/// Divides `x` by `max(reduce_axis0(x), eps)` broadcast back over axis 0.
fn normalize_axis0(g: &mut Graph, x: Var, magnitude: Var, eps: f64) -> Result<Var, TensorError> {
    let n = g.shape(x)[0];
    let m = g.max_axis(magnitude, 0)?;
    let m = g.clamp_min(m, denominator_floor(eps))?;
    let m = g.broadcast(m, 0, n)?;
    g.div(x, m)
}

pub fn maxn_graph(g: &mut Graph, x: Var, eps: f64) -> Result<Var, TensorError> {
    let a = g.abs(x)?;
    normalize_axis0(g, x, a, eps)
}

pub fn si_sigmoid_graph(g: &mut Graph, x: Var, eps: f64) -> Result<Var, TensorError> {
    let r = g.relu(x)?;
    normalize_axis0(g, r, r, eps)
}

pub fn si_tanh_graph(g: &mut Graph, x: Var, eps: f64) -> Result<Var, TensorError> {
    maxn_graph(g, x, eps)
}

/// Row normalization of a non-negative matrix node.
pub fn row_normalize_graph(g: &mut Graph, a: Var, eps: f64) -> Result<Var, TensorError> {
    let cols = g.shape(a)[1];
    let s = g.sum_axis(a, 1)?;
    let s = g.clamp_min(s, denominator_floor(eps))?;
    let s = g.broadcast(s, 1, cols)?;
    g.div(a, s)
}

/// Records `kind` applied to `x`. Softmax is taken row-wise on a matrix.
pub fn activation_graph(g: &mut Graph, kind: ActivationKind, x: Var, eps: f64) -> Result<Var, TensorError> {
    match kind {
        ActivationKind::Sigmoid => g.sigmoid(x),
        ActivationKind::Tanh => g.tanh(x),
        ActivationKind::Relu => g.relu(x),
        ActivationKind::Softmax => g.softmax_rows(x, false),
        ActivationKind::SiSigmoid => si_sigmoid_graph(g, x, eps),
        ActivationKind::SiTanh => si_tanh_graph(g, x, eps),
    }
}
