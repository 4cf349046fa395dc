//! Multi-head self-attention and the Pre-LN transformer block.
//!
//! Inputs are `d × n` (features by positions). Per head, scores are
//! `(W_Q X)ᵀ (W_K X)`; the standard kernel takes a row softmax (with the
//! usual `1/sqrt(d_head)` temperature), the scale-invariant kernel takes
//! `N(ReLU(scores))` with `N` the row normalization. Neither kernel is
//! affected by the other's choices.

use rand::Rng;

use super::{param_struct, ModelError, ModelVariant};
use crate::activations::row_normalize_graph;
use crate::autodiff::{Graph, Tensor, TensorError, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

param_struct! {
    /// One transformer block. Projections are `d × d`; `ffn_w1` is
    /// `ffn × d`, `ffn_w2` is `d × ffn`; gains and biases are vectors.
    AttnParams {
        w_q, w_k, w_v, w_o,
        ln1_gain, ln1_bias, ln2_gain, ln2_bias,
        ffn_w1, ffn_b1, ffn_w2, ffn_b2,
    }
}

impl AttnParams<Vec<usize>> {
    pub fn shapes(d: usize, ffn: usize) -> Self {
        AttnParams {
            w_q: vec![d, d],
            w_k: vec![d, d],
            w_v: vec![d, d],
            w_o: vec![d, d],
            ln1_gain: vec![d],
            ln1_bias: vec![d],
            ln2_gain: vec![d],
            ln2_bias: vec![d],
            ffn_w1: vec![ffn, d],
            ffn_b1: vec![ffn],
            ffn_w2: vec![d, ffn],
            ffn_b2: vec![d],
        }
    }
}

impl AttnParams {
    /// Zero weights, unit layer-norm gains.
    pub fn zeros(d: usize, ffn: usize) -> Self {
        AttnParams::shapes(d, ffn)
            .try_map::<_, ()>("", &mut |name, s| {
                Ok(if name.ends_with("_gain") { Tensor::full(s, 1.0) } else { Tensor::zeros(s) })
            })
            .expect("infallible")
    }

    /// Glorot-uniform matrices, zero biases, unit gains.
    pub fn random(d: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        AttnParams::shapes(d, ffn)
            .try_map::<_, ()>("", &mut |name, s| Ok(init_leaf(name, s, rng)))
            .expect("infallible")
    }

    pub fn width(&self) -> usize {
        self.w_q.shape()[0]
    }
}

/// Default initialization used for every parameter leaf of the models.
pub(crate) fn init_leaf(name: &str, shape: &[usize], rng: &mut impl Rng) -> Tensor {
    if name.ends_with("_gain") {
        return Tensor::full(shape, 1.0);
    }
    match shape {
        [rows, cols] => {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-limit..=limit)).collect();
            Tensor::new(shape.to_vec(), data).expect("shape")
        }
        _ => Tensor::zeros(shape),
    }
}

/// Layer normalization over axis 0 (features) of a `d × n` node.
pub fn layer_norm_graph(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
    let (d, n) = (g.shape(x)[0], g.shape(x)[1]);
    let inv_d = 1.0 / d as f64;
    let sum = g.sum_axis(x, 0)?;
    let mean = g.scale(sum, inv_d)?;
    let mean = g.broadcast(mean, 0, d)?;
    let centered = g.sub(x, mean)?;
    let sq = g.mul(centered, centered)?;
    let var = g.sum_axis(sq, 0)?;
    let var = g.affine(var, inv_d, LAYER_NORM_EPS)?;
    let std = g.sqrt(var)?;
    let std = g.broadcast(std, 0, d)?;
    let normed = g.div(centered, std)?;
    let gain = g.broadcast(gain, 1, n)?;
    let bias = g.broadcast(bias, 1, n)?;
    let scaled = g.mul(normed, gain)?;
    g.add(scaled, bias)
}

fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            m.data_mut()[i * n + j] = 1.0;
        }
    }
    m
}

/// Recorded attention: returns per-head probability nodes (`n × n`) and the
/// output node (`d × n`).
pub fn attention_graph(
    g: &mut Graph,
    x: Var,
    p: &AttnParams<Var>,
    heads: usize,
    variant: ModelVariant,
    eps: f64,
    causal: bool,
) -> Result<(Vec<Var>, Var), TensorError> {
    let (d, n) = (g.shape(x)[0], g.shape(x)[1]);
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::InvalidArgument {
            op: "attention",
            detail: format!("width {d} not divisible into {heads} heads"),
        });
    }
    let dh = d / heads;
    let q = g.matmul(p.w_q, x)?;
    let k = g.matmul(p.w_k, x)?;
    let v = g.matmul(p.w_v, x)?;
    let mask = if causal && variant.is_scale_invariant() { Some(g.constant(causal_mask(n))?) } else { None };

    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let (lo, hi) = (head * dh, (head + 1) * dh);
        let qh = g.slice(q, 0, lo, hi)?;
        let kh = g.slice(k, 0, lo, hi)?;
        let vh = g.slice(v, 0, lo, hi)?;
        let qt = g.transpose(qh)?;
        let scores = g.matmul(qt, kh)?;
        let prob = if variant.is_scale_invariant() {
            let mut r = g.relu(scores)?;
            if let Some(m) = mask {
                r = g.mul(r, m)?;
            }
            row_normalize_graph(g, r, eps)?
        } else {
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            g.softmax_rows(scaled, causal)?
        };
        let pt = g.transpose(prob)?;
        outs.push(g.matmul(vh, pt)?);
        probs.push(prob);
    }
    let merged = if heads == 1 { outs[0] } else { g.concat(&outs, 0)? };
    let out = g.matmul(p.w_o, merged)?;
    Ok((probs, out))
}

/// Recorded Pre-LN block: `X + Attn(LN(X))`, then `+ FFN(LN(·))` with a ReLU
/// feedforward.
pub fn transformer_block_graph(
    g: &mut Graph,
    x: Var,
    p: &AttnParams<Var>,
    heads: usize,
    variant: ModelVariant,
    eps: f64,
) -> Result<Var, TensorError> {
    let n = g.shape(x)[1];
    let a = layer_norm_graph(g, x, p.ln1_gain, p.ln1_bias)?;
    let (_, attn) = attention_graph(g, a, p, heads, variant, eps, true)?;
    let x1 = g.add(x, attn)?;
    let b = layer_norm_graph(g, x1, p.ln2_gain, p.ln2_bias)?;
    let h = g.matmul(p.ffn_w1, b)?;
    let b1 = g.broadcast(p.ffn_b1, 1, n)?;
    let h = g.add(h, b1)?;
    let h = g.relu(h)?;
    let f = g.matmul(p.ffn_w2, h)?;
    let b2 = g.broadcast(p.ffn_b2, 1, n)?;
    let f = g.add(f, b2)?;
    g.add(x1, f)
}

fn check_transformer(variant: ModelVariant) -> Result<(), ModelError> {
    if variant.is_cifg() {
        Err(ModelError::WrongFamily { expected: "transformer", got: variant })
    } else {
        Ok(())
    }
}

/// Self-attention on a `d × n` input. Returns per-head probabilities and the output.
pub fn attention(
    x: &Tensor,
    p: &AttnParams,
    heads: usize,
    variant: ModelVariant,
    eps: f64,
    causal: bool,
) -> Result<(Vec<Tensor>, Tensor), ModelError> {
    check_transformer(variant)?;
    let mut g = Graph::new();
    let pv = p.try_map("", &mut |name, t| g.input(name, t.clone()))?;
    let xv = g.input("x", x.clone())?;
    let (probs, out) = attention_graph(&mut g, xv, &pv, heads, variant, eps, causal)?;
    Ok((probs.iter().map(|v| g.value(*v).clone()).collect(), g.value(out).clone()))
}

/// One Pre-LN transformer block on a `d × n` input.
pub fn transformer_block(
    x: &Tensor,
    p: &AttnParams,
    heads: usize,
    variant: ModelVariant,
    eps: f64,
) -> Result<Tensor, ModelError> {
    check_transformer(variant)?;
    let mut g = Graph::new();
    let pv = p.try_map("", &mut |name, t| g.input(name, t.clone()))?;
    let xv = g.input("x", x.clone())?;
    let out = transformer_block_graph(&mut g, xv, &pv, heads, variant, eps)?;
    Ok(g.value(out).clone())
}
