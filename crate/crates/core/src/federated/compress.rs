use rand::Rng;
use serde::{Deserialize, Serialize};

use super::FedError;

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Projects `delta` onto the L2 ball of radius `clip_norm`. An infinite
/// radius disables clipping.
pub fn clip_update(delta: &[f64], clip_norm: f64) -> Vec<f64> {
    assert!(clip_norm > 0.0, "clip_norm must be positive");
    if clip_norm == f64::INFINITY {
        return delta.to_vec();
    }
    let norm = l2_norm(delta);
    let factor = clip_norm / norm;
    if norm == 0.0 || factor >= 1.0 {
        return delta.to_vec();
    }
    let mut out: Vec<f64> = delta.iter().map(|x| x * factor).collect();
    // Rounding can leave the product a hair outside the ball.
    let mut after = l2_norm(&out);
    while after > clip_norm {
        let shrink = clip_norm / after * (1.0 - f64::EPSILON);
        out.iter_mut().for_each(|x| *x *= shrink);
        after = l2_norm(&out);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub enabled: bool,
    pub bits: u32,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self { enabled: false, bits: 8 }
    }
}

impl QuantConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if !(2..=16).contains(&self.bits) {
            return Err(FedError::InvalidArgument(format!("quantization bits {} outside [2, 16]", self.bits)));
        }
        Ok(())
    }
}

/// Value of grid level `k` of `levels` evenly spaced points on `[lo, hi]`.
fn level(lo: f64, hi: f64, levels: u64, k: u64) -> f64 {
    if k == 0 {
        lo
    } else if k == levels - 1 {
        hi
    } else {
        lo + (hi - lo) * (k as f64 / (levels - 1) as f64)
    }
}

/// Rounds `x ∈ [lo, hi]` to one of its two neighbouring grid levels, upward
/// with probability proportional to its distance from the lower one, so the
/// expected result is `x`. Values already on a level come back unchanged.
pub fn stochastic_round(x: f64, lo: f64, hi: f64, levels: u64, rng: &mut impl Rng) -> f64 {
    debug_assert!(levels >= 2 && lo < hi);
    let top = levels - 1;
    let pos = ((x - lo) / (hi - lo) * top as f64).clamp(0.0, top as f64);
    let mut k = (pos.floor() as u64).min(top - 1);
    // Repair floating-point drift in `pos` so that level(k) <= x < level(k+1).
    while k > 0 && x < level(lo, hi, levels, k) {
        k -= 1;
    }
    while k + 1 < top && x >= level(lo, hi, levels, k + 1) {
        k += 1;
    }
    let (a, b) = (level(lo, hi, levels, k), level(lo, hi, levels, k + 1));
    if x <= a {
        return a;
    }
    if x >= b {
        return b;
    }
    let frac = (x - a) / (b - a);
    if rng.random::<f64>() < frac { b } else { a }
}

/// Stochastic uniform quantization applied independently to each tensor of
/// `delta`, where `layout` lists the tensor sizes in flattening order.
///
/// Returns the dequantized vector and the simulated upload size: packed
/// level indices plus two `f64` range endpoints per tensor, or raw `f64`s
/// when quantization is disabled.
pub fn quantize_update(delta: &[f64], layout: &[usize], q: &QuantConfig, rng: &mut impl Rng) -> (Vec<f64>, u64) {
    assert_eq!(layout.iter().sum::<usize>(), delta.len(), "layout must cover delta");
    if !q.enabled {
        return (delta.to_vec(), 8 * delta.len() as u64);
    }
    let levels = 1u64 << q.bits;
    let mut out = Vec::with_capacity(delta.len());
    let mut bytes = 0u64;
    let mut offset = 0;
    for &n in layout {
        let seg = &delta[offset..offset + n];
        offset += n;
        bytes += (n as u64 * q.bits as u64).div_ceil(8) + 16;
        let lo = seg.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if n == 0 || lo == hi {
            out.extend_from_slice(seg);
            continue;
        }
        out.extend(seg.iter().map(|x| stochastic_round(*x, lo, hi, levels, rng)));
    }
    (out, bytes)
}
