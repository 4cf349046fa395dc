//! Coupled input-forget gate (CIFG) recurrent cell.
//!
//! ```text
//! f_t = gate(W_f x_t + U_f h_{t-1} + b_f)
//! i_t = 1 - f_t
//! o_t = gate(W_o x_t + U_o h_{t-1} + b_o)
//! c_t = f_t ⊙ c_{t-1} + i_t ⊙ cell(W_c x_t + U_c h_{t-1} + b_c)
//! h_t = o_t ⊙ cell(c_t)
//! ```
//!
//! `gate`/`cell` are sigmoid/tanh for the standard variant and SI-σ/SI-tanh
//! for the scale-invariant one. There are no input-gate parameters.

use rand::Rng;

use super::{param_struct, ModelError, ModelVariant};
use crate::activations::activation_graph;
use crate::autodiff::{Graph, Tensor, TensorError, Var};

param_struct! {
    /// `w_*` are `hidden × input`, `u_*` are `hidden × hidden`, `b_*` have length `hidden`.
    CifgParams { w_f, w_o, w_c, u_f, u_o, u_c, b_f, b_o, b_c }
}

impl CifgParams<Vec<usize>> {
    pub fn shapes(input_dim: usize, hidden: usize) -> Self {
        let w = vec![hidden, input_dim];
        let u = vec![hidden, hidden];
        let b = vec![hidden];
        CifgParams {
            w_f: w.clone(),
            w_o: w.clone(),
            w_c: w,
            u_f: u.clone(),
            u_o: u.clone(),
            u_c: u,
            b_f: b.clone(),
            b_o: b.clone(),
            b_c: b,
        }
    }
}

impl CifgParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        CifgParams::shapes(input_dim, hidden)
            .try_map::<_, ()>("", &mut |_, s| Ok(Tensor::zeros(s)))
            .expect("infallible")
    }

    /// Entries drawn uniformly from `[-scale, scale]`, biases included.
    pub fn random(input_dim: usize, hidden: usize, scale: f64, rng: &mut impl Rng) -> Self {
        CifgParams::shapes(input_dim, hidden)
            .try_map::<_, ()>("", &mut |_, s| {
                let n = s.iter().product();
                Ok(Tensor::new(s.clone(), (0..n).map(|_| rng.random_range(-scale..=scale)).collect()).expect("shape"))
            })
            .expect("infallible")
    }

    pub fn input_dim(&self) -> usize {
        self.w_f.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_f.shape()[0]
    }
}

fn pre_activation(g: &mut Graph, w: Var, u: Var, b: Var, x: Var, h: Var) -> Result<Var, TensorError> {
    let batch = g.shape(x)[1];
    let wx = g.matmul(w, x)?;
    let uh = g.matmul(u, h)?;
    let s = g.add(wx, uh)?;
    let bb = g.broadcast(b, 1, batch)?;
    g.add(s, bb)
}

/// Intermediate nodes of one recorded step.
#[derive(Clone, Copy, Debug)]
pub struct CifgStepVars {
    pub forget: Var,
    pub input: Var,
    pub output: Var,
    pub cell: Var,
    pub hidden: Var,
}

/// Records one step for a batch. `x` is `input × batch`, `h` and `c` are
/// `hidden × batch`; the scale-invariant activations normalize per column.
pub fn cifg_step_graph(
    g: &mut Graph,
    p: &CifgParams<Var>,
    x: Var,
    h: Var,
    c: Var,
    variant: ModelVariant,
    eps: f64,
) -> Result<CifgStepVars, TensorError> {
    let gate = variant.gate_activation();
    let cell_act = variant.cell_activation();

    let pf = pre_activation(g, p.w_f, p.u_f, p.b_f, x, h)?;
    let forget = activation_graph(g, gate, pf, eps)?;
    let input = g.affine(forget, -1.0, 1.0)?;
    let po = pre_activation(g, p.w_o, p.u_o, p.b_o, x, h)?;
    let output = activation_graph(g, gate, po, eps)?;
    let pc = pre_activation(g, p.w_c, p.u_c, p.b_c, x, h)?;
    let candidate = activation_graph(g, cell_act, pc, eps)?;

    let keep = g.mul(forget, c)?;
    let write = g.mul(input, candidate)?;
    let cell = g.add(keep, write)?;
    let squashed = activation_graph(g, cell_act, cell, eps)?;
    let hidden = g.mul(output, squashed)?;
    Ok(CifgStepVars { forget, input, output, cell, hidden })
}

/// Result of [`cifg_step`], with the gate values exposed for inspection.
#[derive(Clone, Debug)]
pub struct CifgStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub forget: Vec<f64>,
    pub input: Vec<f64>,
    pub output: Vec<f64>,
}

/// One CIFG step on single vectors.
pub fn cifg_step(
    p: &CifgParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    variant: ModelVariant,
    eps: f64,
) -> Result<CifgStep, ModelError> {
    if !variant.is_cifg() {
        return Err(ModelError::WrongFamily { expected: "CIFG", got: variant });
    }
    let mut g = Graph::new();
    let pv = p.try_map("", &mut |name, t| g.input(name, t.clone()))?;
    let col = |v: &[f64]| Tensor::matrix(v.len(), 1, v.to_vec());
    let x = g.input("x", col(x)?)?;
    let h = g.input("h", col(h_prev)?)?;
    let c = g.input("c", col(c_prev)?)?;
    let s = cifg_step_graph(&mut g, &pv, x, h, c, variant, eps)?;
    let data = |v: Var| g.value(v).data().to_vec();
    Ok(CifgStep {
        h: data(s.hidden),
        c: data(s.cell),
        forget: data(s.forget),
        input: data(s.input),
        output: data(s.output),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::DEFAULT_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_weights_standard_step() {
        let p = CifgParams::zeros(3, 4);
        let c = vec![0.4, -1.0, 2.0, 0.0];
        let s = cifg_step(&p, &[1.0, 2.0, 3.0], &[0.0; 4], &c, ModelVariant::CifgStandard, DEFAULT_EPS).unwrap();
        assert_eq!(s.forget, vec![0.5; 4]);
        assert_eq!(s.input, vec![0.5; 4]);
        assert_eq!(s.output, vec![0.5; 4]);
        for k in 0..4 {
            assert_eq!(s.c[k], 0.5 * c[k]);
            assert!((s.h[k] - 0.5 * (0.5 * c[k]).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_are_coupled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in [ModelVariant::CifgStandard, ModelVariant::CifgScaleInvariant] {
            for _ in 0..50 {
                let p = CifgParams::random(5, 6, 1.0, &mut rng);
                let x = random_vec(&mut rng, 5);
                let h = random_vec(&mut rng, 6);
                let c = random_vec(&mut rng, 6);
                let s = cifg_step(&p, &x, &h, &c, variant, DEFAULT_EPS).unwrap();
                for (f, i) in s.forget.iter().zip(&s.input) {
                    assert_eq!(f + i, 1.0);
                }
            }
        }
    }

    #[test]
    fn si_forget_triple_scaling_is_invisible() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = CifgParams::random(4, 8, 1.0, &mut rng);
        let x = random_vec(&mut rng, 4);
        let h = random_vec(&mut rng, 8);
        let c = random_vec(&mut rng, 8);
        let mut scaled = p.clone();
        scaled.w_f = p.w_f.scaled(7.0);
        scaled.u_f = p.u_f.scaled(7.0);
        scaled.b_f = p.b_f.scaled(7.0);
        let v = ModelVariant::CifgScaleInvariant;
        let a = cifg_step(&p, &x, &h, &c, v, DEFAULT_EPS).unwrap();
        let b = cifg_step(&scaled, &x, &h, &c, v, DEFAULT_EPS).unwrap();
        for k in 0..8 {
            assert!((a.h[k] - b.h[k]).abs() < 1e-10);
            assert!((a.c[k] - b.c[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn standard_forget_triple_scaling_is_visible() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = CifgParams::random(4, 8, 1.0, &mut rng);
        let x = random_vec(&mut rng, 4);
        let h = random_vec(&mut rng, 8);
        let c = random_vec(&mut rng, 8);
        let mut scaled = p.clone();
        scaled.w_f = p.w_f.scaled(2.0);
        scaled.u_f = p.u_f.scaled(2.0);
        scaled.b_f = p.b_f.scaled(2.0);
        let v = ModelVariant::CifgStandard;
        let a = cifg_step(&p, &x, &h, &c, v, DEFAULT_EPS).unwrap();
        let b = cifg_step(&scaled, &x, &h, &c, v, DEFAULT_EPS).unwrap();
        let diff = a.h.iter().zip(&b.h).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);
    }

    #[test]
    fn rejects_transformer_variant_and_bad_shapes() {
        let p = CifgParams::zeros(2, 3);
        assert!(matches!(
            cifg_step(&p, &[0.0; 2], &[0.0; 3], &[0.0; 3], ModelVariant::TransformerStandard, DEFAULT_EPS),
            Err(ModelError::WrongFamily { .. })
        ));
        assert!(matches!(
            cifg_step(&p, &[0.0; 5], &[0.0; 3], &[0.0; 3], ModelVariant::CifgStandard, DEFAULT_EPS),
            Err(ModelError::Tensor(TensorError::ShapeMismatch { op: "matmul", .. }))
        ));
    }
}
