//! Tape-recorded computation graph with reverse-mode differentiation.
//!
//! Every primitive is evaluated eagerly when it is recorded, so building a
//! graph is also its first forward pass. [`evaluate`] replays the same
//! primitives against a new binding of the named inputs; because recording
//! and replay share one kernel per primitive, replaying unchanged inputs is
//! bit-identical to the recorded values.

use super::{GradMap, ParamTree, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Affine { x: Var, scale: f64, shift: f64 },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Sqrt(Var),
    ClampMin { x: Var, floor: f64 },
    MaxAxis { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Broadcast { x: Var, axis: usize, n: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize, end: usize },
    GatherRows { x: Var, ids: Vec<usize> },
    SoftmaxRows { x: Var, causal: bool },
    SoftmaxXent { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Abs(_) => "abs",
            Op::Sqrt(_) => "sqrt",
            Op::ClampMin { .. } => "clamp_min",
            Op::MaxAxis { .. } => "max_axis",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(_) => "sum_all",
            Op::Broadcast { .. } => "broadcast",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::SoftmaxXent { .. } => "softmax_xent",
        }
    }
}

/// Recorded sequence of primitives. Nodes are appended in evaluation
/// order, so the tape is always topologically sorted.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    outputs: Vec<(String, Var)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Shape of a recorded node.
    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn push(&mut self, op: Op) -> Result<Var, TensorError> {
        let value = forward(&op, &self.values)?;
        self.ops.push(op);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    /// Registers a named free variable bound to `value`.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var, TensorError> {
        let name = name.into();
        if self.input_var(&name).is_some() {
            return Err(TensorError::InvalidArgument {
                op: "input",
                detail: format!("input {name:?} registered twice"),
            });
        }
        check_finite("input", &value)?;
        self.ops.push(Op::Input(name));
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    /// Registers every tensor of `tree` as a named input, in tree order.
    pub fn inputs_from(&mut self, tree: &ParamTree) -> Result<Vec<Var>, TensorError> {
        tree.iter().map(|(n, t)| self.input(n, t.clone())).collect()
    }

    /// A fixed value that is not a free variable and receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var, TensorError> {
        check_finite("const", &value)?;
        self.ops.push(Op::Const);
        self.values.push(value);
        Ok(Var(self.ops.len() - 1))
    }

    pub fn input_var(&self, name: &str) -> Option<Var> {
        self.ops.iter().position(|op| matches!(op, Op::Input(n) if n == name)).map(Var)
    }

    /// Names and current values of every free variable.
    pub fn recorded_inputs(&self) -> ParamTree {
        self.ops
            .iter()
            .zip(&self.values)
            .filter_map(|(op, v)| match op {
                Op::Input(n) => Some((n.clone(), v.clone())),
                _ => None,
            })
            .collect()
    }

    /// Names a node so [`evaluate`] and [`gradient`] can refer to it.
    pub fn set_output(&mut self, name: impl Into<String>, v: Var) {
        let name = name.into();
        self.outputs.retain(|(n, _)| *n != name);
        self.outputs.push((name, v));
    }

    pub fn output_var(&self, name: &str) -> Option<Var> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.push(Op::Div(a, b))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var, TensorError> {
        self.push(Op::Affine { x, scale, shift })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var, TensorError> {
        self.affine(x, factor, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Abs(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::Sqrt(x))
    }

    /// Elementwise `max(x, floor)`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, TensorError> {
        self.push(Op::ClampMin { x, floor })
    }

    /// Maximum along `axis`, removing it. Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.push(Op::MaxAxis { x, axis })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.push(Op::SumAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        self.push(Op::SumAll(x))
    }

    /// Inserts a new axis of extent `n` at position `axis`, repeating values along it.
    pub fn broadcast(&mut self, x: Var, axis: usize, n: usize) -> Result<Var, TensorError> {
        self.push(Op::Broadcast { x, axis, n })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        self.push(Op::Concat { xs: xs.to_vec(), axis })
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        self.push(Op::Slice { x, axis, start, end })
    }

    /// Row lookup of a matrix, e.g. embedding rows for token ids.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var, TensorError> {
        self.push(Op::GatherRows { x, ids: ids.to_vec() })
    }

    /// Row-wise softmax. With `causal`, entry (i, j) for j > i is excluded
    /// and set to zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var, TensorError> {
        self.push(Op::SoftmaxRows { x, causal })
    }

    /// Scalar `sum_i weights[i] * -log softmax(logits[i])[targets[i]]`.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        self.push(Op::SoftmaxXent { logits, targets: targets.to_vec(), weights: weights.to_vec() })
    }

    /// Reverse accumulation from the scalar node `out`. The returned vector is
    /// indexed by node; nodes that do not influence `out` get `None`.
    pub fn backward(&self, out: Var) -> Result<Vec<Option<Tensor>>, TensorError> {
        backprop(&self.ops, &self.values, out)
    }

    /// Gradient of scalar node `out` with respect to each listed node, zero-filled
    /// when a node does not influence `out`.
    pub fn grads_of(&self, out: Var, wrt: &[Var]) -> Result<Vec<Tensor>, TensorError> {
        let mut grads = self.backward(out)?;
        Ok(wrt
            .iter()
            .map(|v| grads[v.0].take().unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape())))
            .collect())
    }
}

/// Replays `graph` with its free variables bound from `inputs` and returns
/// every named output.
pub fn evaluate(graph: &Graph, inputs: &ParamTree) -> Result<ParamTree, TensorError> {
    let values = replay(graph, inputs)?;
    Ok(graph
        .outputs
        .iter()
        .map(|(n, v)| (n.clone(), values[v.0].clone()))
        .collect())
}

/// Gradient of the named scalar output with respect to every tensor in
/// `params`, evaluated at those parameter values. Other free variables keep
/// their recorded values.
pub fn gradient(graph: &Graph, scalar_output: &str, params: &ParamTree) -> Result<GradMap, TensorError> {
    let out = graph
        .output_var(scalar_output)
        .ok_or_else(|| TensorError::UnknownName(scalar_output.to_string()))?;
    let mut binding = graph.recorded_inputs();
    let mut wrt = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        let v = graph.input_var(name).ok_or_else(|| TensorError::UnknownName(name.to_string()))?;
        binding.insert(name, t.clone());
        wrt.push((name, v));
    }
    let values = replay(graph, &binding)?;
    let mut grads = backprop(&graph.ops, &values, out)?;
    Ok(wrt
        .into_iter()
        .map(|(name, v)| {
            let g = grads[v.0].take().unwrap_or_else(|| Tensor::zeros(values[v.0].shape()));
            (name.to_string(), g)
        })
        .collect())
}

fn replay(graph: &Graph, inputs: &ParamTree) -> Result<Vec<Tensor>, TensorError> {
    let mut values: Vec<Tensor> = Vec::with_capacity(graph.ops.len());
    for (op, recorded) in graph.ops.iter().zip(&graph.values) {
        let v = match op {
            Op::Input(name) => {
                let t = inputs.get(name).ok_or_else(|| TensorError::UnboundInput(name.clone()))?;
                check_finite("input", t)?;
                t.clone()
            }
            Op::Const => recorded.clone(),
            _ => forward(op, &values)?,
        };
        values.push(v);
    }
    Ok(values)
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<(), TensorError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), TensorError> {
    t.dims2().ok_or_else(|| shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())))
}

/// (outer, extent, inner) split of `shape` around `axis`.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn zip_same(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect()).expect("same shape")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximum of `values` taken with the given stride.
fn first_argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut idx = 0;
    for (k, v) in values.enumerate() {
        if k == 0 || v > best {
            best = v;
            idx = k;
        }
    }
    idx
}

fn forward(op: &Op, vals: &[Tensor]) -> Result<Tensor, TensorError> {
    let name = op.name();
    let out = match op {
        Op::Input(_) | Op::Const => unreachable!("leaves are never recomputed"),
        Op::MatMul(a, b) => {
            let (a, b) = (&vals[a.0], &vals[b.0]);
            let (m, k) = mat_dims(name, a)?;
            let (k2, n) = mat_dims(name, b)?;
            if k != k2 {
                return Err(shape_err(name, format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?
        }
        Op::Transpose(x) => {
            let x = &vals[x.0];
            let (r, c) = mat_dims(name, x)?;
            Tensor::new(vec![c, r], transpose_raw(x.data(), r, c))?
        }
        Op::Add(a, b) => zip_same(name, &vals[a.0], &vals[b.0], |x, y| x + y)?,
        Op::Sub(a, b) => zip_same(name, &vals[a.0], &vals[b.0], |x, y| x - y)?,
        Op::Mul(a, b) => zip_same(name, &vals[a.0], &vals[b.0], |x, y| x * y)?,
        Op::Div(a, b) => zip_same(name, &vals[a.0], &vals[b.0], |x, y| x / y)?,
        Op::Affine { x, scale, shift } => map(&vals[x.0], |v| scale * v + shift),
        Op::Relu(x) => map(&vals[x.0], |v| if v > 0.0 { v } else { 0.0 }),
        Op::Sigmoid(x) => map(&vals[x.0], sigmoid),
        Op::Tanh(x) => map(&vals[x.0], f64::tanh),
        Op::Exp(x) => map(&vals[x.0], f64::exp),
        Op::Abs(x) => map(&vals[x.0], f64::abs),
        Op::Sqrt(x) => {
            let x = &vals[x.0];
            if x.data().iter().any(|v| *v < 0.0) {
                return Err(TensorError::InvalidArgument { op: name, detail: "negative operand".into() });
            }
            map(x, f64::sqrt)
        }
        Op::ClampMin { x, floor } => map(&vals[x.0], |v| v.max(*floor)),
        Op::MaxAxis { x, axis } | Op::SumAxis { x, axis } => {
            let x = &vals[x.0];
            let (outer, len, inner) = split_axis(name, x.shape(), *axis)?;
            if len == 0 {
                return Err(shape_err(name, "reduction over an empty axis".into()));
            }
            let d = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let it = (0..len).map(|k| d[(o * len + k) * inner + i]);
                    out[o * inner + i] = match op {
                        Op::MaxAxis { .. } => it.fold(f64::NEG_INFINITY, f64::max),
                        _ => it.sum(),
                    };
                }
            }
            Tensor::new(removed_axis(x.shape(), *axis), out)?
        }
        Op::SumAll(x) => Tensor::scalar(vals[x.0].data().iter().sum()),
        Op::Broadcast { x, axis, n } => {
            let x = &vals[x.0];
            if *axis > x.rank() {
                return Err(shape_err(name, format!("axis {axis} out of range for shape {:?}", x.shape())));
            }
            let outer: usize = x.shape()[..*axis].iter().product();
            let inner: usize = x.shape()[*axis..].iter().product();
            let d = x.data();
            let mut out = Vec::with_capacity(outer * n * inner);
            for o in 0..outer {
                for _ in 0..*n {
                    out.extend_from_slice(&d[o * inner..(o + 1) * inner]);
                }
            }
            let mut shape = x.shape().to_vec();
            shape.insert(*axis, *n);
            Tensor::new(shape, out)?
        }
        Op::Concat { xs, axis } => {
            let first = xs.first().ok_or_else(|| shape_err(name, "no operands".into()))?;
            let base = vals[first.0].shape().to_vec();
            let (outer, _, inner) = split_axis(name, &base, *axis)?;
            let mut total = 0;
            for v in xs {
                let s = vals[v.0].shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(k, (a, b))| k != *axis && a != b)
                {
                    return Err(shape_err(name, format!("{:?} vs {:?} along axis {axis}", s, base)));
                }
                total += s[*axis];
            }
            let mut out = vec![0.0; outer * total * inner];
            let mut offset = 0;
            for v in xs {
                let t = &vals[v.0];
                let len = t.shape()[*axis];
                for o in 0..outer {
                    let src = &t.data()[o * len * inner..(o + 1) * len * inner];
                    let dst = (o * total + offset) * inner;
                    out[dst..dst + len * inner].copy_from_slice(src);
                }
                offset += len;
            }
            let mut shape = base;
            shape[*axis] = total;
            Tensor::new(shape, out)?
        }
        Op::Slice { x, axis, start, end } => {
            let x = &vals[x.0];
            let (outer, len, inner) = split_axis(name, x.shape(), *axis)?;
            if start > end || *end > len {
                return Err(shape_err(name, format!("range {start}..{end} exceeds extent {len}")));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(outer * w * inner);
            for o in 0..outer {
                let s = (o * len + start) * inner;
                out.extend_from_slice(&x.data()[s..s + w * inner]);
            }
            let mut shape = x.shape().to_vec();
            shape[*axis] = w;
            Tensor::new(shape, out)?
        }
        Op::GatherRows { x, ids } => {
            let x = &vals[x.0];
            let (rows, cols) = mat_dims(name, x)?;
            let mut out = Vec::with_capacity(ids.len() * cols);
            for &id in ids {
                if id >= rows {
                    return Err(TensorError::IndexOutOfRange { op: name, index: id, bound: rows });
                }
                out.extend_from_slice(x.row(id));
            }
            Tensor::new(vec![ids.len(), cols], out)?
        }
        Op::SoftmaxRows { x, causal } => {
            let x = &vals[x.0];
            let (r, c) = mat_dims(name, x)?;
            if *causal && r != c {
                return Err(shape_err(name, format!("causal mask needs a square matrix, got {r}x{c}")));
            }
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let visible = if *causal { i + 1 } else { c };
                let row = &x.data()[i * c..i * c + visible];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (j, v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    out[i * c + j] = e;
                    z += e;
                }
                for o in &mut out[i * c..i * c + visible] {
                    *o /= z;
                }
            }
            Tensor::new(vec![r, c], out)?
        }
        Op::SoftmaxXent { logits, targets, weights } => {
            let x = &vals[logits.0];
            let (r, c) = mat_dims(name, x)?;
            if targets.len() != r || weights.len() != r {
                return Err(shape_err(
                    name,
                    format!("{r} rows but {} targets and {} weights", targets.len(), weights.len()),
                ));
            }
            let mut total = 0.0;
            for i in 0..r {
                if weights[i] == 0.0 {
                    continue;
                }
                if targets[i] >= c {
                    return Err(TensorError::IndexOutOfRange { op: name, index: targets[i], bound: c });
                }
                let row = x.row(i);
                total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
            }
            Tensor::scalar(total)
        }
    };
    check_finite(name, &out)?;
    Ok(out)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn with_data(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("gradient shape")
}

fn backprop(ops: &[Op], vals: &[Tensor], out: Var) -> Result<Vec<Option<Tensor>>, TensorError> {
    if !vals[out.0].shape().is_empty() {
        return Err(TensorError::NotScalar { shape: vals[out.0].shape().to_vec() });
    }
    let mut grads: Vec<Option<Tensor>> = vec![None; out.0 + 1];
    grads[out.0] = Some(Tensor::scalar(1.0));

    for idx in (0..=out.0).rev() {
        let Some(gy) = grads[idx].clone() else { continue };
        let y = &vals[idx];
        let dy = gy.data();
        match &ops[idx] {
            Op::Input(_) | Op::Const => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let (m, k) = ta.dims2().expect("matrix");
                let n = tb.shape()[1];
                let bt = transpose_raw(tb.data(), k, n);
                let ga = matmul_raw(dy, &bt, m, n, k);
                let at = transpose_raw(ta.data(), m, k);
                let gb = matmul_raw(&at, dy, k, m, n);
                accumulate(&mut grads, *a, with_data(ta.shape(), ga));
                accumulate(&mut grads, *b, with_data(tb.shape(), gb));
            }
            Op::Transpose(x) => {
                let (r, c) = y.dims2().expect("matrix");
                accumulate(&mut grads, *x, with_data(vals[x.0].shape(), transpose_raw(dy, r, c)));
            }
            Op::Add(a, b) => {
                accumulate(&mut grads, *a, gy.clone());
                accumulate(&mut grads, *b, gy);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, *a, gy.clone());
                accumulate(&mut grads, *b, gy.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let ga = dy.iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                let gb = dy.iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                accumulate(&mut grads, *a, with_data(ta.shape(), ga));
                accumulate(&mut grads, *b, with_data(tb.shape(), gb));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (&vals[a.0], &vals[b.0]);
                let ga = dy.iter().zip(tb.data()).map(|(g, v)| g / v).collect();
                let gb = dy
                    .iter()
                    .zip(ta.data().iter().zip(tb.data()))
                    .map(|(g, (n, d))| -g * n / (d * d))
                    .collect();
                accumulate(&mut grads, *a, with_data(ta.shape(), ga));
                accumulate(&mut grads, *b, with_data(tb.shape(), gb));
            }
            Op::Affine { x, scale, .. } => accumulate(&mut grads, *x, gy.scaled(*scale)),
            Op::Relu(x) => {
                let g = dy.iter().zip(vals[x.0].data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 });
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::Sigmoid(x) => {
                let g = dy.iter().zip(y.data()).map(|(g, s)| g * s * (1.0 - s));
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::Tanh(x) => {
                let g = dy.iter().zip(y.data()).map(|(g, t)| g * (1.0 - t * t));
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::Exp(x) => {
                let g = dy.iter().zip(y.data()).map(|(g, e)| g * e);
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::Abs(x) => {
                let g = dy.iter().zip(vals[x.0].data()).map(|(g, v)| {
                    if *v > 0.0 {
                        *g
                    } else if *v < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::Sqrt(x) => {
                let g = dy.iter().zip(y.data()).map(|(g, s)| if *s > 0.0 { g / (2.0 * s) } else { 0.0 });
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::ClampMin { x, floor } => {
                let g = dy.iter().zip(vals[x.0].data()).map(|(g, v)| if v > floor { *g } else { 0.0 });
                accumulate(&mut grads, *x, with_data(y.shape(), g.collect()));
            }
            Op::MaxAxis { x, axis } => {
                let tx = &vals[x.0];
                let (outer, len, inner) = split_axis("max_axis", tx.shape(), *axis)?;
                let d = tx.data();
                let mut g = vec![0.0; d.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = first_argmax((0..len).map(|k| d[(o * len + k) * inner + i]));
                        g[(o * len + k) * inner + i] += dy[o * inner + i];
                    }
                }
                accumulate(&mut grads, *x, with_data(tx.shape(), g));
            }
            Op::SumAxis { x, axis } => {
                let tx = &vals[x.0];
                let (outer, len, inner) = split_axis("sum_axis", tx.shape(), *axis)?;
                let mut g = vec![0.0; tx.len()];
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            g[(o * len + k) * inner + i] = dy[o * inner + i];
                        }
                    }
                }
                accumulate(&mut grads, *x, with_data(tx.shape(), g));
            }
            Op::SumAll(x) => {
                let tx = &vals[x.0];
                accumulate(&mut grads, *x, Tensor::full(tx.shape(), dy[0]));
            }
            Op::Broadcast { x, axis, n } => {
                let tx = &vals[x.0];
                let outer: usize = tx.shape()[..*axis].iter().product();
                let inner: usize = tx.shape()[*axis..].iter().product();
                let mut g = vec![0.0; tx.len()];
                for o in 0..outer {
                    for k in 0..*n {
                        for i in 0..inner {
                            g[o * inner + i] += dy[(o * n + k) * inner + i];
                        }
                    }
                }
                accumulate(&mut grads, *x, with_data(tx.shape(), g));
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis("concat", y.shape(), *axis)?;
                let mut offset = 0;
                for v in xs {
                    let t = &vals[v.0];
                    let len = t.shape()[*axis];
                    let mut g = Vec::with_capacity(t.len());
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        g.extend_from_slice(&dy[s..s + len * inner]);
                    }
                    accumulate(&mut grads, *v, with_data(t.shape(), g));
                    offset += len;
                }
            }
            Op::Slice { x, axis, start, end } => {
                let tx = &vals[x.0];
                let (outer, len, inner) = split_axis("slice", tx.shape(), *axis)?;
                let w = end - start;
                let mut g = vec![0.0; tx.len()];
                for o in 0..outer {
                    let s = (o * len + start) * inner;
                    g[s..s + w * inner].copy_from_slice(&dy[o * w * inner..(o + 1) * w * inner]);
                }
                accumulate(&mut grads, *x, with_data(tx.shape(), g));
            }
            Op::GatherRows { x, ids } => {
                let tx = &vals[x.0];
                let (_, cols) = tx.dims2().expect("matrix");
                let mut g = vec![0.0; tx.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        g[id * cols + c] += dy[r * cols + c];
                    }
                }
                accumulate(&mut grads, *x, with_data(tx.shape(), g));
            }
            Op::SoftmaxRows { x, .. } => {
                let (r, c) = y.dims2().expect("matrix");
                let p = y.data();
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    let row = i * c..(i + 1) * c;
                    let dot: f64 = dy[row.clone()].iter().zip(&p[row.clone()]).map(|(a, b)| a * b).sum();
                    for j in row {
                        g[j] = p[j] * (dy[j] - dot);
                    }
                }
                accumulate(&mut grads, *x, with_data(y.shape(), g));
            }
            Op::SoftmaxXent { logits, targets, weights } => {
                let tx = &vals[logits.0];
                let (r, c) = tx.dims2().expect("matrix");
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    if weights[i] == 0.0 {
                        continue;
                    }
                    let row = tx.row(i);
                    let lse = log_sum_exp(row);
                    let scale = dy[0] * weights[i];
                    for j in 0..c {
                        g[i * c + j] = scale * (row[j] - lse).exp();
                    }
                    g[i * c + targets[i]] -= scale;
                }
                accumulate(&mut grads, *logits, with_data(tx.shape(), g));
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn named(pairs: &[(&str, Tensor)]) -> ParamTree {
        pairs.iter().map(|(n, t)| (n.to_string(), t.clone())).collect()
    }

    #[test]
    fn evaluate_doubling() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0, 0.0])).unwrap();
        let y = g.add(x, x).unwrap();
        g.set_output("y", y);
        let out = evaluate(&g, &named(&[("x", Tensor::vector(vec![1.0, 2.0]))])).unwrap();
        assert_eq!(out.get("y").unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn evaluate_identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2)).unwrap();
        let x = g.input("x", Tensor::zeros(&[2, 1])).unwrap();
        let y = g.matmul(i, x).unwrap();
        g.set_output("y", y);
        let out = evaluate(&g, &named(&[("x", Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap())])).unwrap();
        assert_eq!(out.get("y").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn evaluate_relu() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::new();
        let a = g.input("a", Tensor::zeros(&[2, 3])).unwrap();
        let b = g.input("b", Tensor::zeros(&[2, 3])).unwrap();
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, .. }) => assert_eq!(op, "matmul"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0])).unwrap();
        let z = g.input("z", Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(g.div(x, z), Err(TensorError::NonFinite { op: "div" })));
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![800.0])).unwrap();
        assert!(matches!(g.exp(x), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::scalar(1.0)).unwrap();
        g.set_output("x", x);
        assert!(matches!(evaluate(&g, &ParamTree::new()), Err(TensorError::UnboundInput(_))));
    }

    #[test]
    fn gradient_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.0; 3])).unwrap();
        let sq = g.mul(x, x).unwrap();
        let y = g.sum_all(sq).unwrap();
        g.set_output("y", y);
        let grads = gradient(&g, "y", &named(&[("x", Tensor::vector(vec![1.0, 2.0, 3.0]))])).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn relu_subgradient_is_zero_at_kink() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![-1.0, 2.0, 0.0])).unwrap();
        let r = g.relu(x).unwrap();
        let y = g.sum_all(r).unwrap();
        let grads = g.grads_of(y, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 3.0, 3.0])).unwrap();
        let m = g.max_axis(x, 0).unwrap();
        let grads = g.grads_of(m, &[x]).unwrap();
        assert_eq!(grads[0].data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn gradient_rejects_non_scalar_output() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        g.set_output("x2", x);
        let params = g.recorded_inputs();
        assert!(matches!(gradient(&g, "x2", &params), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn unused_params_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let _w = g.input("w", Tensor::zeros(&[2, 2])).unwrap();
        let y = g.sum_all(x).unwrap();
        g.set_output("y", y);
        let grads = gradient(&g, "y", &g.recorded_inputs()).unwrap();
        assert_eq!(grads.get("w").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get("x").unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::zeros(&[3, 3])).unwrap();
        let p = g.softmax_rows(x, true).unwrap();
        let v = g.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(v.row(1), &[0.5, 0.5, 0.0]);
    }

    #[test]
    fn broadcast_concat_slice_shapes() {
        let mut g = Graph::new();
        let v = g.input("v", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let cols = g.broadcast(v, 1, 3).unwrap();
        assert_eq!(g.shape(cols), &[2, 3]);
        assert_eq!(g.value(cols).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let rows = g.broadcast(v, 0, 2).unwrap();
        assert_eq!(g.value(rows).data(), &[1.0, 2.0, 1.0, 2.0]);
        let cat = g.concat(&[cols, cols], 1).unwrap();
        assert_eq!(g.shape(cat), &[2, 6]);
        let s = g.slice(cat, 1, 2, 4).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut g = Graph::new();
        let x = g.input("x", Tensor::vector(vec![0.3, -1.7, 2.2])).unwrap();
        let s = g.sigmoid(x).unwrap();
        let t = g.tanh(s).unwrap();
        let e = g.exp(t).unwrap();
        let y = g.sum_all(e).unwrap();
        g.set_output("y", y);
        let a = evaluate(&g, &g.recorded_inputs()).unwrap();
        assert_eq!(a.get("y").unwrap().item().to_bits(), g.value(y).item().to_bits());
    }
}
