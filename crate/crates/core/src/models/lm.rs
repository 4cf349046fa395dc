//! Tied-embedding next-token language models.
//!
//! The output logits reuse the input embedding: `logits = (E · body_out)ᵀ`,
//! so no separate output matrix is stored. The CIFG body projects its hidden
//! state back to the embedding width first; the transformer body adds learned
//! absolute position embeddings and ends with a final layer norm.

use rand::Rng;

use super::attention::{init_leaf, layer_norm_graph, transformer_block_graph, AttnParams};
use super::cifg::{cifg_step_graph, CifgParams};
use super::metrics::{count_tokens, MetricMode, TokenCounts};
use super::{ModelConfig, ModelError};
use crate::autodiff::{GradMap, Graph, ParamTree, Tensor, TensorError, Var};
use crate::data::PAD;

#[derive(Clone, Debug, PartialEq)]
pub enum LmBody<T = Tensor> {
    Cifg {
        cell: CifgParams<T>,
        /// `embed × hidden`
        projection: T,
    },
    Transformer {
        /// `max_positions × embed`
        positions: T,
        blocks: Vec<AttnParams<T>>,
        final_gain: T,
        final_bias: T,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams<T = Tensor> {
    /// `vocab × embed`, shared by the input lookup and the output layer.
    pub embedding: T,
    pub body: LmBody<T>,
}

impl<T> LmParams<T> {
    /// Maps every leaf in canonical order, passing its parameter name.
    pub fn try_map<U, E>(&self, f: &mut impl FnMut(&str, &T) -> Result<U, E>) -> Result<LmParams<U>, E> {
        let embedding = f("embedding", &self.embedding)?;
        let body = match &self.body {
            LmBody::Cifg { cell, projection } => LmBody::Cifg {
                cell: cell.try_map("cifg.", f)?,
                projection: f("cifg.projection", projection)?,
            },
            LmBody::Transformer { positions, blocks, final_gain, final_bias } => LmBody::Transformer {
                positions: f("transformer.positions", positions)?,
                blocks: blocks
                    .iter()
                    .enumerate()
                    .map(|(i, b)| b.try_map(&format!("transformer.block{i}."), f))
                    .collect::<Result<_, _>>()?,
                final_gain: f("transformer.final_ln_gain", final_gain)?,
                final_bias: f("transformer.final_ln_bias", final_bias)?,
            },
        };
        Ok(LmParams { embedding, body })
    }
}

impl LmParams<Vec<usize>> {
    pub fn shapes(cfg: &ModelConfig) -> Self {
        let e = cfg.embed_dim;
        let body = if cfg.variant.is_cifg() {
            LmBody::Cifg {
                cell: CifgParams::shapes(e, cfg.hidden_dim),
                projection: vec![e, cfg.hidden_dim],
            }
        } else {
            LmBody::Transformer {
                positions: vec![cfg.max_positions, e],
                blocks: (0..cfg.layers).map(|_| AttnParams::shapes(e, cfg.ffn_dim)).collect(),
                final_gain: vec![e],
                final_bias: vec![e],
            }
        };
        LmParams { embedding: vec![cfg.vocab_size, e], body }
    }
}

impl LmParams {
    /// Glorot-uniform matrices, zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        LmParams::shapes(cfg)
            .try_map::<_, ()>(&mut |name, s| Ok(init_leaf(name, s, rng)))
            .expect("infallible")
    }

    /// Every body parameter (including layer-norm gains) set to zero; the
    /// embedding is kept.
    pub fn with_zero_body(cfg: &ModelConfig, embedding: Tensor) -> Self {
        let mut p = LmParams::shapes(cfg)
            .try_map::<_, ()>(&mut |_, s| Ok(Tensor::zeros(s)))
            .expect("infallible");
        p.embedding = embedding;
        p
    }

    pub fn to_tree(&self) -> ParamTree {
        let mut tree = ParamTree::new();
        self.try_map::<_, ()>(&mut |name, t| {
            tree.insert(name, t.clone());
            Ok(())
        })
        .expect("infallible");
        tree
    }

    /// Rebuilds typed parameters from a tree, checking names and shapes.
    pub fn from_tree(cfg: &ModelConfig, tree: &ParamTree) -> Result<Self, ModelError> {
        LmParams::shapes(cfg).try_map(&mut |name, shape| lookup(tree, name, shape).cloned())
    }
}

fn lookup<'a>(tree: &'a ParamTree, name: &str, shape: &[usize]) -> Result<&'a Tensor, ModelError> {
    let t = tree.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
    if t.shape() != shape {
        return Err(ModelError::ParamShape {
            name: name.to_string(),
            expected: shape.to_vec(),
            found: t.shape().to_vec(),
        });
    }
    Ok(t)
}

/// Registers every tensor of `tree` as a graph input and returns them both
/// as a flat list (tree order) and as typed parameters.
fn bind(g: &mut Graph, cfg: &ModelConfig, tree: &ParamTree) -> Result<(Vec<Var>, LmParams<Var>), ModelError> {
    let shapes = LmParams::shapes(cfg);
    let mut expected = 0;
    shapes
        .try_map::<_, ModelError>(&mut |name, shape| {
            expected += 1;
            lookup(tree, name, shape).map(|_| ())
        })?;
    if expected != tree.len() {
        let known: Vec<String> = {
            let mut names = Vec::new();
            shapes.try_map::<_, ()>(&mut |n, _| {
                names.push(n.to_string());
                Ok(())
            })
            .expect("infallible");
            names
        };
        let extra = tree.names().find(|n| !known.iter().any(|k| k == n)).unwrap_or_default();
        return Err(ModelError::MissingParam(format!("unexpected parameter {extra:?}")));
    }
    let vars = g.inputs_from(tree)?;
    let typed = shapes.try_map::<_, ModelError>(&mut |name, _| {
        Ok(g.input_var(name).expect("bound above"))
    })?;
    Ok((vars, typed))
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<(), ModelError> {
    match ids.iter().find(|id| **id as usize >= vocab) {
        Some(id) => Err(ModelError::TokenOutOfRange { id: *id, vocab }),
        None => Ok(()),
    }
}

fn as_usize(ids: &[u32]) -> Vec<usize> {
    ids.iter().map(|i| *i as usize).collect()
}

/// Logits node (`rows × vocab`) paired with the target id of each row.
struct LogitBlock {
    logits: Var,
    targets: Vec<u32>,
}

/// Records next-token logits for equal-length CIFG inputs processed as one
/// batch. Row `t * batch + b` predicts `targets[b][t]`.
fn cifg_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &LmParams<Var>,
    inputs: &[Vec<u32>],
    targets: &[Vec<u32>],
) -> Result<LogitBlock, TensorError> {
    let LmBody::Cifg { cell, projection } = &p.body else { unreachable!("cifg body") };
    let batch = inputs.len();
    let steps = inputs[0].len();
    let h0 = g.constant(Tensor::zeros(&[cfg.hidden_dim, batch]))?;
    let (mut h, mut c) = (h0, h0);
    let mut outs = Vec::with_capacity(steps);
    let mut rows = Vec::with_capacity(steps * batch);
    for t in 0..steps {
        let ids: Vec<usize> = inputs.iter().map(|s| s[t] as usize).collect();
        let x = g.gather_rows(p.embedding, &ids)?;
        let x = g.transpose(x)?;
        let s = cifg_step_graph(g, cell, x, h, c, cfg.variant, cfg.eps)?;
        h = s.hidden;
        c = s.cell;
        outs.push(g.matmul(*projection, h)?);
        rows.extend(targets.iter().map(|s| s[t]));
    }
    let o = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
    let logits = g.matmul(p.embedding, o)?;
    let logits = g.transpose(logits)?;
    Ok(LogitBlock { logits, targets: rows })
}

/// Records next-token logits (`n × vocab`) for one transformer input.
fn transformer_logits(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &LmParams<Var>,
    input: &[u32],
) -> Result<Var, ModelError> {
    let LmBody::Transformer { positions, blocks, final_gain, final_bias } = &p.body else {
        unreachable!("transformer body")
    };
    let n = input.len();
    if n > cfg.max_positions {
        return Err(ModelError::InvalidSequence(format!(
            "{n} positions exceed max_positions {}",
            cfg.max_positions
        )));
    }
    let tok = g.gather_rows(p.embedding, &as_usize(input))?;
    let pos = g.slice(*positions, 0, 0, n)?;
    let x = g.add(tok, pos)?;
    let mut x = g.transpose(x)?;
    for block in blocks {
        x = transformer_block_graph(g, x, block, cfg.heads, cfg.variant, cfg.eps)?;
    }
    let x = layer_norm_graph(g, x, *final_gain, *final_bias)?;
    let logits = g.matmul(p.embedding, x)?;
    Ok(g.transpose(logits)?)
}

/// Next-token logits `(len - 1) × vocab` for one token sequence.
pub fn lm_forward(tokens: &[u32], params: &LmParams, cfg: &ModelConfig) -> Result<Tensor, ModelError> {
    if tokens.len() < 2 {
        return Err(ModelError::InvalidSequence(format!("length {} < 2", tokens.len())));
    }
    check_ids(tokens, cfg.vocab_size)?;
    let mut g = Graph::new();
    let (_, p) = bind(&mut g, cfg, &params.to_tree())?;
    let input = &tokens[..tokens.len() - 1];
    let logits = if cfg.variant.is_cifg() {
        let targets = tokens[1..].to_vec();
        cifg_logits(&mut g, cfg, &p, &[input.to_vec()], &[targets])?.logits
    } else {
        transformer_logits(&mut g, cfg, &p, input)?
    };
    Ok(g.value(logits).clone())
}

/// Input/target split of a padded sequence, trimmed after the last non-pad token.
fn split_sequence(seq: &[u32]) -> Option<(&[u32], &[u32])> {
    let len = seq.iter().rposition(|t| *t != PAD)? + 1;
    (len >= 2).then(|| (&seq[..len - 1], &seq[1..len]))
}

struct BatchGraph {
    graph: Graph,
    vars: Vec<Var>,
    blocks: Vec<LogitBlock>,
    loss: Var,
}

fn build_batch(cfg: &ModelConfig, tree: &ParamTree, batch: &[Vec<u32>]) -> Result<BatchGraph, ModelError> {
    let mut pairs = Vec::with_capacity(batch.len());
    for seq in batch {
        check_ids(seq, cfg.vocab_size)?;
        if let Some(pair) = split_sequence(seq) {
            pairs.push(pair);
        }
    }
    if pairs.is_empty() {
        return Err(ModelError::InvalidSequence("batch has no prediction targets".into()));
    }

    let mut g = Graph::new();
    let (vars, p) = bind(&mut g, cfg, tree)?;
    let blocks = if cfg.variant.is_cifg() {
        let steps = pairs.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let pad = |s: &[u32]| {
            let mut v = s.to_vec();
            v.resize(steps, PAD);
            v
        };
        let inputs: Vec<Vec<u32>> = pairs.iter().map(|(i, _)| pad(i)).collect();
        let targets: Vec<Vec<u32>> = pairs.iter().map(|(_, t)| pad(t)).collect();
        vec![cifg_logits(&mut g, cfg, &p, &inputs, &targets)?]
    } else {
        pairs
            .iter()
            .map(|(i, t)| {
                Ok(LogitBlock { logits: transformer_logits(&mut g, cfg, &p, i)?, targets: t.to_vec() })
            })
            .collect::<Result<_, ModelError>>()?
    };

    let mut terms = Vec::with_capacity(blocks.len());
    let mut count = 0usize;
    for b in &blocks {
        let weights: Vec<f64> = b.targets.iter().map(|t| if *t == PAD { 0.0 } else { 1.0 }).collect();
        count += weights.iter().filter(|w| **w > 0.0).count();
        terms.push(g.softmax_xent(b.logits, &as_usize(&b.targets), &weights)?);
    }
    let total = if terms.len() == 1 {
        terms[0]
    } else {
        let mut lifted = Vec::with_capacity(terms.len());
        for t in &terms {
            lifted.push(g.broadcast(*t, 0, 1)?);
        }
        let stacked = g.concat(&lifted, 0)?;
        g.sum_all(stacked)?
    };
    let loss = g.scale(total, 1.0 / count as f64)?;
    Ok(BatchGraph { graph: g, vars, blocks, loss })
}

fn batch_counts(b: &BatchGraph, mode: MetricMode) -> TokenCounts {
    let mut counts = TokenCounts::default();
    for block in &b.blocks {
        counts.merge(&count_tokens(b.graph.value(block.logits), &block.targets, mode));
    }
    counts
}

/// Mean cross-entropy over non-pad targets of `batch`, its token counts
/// (standard mode) and the gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    cfg: &ModelConfig,
    params: &ParamTree,
    batch: &[Vec<u32>],
) -> Result<(f64, TokenCounts, GradMap), ModelError> {
    let b = build_batch(cfg, params, batch)?;
    let grads = b.graph.grads_of(b.loss, &b.vars)?;
    let grad_map = params.names().map(str::to_string).zip(grads).collect();
    Ok((b.graph.value(b.loss).item(), batch_counts(&b, MetricMode::Standard), grad_map))
}

/// The recorded batch loss as a standalone graph with output `"loss"`, for
/// replay with [`evaluate`](crate::autodiff::evaluate) or gradient checking.
pub fn lm_loss_graph(cfg: &ModelConfig, params: &ParamTree, batch: &[Vec<u32>]) -> Result<Graph, ModelError> {
    let mut b = build_batch(cfg, params, batch)?;
    b.graph.set_output("loss", b.loss);
    Ok(b.graph)
}

/// Token counts and cross-entropy sums for `batch` without differentiating.
pub fn batch_metrics(
    cfg: &ModelConfig,
    params: &ParamTree,
    batch: &[Vec<u32>],
    mode: MetricMode,
) -> Result<TokenCounts, ModelError> {
    Ok(batch_counts(&build_batch(cfg, params, batch)?, mode))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelVariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(variant: ModelVariant) -> ModelConfig {
        ModelConfig {
            variant,
            vocab_size: 9,
            embed_dim: 4,
            hidden_dim: 5,
            layers: 2,
            heads: 2,
            ffn_dim: 6,
            max_positions: 20,
            eps: 1e-6,
        }
    }

    #[test]
    fn length_two_gives_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in ModelVariant::ALL {
            let cfg = tiny(v);
            let p = LmParams::init(&cfg, &mut rng);
            assert_eq!(lm_forward(&[3, 4], &p, &cfg).unwrap().shape(), &[1, 9]);
        }
    }

    #[test]
    fn out_of_range_and_short_inputs_are_errors() {
        let cfg = tiny(ModelVariant::CifgStandard);
        let p = LmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(lm_forward(&[3, 9], &p, &cfg), Err(ModelError::TokenOutOfRange { id: 9, .. })));
        assert!(matches!(lm_forward(&[3], &p, &cfg), Err(ModelError::InvalidSequence(_))));
    }

    #[test]
    fn future_tokens_do_not_change_past_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in ModelVariant::ALL {
            let cfg = tiny(v);
            let p = LmParams::init(&cfg, &mut rng);
            let a: Vec<u32> = vec![3, 4, 5, 6, 7, 8, 3, 4];
            let mut b = a.clone();
            b[5..].reverse();
            let la = lm_forward(&a, &p, &cfg).unwrap();
            let lb = lm_forward(&b, &p, &cfg).unwrap();
            for r in 0..5 {
                assert_eq!(la.row(r), lb.row(r), "{v} row {r}");
            }
        }
    }

    #[test]
    fn zero_body_gives_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in ModelVariant::ALL {
            let cfg = tiny(v);
            let emb = LmParams::init(&cfg, &mut rng).embedding;
            let p = LmParams::with_zero_body(&cfg, emb);
            let l = lm_forward(&[3, 4, 5, 6, 1], &p, &cfg).unwrap();
            for r in 1..4 {
                assert_eq!(l.row(r), l.row(0), "{v}");
            }
        }
    }

    #[test]
    fn tree_roundtrip_and_shape_errors() {
        let cfg = tiny(ModelVariant::TransformerScaleInvariant);
        let p = LmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3));
        let tree = p.to_tree();
        assert_eq!(LmParams::from_tree(&cfg, &tree).unwrap(), p);
        let mut wide = cfg.clone();
        wide.embed_dim = 6;
        assert!(matches!(LmParams::from_tree(&wide, &tree), Err(ModelError::ParamShape { .. })));
    }

    #[test]
    fn batched_cifg_matches_single_sequences() {
        let cfg = tiny(ModelVariant::CifgScaleInvariant);
        let p = LmParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).to_tree();
        let a = vec![3, 4, 5, 1, 0, 0];
        let b = vec![6, 7, 1, 0, 0, 0];
        let both = batch_metrics(&cfg, &p, &[a.clone(), b.clone()], MetricMode::Standard).unwrap();
        let mut split = batch_metrics(&cfg, &p, &[a], MetricMode::Standard).unwrap();
        split.merge(&batch_metrics(&cfg, &p, &[b], MetricMode::Standard).unwrap());
        assert_eq!(both.nonpad, split.nonpad);
        assert!((both.xent_nonpad - split.xent_nonpad).abs() < 1e-12);
    }
}
