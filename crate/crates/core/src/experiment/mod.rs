//! The outer training loop: data preparation, rounds, evaluation, metric
//! logging and checkpointing.

mod checkpoint;
mod config;
mod metrics;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde_json::json;

pub use checkpoint::{check_shapes, load_checkpoint, save_checkpoint, CheckpointMeta, TensorEntry};
pub use config::{CorpusSource, DpSettings, EvalConfig, ExperimentConfig, MetricsFormat, OutputConfig};
pub use metrics::{read_jsonl, MetricsRecord, MetricsSink, Split};

use crate::autodiff::{ParamTree, Tensor};
use crate::data::{generate_synthetic, load_partitioned, split_holdout, DataError, FederatedDataset, Vocab};
use crate::dp::{private_round, DpError, TreeAggState};
use crate::federated::{
    clip_update, client_update, quantize_update, sample_clients, ClientUpdate, FedError, OptimizerState,
    ServerState,
};
use crate::models::{batch_metrics, LmParams, ModelConfig, ModelError, TokenCounts};
use crate::rng::{stream, Purpose};

/// Evaluation loss above this multiple of the initial loss counts as divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

const EVAL_CHUNK: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("training diverged at round {round}: {reason}")]
    Diverged { round: u64, reason: String },
    #[error("round {round}: {source}")]
    Round { round: u64, source: FedError },
    #[error("round {round}: {source}")]
    Dp { round: u64, source: DpError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Corpus split into training and held-out clients, with the vocabulary
/// built from training clients only.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: FederatedDataset,
    pub eval: FederatedDataset,
    /// Sorted training client ids; a client's position keys its random streams.
    pub train_ids: Vec<String>,
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData, ExperimentError> {
    let raw = match &cfg.corpus {
        CorpusSource::Synthetic { clients, generator } => generate_synthetic(*clients, generator, cfg.seed)?,
        CorpusSource::File { path } => load_partitioned(path)?,
    };
    let ids: Vec<String> = raw.client_ids().map(str::to_string).collect();
    if ids.len() < 2 {
        return Err(ExperimentError::Config("corpus needs at least two clients to hold one out".into()));
    }
    let (train_ids, eval_ids) = split_holdout(&ids, cfg.eval.holdout_fraction, cfg.seed);
    let train_lines = train_ids.iter().flat_map(|id| raw.lines(id).unwrap_or(&[])).map(String::as_str);
    let vocab = Vocab::build(train_lines, cfg.model.vocab_size, cfg.tokenizer)?;
    let train = FederatedDataset::encode(&raw, &train_ids, &vocab, cfg.client.max_seq_len);
    let eval = FederatedDataset::encode(&raw, &eval_ids, &vocab, cfg.client.max_seq_len);
    if eval.num_clients() == 0 {
        return Err(ExperimentError::Config("held-out clients have no usable sequences".into()));
    }
    if train.num_clients() < cfg.clients_per_round {
        return Err(ExperimentError::Config(format!(
            "clients_per_round: {} exceeds the {} usable training clients",
            cfg.clients_per_round,
            train.num_clients()
        )));
    }
    let train_ids = train.client_ids();
    Ok(PreparedData { vocab, train, eval, train_ids })
}

/// What one round produced, before any evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundSummary {
    pub round: u64,
    pub train: TokenCounts,
    pub upload_bytes: u64,
    pub participants: usize,
}

/// A training run in progress.
pub struct Experiment {
    cfg: ExperimentConfig,
    data: PreparedData,
    model: ModelConfig,
    client_index: HashMap<String, u64>,
    state: ServerState,
    tree: Option<TreeAggState>,
    initial_eval_loss: Option<f64>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, ExperimentError> {
        cfg.validate()?;
        let data = prepare_data(&cfg)?;
        let model = ModelConfig { vocab_size: data.vocab.len(), max_positions: cfg.client.max_seq_len, ..cfg.model.clone() };
        model.validate()?;
        let params = LmParams::init(&model, &mut stream(cfg.seed, Purpose::ModelInit, 0, 0)).to_tree();
        let state = ServerState::new(params, &cfg.server);
        let tree = cfg.dp_config().map(|dp| TreeAggState::new(state.params.num_elements(), &dp, cfg.seed));
        let client_index = data.train_ids.iter().enumerate().map(|(i, id)| (id.clone(), i as u64)).collect();
        Ok(Self { cfg, data, model, client_index, state, tree, initial_eval_loss: None })
    }

    /// Restores a run from a checkpoint written under an equivalent config.
    pub fn resume(cfg: ExperimentConfig, path: &Path) -> Result<Self, ExperimentError> {
        let mut exp = Self::new(cfg)?;
        let (meta, tensors) = load_checkpoint(path)?;
        if meta.config_hash != exp.cfg.trajectory_hash() {
            return Err(ExperimentError::Checkpoint(format!(
                "{} was written under a different configuration",
                path.display()
            )));
        }
        exp.load_state_tensors(&tensors)?;
        exp.state.round = meta.round;
        exp.initial_eval_loss = meta.initial_eval_loss;
        if let Some(dp) = exp.cfg.dp_config() {
            let prefix = tensors.get("dp/prefix").expect("checked").data().to_vec();
            exp.tree = Some(TreeAggState::restore(&dp, exp.cfg.seed, meta.round, prefix));
        }
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn data(&self) -> &PreparedData {
        &self.data
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn params(&self) -> &ParamTree {
        &self.state.params
    }

    pub fn server_state(&self) -> &ServerState {
        &self.state
    }

    /// Completed rounds.
    pub fn round(&self) -> u64 {
        self.state.round
    }

    pub fn initial_eval_loss(&self) -> Option<f64> {
        self.initial_eval_loss
    }

    fn state_tensors(&self) -> ParamTree {
        let mut out = ParamTree::new();
        for (name, t) in self.state.params.iter() {
            out.insert(format!("params/{name}"), t.clone());
        }
        match &self.state.optimizer {
            OptimizerState::FedAdam { m, v } => {
                out.insert("server/m", Tensor::vector(m.clone()));
                out.insert("server/v", Tensor::vector(v.clone()));
            }
            OptimizerState::SgdMomentum { velocity } => out.insert("server/velocity", Tensor::vector(velocity.clone())),
        }
        if let Some(tree) = &self.tree {
            out.insert("dp/prefix", Tensor::vector(tree.true_prefix().to_vec()));
        }
        out
    }

    fn load_state_tensors(&mut self, loaded: &ParamTree) -> Result<(), ExperimentError> {
        let expected = self.state_tensors();
        check_shapes(&expected, loaded)?;
        let names: Vec<String> = self.state.params.names().map(str::to_string).collect();
        for name in names {
            let src = loaded.get(&format!("params/{name}")).expect("checked");
            *self.state.params.get_mut(&name).expect("own param") = src.clone();
        }
        let vec_of = |key: &str| loaded.get(key).expect("checked").data().to_vec();
        self.state.optimizer = match &self.state.optimizer {
            OptimizerState::FedAdam { .. } => OptimizerState::FedAdam { m: vec_of("server/m"), v: vec_of("server/v") },
            OptimizerState::SgdMomentum { .. } => OptimizerState::SgdMomentum { velocity: vec_of("server/velocity") },
        };
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ExperimentError> {
        let meta = CheckpointMeta {
            round: self.state.round,
            config_hash: self.cfg.trajectory_hash(),
            initial_eval_loss: self.initial_eval_loss,
        };
        save_checkpoint(path, &meta, &self.state_tensors())
    }

    /// Token statistics of `params` on the held-out clients.
    pub fn evaluate_params(&self, params: &ParamTree) -> Result<TokenCounts, ExperimentError> {
        let seqs: Vec<Vec<u32>> = self.data.eval.iter().flat_map(|(_, s)| s.iter().cloned()).collect();
        let parts: Vec<Result<TokenCounts, ModelError>> = seqs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| batch_metrics(&self.model, params, chunk, self.cfg.eval.metric_mode))
            .collect();
        let mut total = TokenCounts::default();
        for p in parts {
            total.merge(&p?);
        }
        Ok(total)
    }

    pub fn evaluate(&self) -> Result<TokenCounts, ExperimentError> {
        self.evaluate_params(&self.state.params)
    }

    fn train_client(&self, id: &str, round: u64) -> Result<(ClientUpdate, u64), FedError> {
        let name = |e: FedError| match e {
            FedError::EmptyClient(_) => FedError::EmptyClient(id.to_string()),
            FedError::NonFinite(_) => FedError::NonFinite(id.to_string()),
            other => other,
        };
        let key = self.client_index[id];
        let data = self.data.train.get(id).ok_or_else(|| FedError::EmptyClient(id.to_string()))?;
        let seed = self.cfg.seed;
        let mut rng = stream(seed, Purpose::ClientTraining, round, key);
        let mut update = client_update(&self.state.params, data, &self.cfg.client, &self.model, &mut rng).map_err(name)?;
        let initial = self.state.params.flatten();
        let clipped = clip_update(&update.delta, self.cfg.client_clip_norm);
        let mut qrng = stream(seed, Purpose::Quantization, round, key);
        let (delta, bytes) = quantize_update(&clipped, &self.state.params.layout(), &self.cfg.quant, &mut qrng);
        update.set_delta(&initial, delta);
        Ok((update, bytes))
    }

    /// Samples clients, trains them in parallel, aggregates and steps the server.
    pub fn run_round(&mut self) -> Result<RoundSummary, ExperimentError> {
        let round = self.state.round + 1;
        let fed = |source| ExperimentError::Round { round, source };
        let ids = sample_clients(&self.data.train_ids, self.cfg.clients_per_round, round, self.cfg.seed).map_err(fed)?;
        let results: Vec<Result<(ClientUpdate, u64), FedError>> =
            ids.par_iter().map(|id| self.train_client(id, round)).collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut upload_bytes = 0;
        let mut train = TokenCounts::default();
        for r in results {
            let (u, bytes) = r.map_err(fed)?;
            upload_bytes += bytes;
            train.merge(&u.train);
            updates.push(u);
        }
        match (&mut self.tree, self.cfg.dp_config()) {
            (Some(tree), Some(dp)) => {
                let deltas: Vec<Vec<f64>> = updates.into_iter().map(|u| u.delta).collect();
                let mean = private_round(tree, &deltas, &dp).map_err(|source| ExperimentError::Dp { round, source })?.1;
                self.state.step(&self.cfg.server, &mean).map_err(fed)?;
            }
            _ => {
                self.state.apply_round(&self.cfg.server, &updates, self.cfg.weighting).map_err(fed)?;
            }
        }
        Ok(RoundSummary { round, train, upload_bytes, participants: ids.len() })
    }
}

/// Final state of a completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub final_record: MetricsRecord,
    pub rounds_completed: u64,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn metrics_file_name(format: MetricsFormat) -> &'static str {
    match format {
        MetricsFormat::Jsonl => "metrics.jsonl",
        MetricsFormat::Csv => "metrics.csv",
    }
}

fn divergence(loss: f64, initial: Option<f64>) -> Option<String> {
    if !loss.is_finite() {
        return Some(format!("evaluation loss is {loss}"));
    }
    match initial {
        Some(init) if loss > DIVERGENCE_FACTOR * init => {
            Some(format!("evaluation loss {loss} exceeds {DIVERGENCE_FACTOR} x initial {init}"))
        }
        _ => None,
    }
}

fn write_meta(exp: &Experiment, out_dir: &Path) -> Result<(), ExperimentError> {
    let cfg = exp.config();
    let meta = json!({
        "config": cfg,
        "config_hash": cfg.trajectory_hash(),
        "vocab_size": exp.model_config().vocab_size,
        "num_parameters": exp.params().num_elements(),
        "train_clients": exp.data().train.num_clients(),
        "eval_clients": exp.data().eval.num_clients(),
        "privacy": cfg.dp_config().map(|dp| json!({
            "noise_multiplier": dp.noise_multiplier,
            "clip_norm": dp.clip_norm,
            "clients_per_round": dp.clients_per_round,
            "rounds": cfg.rounds,
            "reported_zcdp": dp.reported_zcdp,
        })),
    });
    let path = out_dir.join("run.json");
    let text = serde_json::to_string_pretty(&meta).expect("metadata serializes");
    fs::write(&path, text + "\n").map_err(|source| ExperimentError::Io { path, source })
}

/// Runs (or resumes) an experiment to `cfg.rounds`, writing metrics,
/// checkpoints and run metadata under `out_dir`.
///
/// A fresh run evaluates once before training (round 0). Training records
/// are written every round; evaluation records every `eval.every` rounds
/// and after the last one. A diverged run writes a final record flagged
/// `diverged` and returns [`ExperimentError::Diverged`].
pub fn run_experiment(
    cfg: ExperimentConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<RunSummary, ExperimentError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| ExperimentError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut exp = match resume {
        Some(path) => Experiment::resume(cfg, path)?,
        None => Experiment::new(cfg)?,
    };
    write_meta(&exp, out_dir)?;
    let cfg = exp.config().clone();
    let metrics_path = out_dir.join(metrics_file_name(cfg.output.metrics_format));
    let mut sink = MetricsSink::open(&metrics_path, cfg.output.metrics_format)?;
    let start = Instant::now();
    let elapsed = |start: &Instant| if cfg.output.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };

    let mut last = None;
    if exp.initial_eval_loss.is_none() {
        let counts = exp.evaluate()?;
        let mut rec = MetricsRecord::from_counts(exp.round(), Split::Eval, &counts);
        rec.wall_seconds = elapsed(&start);
        sink.write(&rec)?;
        exp.initial_eval_loss = Some(rec.loss);
        last = Some(rec);
    }

    while exp.round() < cfg.rounds {
        let round = exp.round() + 1;
        let summary = match exp.run_round() {
            Ok(s) => s,
            Err(ExperimentError::Round { round, source }) if source.is_divergence() => {
                return Err(flag_divergence(&mut sink, round, source.to_string(), elapsed(&start)));
            }
            Err(e) => return Err(e),
        };
        let mut rec = MetricsRecord::from_counts(round, Split::TrainSample, &summary.train);
        rec.upload_bytes = summary.upload_bytes;
        rec.wall_seconds = elapsed(&start);
        sink.write(&rec)?;
        last = Some(rec);

        if round % cfg.eval.every == 0 || round == cfg.rounds {
            let counts = match exp.evaluate() {
                Ok(c) => c,
                Err(ExperimentError::Model(ModelError::Tensor(e))) => {
                    return Err(flag_divergence(&mut sink, round, e.to_string(), elapsed(&start)));
                }
                Err(e) => return Err(e),
            };
            let mut rec = MetricsRecord::from_counts(round, Split::Eval, &counts);
            rec.wall_seconds = elapsed(&start);
            if let Some(reason) = divergence(rec.loss, exp.initial_eval_loss) {
                rec.diverged = true;
                sink.write(&rec)?;
                return Err(ExperimentError::Diverged { round, reason });
            }
            sink.write(&rec)?;
            last = Some(rec);
        }
        if cfg.checkpoint_every > 0 && round % cfg.checkpoint_every == 0 {
            exp.save_checkpoint(&out_dir.join(format!("checkpoint-{round:06}.ckpt")))?;
        }
    }

    let checkpoint_path = out_dir.join("final.ckpt");
    exp.save_checkpoint(&checkpoint_path)?;
    let final_record = match last {
        Some(r) => r,
        None => {
            let counts = exp.evaluate()?;
            MetricsRecord::from_counts(exp.round(), Split::Eval, &counts)
        }
    };
    Ok(RunSummary { final_record, rounds_completed: exp.round(), metrics_path, checkpoint_path })
}

fn flag_divergence(sink: &mut MetricsSink, round: u64, reason: String, wall: f64) -> ExperimentError {
    let rec = MetricsRecord {
        round,
        split: Split::Eval,
        loss: f64::NAN,
        perplexity: f64::NAN,
        accuracy: 0.0,
        counted_tokens: 0,
        wall_seconds: wall,
        upload_bytes: 0,
        diverged: true,
    };
    match sink.write(&rec) {
        Ok(()) => ExperimentError::Diverged { round, reason },
        Err(e) => e,
    }
}

/// Evaluates a checkpoint on the held-out clients of `cfg`.
pub fn evaluate_checkpoint(cfg: ExperimentConfig, path: &Path) -> Result<MetricsRecord, ExperimentError> {
    let exp = Experiment::resume(cfg, path)?;
    let counts = exp.evaluate()?;
    Ok(MetricsRecord::from_counts(exp.round(), Split::Eval, &counts))
}
