//! Flat `key = value` experiment configuration.
//!
//! One setting per line, dotted namespaces (`client.learning_rate`), `#`
//! starts a comment. Every key has a default; unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::ExperimentError;
use crate::data::{SyntheticConfig, Tokenizer};
use crate::dp::DpConfig;
use crate::federated::{ClientConfig, QuantConfig, ServerOptimizer, Weighting};
use crate::models::{MetricMode, ModelConfig, ModelVariant};

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum CorpusSource {
    Synthetic { clients: usize, generator: SyntheticConfig },
    File { path: PathBuf },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricsFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DpSettings {
    pub enabled: bool,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub reported_zcdp: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalConfig {
    /// Evaluate after every `every` rounds (and after the last round).
    pub every: u64,
    pub holdout_fraction: f64,
    pub metric_mode: MetricMode,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OutputConfig {
    pub metrics_format: MetricsFormat,
    /// Record elapsed wall-clock time in metrics. Off by default so that
    /// repeated runs produce byte-identical files.
    pub wall_clock: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: u64,
    pub clients_per_round: usize,
    /// Architecture; `vocab_size` is the requested vocabulary size and
    /// `max_positions` is taken from `client.max_seq_len`.
    pub model: ModelConfig,
    pub tokenizer: Tokenizer,
    pub client: ClientConfig,
    /// Per-client clipping before upload; infinite disables it.
    pub client_clip_norm: f64,
    pub server: ServerOptimizer,
    pub weighting: Weighting,
    pub quant: QuantConfig,
    pub dp: DpSettings,
    pub eval: EvalConfig,
    /// Write a checkpoint every this many rounds; 0 only writes the final one.
    pub checkpoint_every: u64,
    pub corpus: CorpusSource,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let client = ClientConfig::default();
        let mut model = ModelConfig::new(ModelVariant::CifgStandard, 4000);
        model.max_positions = client.max_seq_len;
        Self {
            seed: 0,
            rounds: 10,
            clients_per_round: 10,
            model,
            tokenizer: Tokenizer::Whitespace,
            client,
            client_clip_norm: f64::INFINITY,
            server: ServerOptimizer::fedadam(0.01),
            weighting: Weighting::ExampleWeighted,
            quant: QuantConfig::default(),
            dp: DpSettings { enabled: false, clip_norm: 5.0, noise_multiplier: 0.0, reported_zcdp: None },
            eval: EvalConfig { every: 1, holdout_fraction: 0.1, metric_mode: MetricMode::Standard },
            checkpoint_every: 0,
            corpus: CorpusSource::Synthetic { clients: 100, generator: SyntheticConfig::default() },
            output: OutputConfig { metrics_format: MetricsFormat::Jsonl, wall_clock: false },
        }
    }
}

fn config_err(key: &str, detail: impl Display) -> ExperimentError {
    ExperimentError::Config(format!("{key}: {detail}"))
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ExperimentError>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| config_err(key, format!("cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, ExperimentError> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(config_err(key, format!("expected true or false, got {value:?}"))),
    }
}

/// Splits config text into key/value pairs. Later duplicates are errors.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>, ExperimentError> {
    let mut pairs = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = split_assignment(line)
            .ok_or_else(|| ExperimentError::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        if pairs.insert(key.to_string(), value.to_string()).is_some() {
            return Err(config_err(key, format!("set twice (line {})", n + 1)));
        }
    }
    Ok(pairs)
}

fn split_assignment(s: &str) -> Option<(&str, &str)> {
    let (k, v) = s.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty()).then_some((k, v))
}

struct Scratch {
    server_kind: String,
    server_lr: f64,
    beta1: f64,
    beta2: f64,
    tau: f64,
    momentum: f64,
    corpus_source: String,
    corpus_path: Option<PathBuf>,
    corpus_clients: usize,
    generator: SyntheticConfig,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
        Self::parse_str(&text, overrides)
    }

    /// Parses config text, then applies `key=value` overrides.
    pub fn parse_str(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut pairs = parse_pairs(text)?;
        for o in overrides {
            let (k, v) = split_assignment(o)
                .ok_or_else(|| ExperimentError::Config(format!("override {o:?} is not key=value")))?;
            pairs.insert(k.to_string(), v.to_string());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self, ExperimentError> {
        let mut c = Self::default();
        let mut s = Scratch {
            server_kind: "fedadam".into(),
            server_lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            tau: 1e-8,
            momentum: 0.9,
            corpus_source: "synthetic".into(),
            corpus_path: None,
            corpus_clients: 100,
            generator: SyntheticConfig::default(),
        };
        for (key, value) in pairs {
            c.set(&mut s, key, value)?;
        }
        c.server = match s.server_kind.as_str() {
            "fedadam" => {
                ServerOptimizer::FedAdam { learning_rate: s.server_lr, beta1: s.beta1, beta2: s.beta2, tau: s.tau }
            }
            "sgdm" => ServerOptimizer::SgdMomentum { learning_rate: s.server_lr, momentum: s.momentum },
            other => return Err(config_err("server.optimizer", format!("expected fedadam or sgdm, got {other:?}"))),
        };
        c.corpus = match s.corpus_source.as_str() {
            "synthetic" => CorpusSource::Synthetic { clients: s.corpus_clients, generator: s.generator },
            "file" => CorpusSource::File {
                path: s.corpus_path.ok_or_else(|| config_err("corpus.path", "required when corpus.source = file"))?,
            },
            other => return Err(config_err("corpus.source", format!("expected synthetic or file, got {other:?}"))),
        };
        c.model.max_positions = c.client.max_seq_len;
        c.validate()?;
        Ok(c)
    }

    fn set(&mut self, s: &mut Scratch, key: &str, v: &str) -> Result<(), ExperimentError> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "clients_per_round" => self.clients_per_round = parse(key, v)?,
            "variant" => self.model.variant = parse(key, v)?,
            "model.embed_dim" => self.model.embed_dim = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "model.eps" => self.model.eps = parse(key, v)?,
            "vocab.size" => self.model.vocab_size = parse(key, v)?,
            "vocab.tokenizer" => self.tokenizer = parse(key, v)?,
            "client.learning_rate" => self.client.learning_rate = parse(key, v)?,
            "client.batch_size" => self.client.batch_size = parse(key, v)?,
            "client.epochs" => self.client.epochs = parse(key, v)?,
            "client.max_batches" => self.client.max_batches = parse(key, v)?,
            "client.max_seq_len" => self.client.max_seq_len = parse(key, v)?,
            "client.clip_norm" => self.client_clip_norm = parse(key, v)?,
            "server.optimizer" => s.server_kind = v.to_string(),
            "server.learning_rate" => s.server_lr = parse(key, v)?,
            "server.beta1" => s.beta1 = parse(key, v)?,
            "server.beta2" => s.beta2 = parse(key, v)?,
            "server.tau" => s.tau = parse(key, v)?,
            "server.momentum" => s.momentum = parse(key, v)?,
            "aggregation.weighting" => self.weighting = parse(key, v)?,
            "quant.enabled" => self.quant.enabled = parse_bool(key, v)?,
            "quant.bits" => self.quant.bits = parse(key, v)?,
            "dp.enabled" => self.dp.enabled = parse_bool(key, v)?,
            "dp.clip_norm" => self.dp.clip_norm = parse(key, v)?,
            "dp.noise_multiplier" => self.dp.noise_multiplier = parse(key, v)?,
            "dp.reported_zcdp" => self.dp.reported_zcdp = Some(parse(key, v)?),
            "eval.every" => self.eval.every = parse(key, v)?,
            "eval.holdout_fraction" => self.eval.holdout_fraction = parse(key, v)?,
            "eval.metric_mode" => {
                self.eval.metric_mode = match v {
                    "standard" => MetricMode::Standard,
                    "in_vocab" => MetricMode::InVocab,
                    _ => return Err(config_err(key, format!("expected standard or in_vocab, got {v:?}"))),
                }
            }
            "checkpoint.every" => self.checkpoint_every = parse(key, v)?,
            "corpus.source" => s.corpus_source = v.to_string(),
            "corpus.path" => s.corpus_path = Some(PathBuf::from(v)),
            "corpus.clients" => s.corpus_clients = parse(key, v)?,
            "corpus.words" => s.generator.words = parse(key, v)?,
            "corpus.successors" => s.generator.successors = parse(key, v)?,
            "corpus.alpha" => s.generator.alpha = parse(key, v)?,
            "corpus.min_sequences" => s.generator.min_sequences = parse(key, v)?,
            "corpus.max_sequences" => s.generator.max_sequences = parse(key, v)?,
            "corpus.min_len" => s.generator.min_len = parse(key, v)?,
            "corpus.max_len" => s.generator.max_len = parse(key, v)?,
            "output.metrics_format" => {
                self.output.metrics_format = match v {
                    "jsonl" => MetricsFormat::Jsonl,
                    "csv" => MetricsFormat::Csv,
                    _ => return Err(config_err(key, format!("expected jsonl or csv, got {v:?}"))),
                }
            }
            "output.wall_clock" => self.output.wall_clock = parse_bool(key, v)?,
            _ => return Err(ExperimentError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.rounds == 0 {
            return Err(config_err("rounds", "must be >= 1"));
        }
        if self.clients_per_round == 0 {
            return Err(config_err("clients_per_round", "must be >= 1"));
        }
        if self.model.vocab_size <= crate::data::RESERVED {
            return Err(config_err("vocab.size", "must be >= 4"));
        }
        self.model.validate().map_err(|e| config_err("model", e))?;
        self.client.validate().map_err(|e| config_err("client", e))?;
        if !(self.client_clip_norm > 0.0) {
            return Err(config_err("client.clip_norm", "must be positive (inf disables clipping)"));
        }
        self.server.validate().map_err(|e| config_err("server", e))?;
        self.quant.validate().map_err(|e| config_err("quant.bits", e))?;
        if self.dp.enabled {
            self.dp_config().expect("enabled").validate().map_err(|e| config_err("dp", e))?;
        }
        if self.eval.every == 0 {
            return Err(config_err("eval.every", "must be >= 1"));
        }
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return Err(config_err("eval.holdout_fraction", "must lie strictly between 0 and 1"));
        }
        if let CorpusSource::Synthetic { clients, generator } = &self.corpus {
            if *clients < 2 {
                return Err(config_err("corpus.clients", "must be >= 2 so that some clients can be held out"));
            }
            generator.validate().map_err(|e| config_err("corpus", e))?;
        }
        Ok(())
    }

    pub fn dp_config(&self) -> Option<DpConfig> {
        self.dp.enabled.then_some(DpConfig {
            clip_norm: self.dp.clip_norm,
            noise_multiplier: self.dp.noise_multiplier,
            clients_per_round: self.clients_per_round,
            reported_zcdp: self.dp.reported_zcdp,
        })
    }

    /// Digest of every setting that influences the training trajectory.
    /// Round count, evaluation and checkpoint cadence and output options
    /// are excluded so a checkpoint can be resumed under a longer schedule.
    pub fn trajectory_hash(&self) -> String {
        let mut c = self.clone();
        c.rounds = 0;
        c.eval.every = 0;
        c.checkpoint_every = 0;
        c.output = OutputConfig { metrics_format: MetricsFormat::Jsonl, wall_clock: false };
        let canonical = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
