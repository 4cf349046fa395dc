use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::MetricsFormat;
use super::ExperimentError;
use crate::models::TokenCounts;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    TrainSample,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainSample => "train_sample",
            Split::Eval => "eval",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: u64,
    pub split: Split,
    /// Mean cross-entropy over counted targets.
    #[serde(deserialize_with = "nan_if_null")]
    pub loss: f64,
    /// `exp(loss)`.
    #[serde(deserialize_with = "nan_if_null")]
    pub perplexity: f64,
    pub accuracy: f64,
    pub counted_tokens: u64,
    pub wall_seconds: f64,
    pub upload_bytes: u64,
    pub diverged: bool,
}

impl MetricsRecord {
    pub fn from_counts(round: u64, split: Split, counts: &TokenCounts) -> Self {
        let loss = counts.counted_loss();
        Self {
            round,
            split,
            loss,
            perplexity: loss.exp(),
            accuracy: counts.accuracy(),
            counted_tokens: counts.counted,
            wall_seconds: 0.0,
            upload_bytes: 0,
            diverged: false,
        }
    }
}

/// JSON has no NaN; non-finite values are written as `null`.
fn nan_if_null<'de, D: serde::Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

const CSV_HEADER: &str = "round,split,loss,perplexity,accuracy,counted_tokens,wall_seconds,upload_bytes,diverged";

/// Append-only metrics file, one record per line, flushed after every write.
pub struct MetricsSink {
    file: File,
    path: PathBuf,
    format: MetricsFormat,
}

impl MetricsSink {
    /// Opens `path` for appending; a new CSV file starts with a header line.
    pub fn open(path: &Path, format: MetricsFormat) -> Result<Self, ExperimentError> {
        let io = |source| ExperimentError::Io { path: path.to_path_buf(), source };
        let fresh = !path.exists() || std::fs::metadata(path).map_err(io)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if fresh && format == MetricsFormat::Csv {
            writeln!(file, "{CSV_HEADER}").map_err(io)?;
        }
        Ok(Self { file, path: path.to_path_buf(), format })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, r: &MetricsRecord) -> Result<(), ExperimentError> {
        let line = match self.format {
            MetricsFormat::Jsonl => serde_json::to_string(r).expect("record serializes"),
            MetricsFormat::Csv => format!(
                "{},{},{},{},{},{},{},{},{}",
                r.round,
                r.split.as_str(),
                r.loss,
                r.perplexity,
                r.accuracy,
                r.counted_tokens,
                r.wall_seconds,
                r.upload_bytes,
                r.diverged
            ),
        };
        let io = |source| ExperimentError::Io { path: self.path.clone(), source };
        self.file.write_all(format!("{line}\n").as_bytes()).map_err(io)?;
        self.file.flush().map_err(io)
    }
}

/// Reads back a JSON-lines metrics file.
pub fn read_jsonl(path: &Path) -> Result<Vec<MetricsRecord>, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| ExperimentError::Io { path: path.to_path_buf(), source: std::io::Error::other(e) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(round: u64) -> MetricsRecord {
        let counts = TokenCounts { nonpad: 12, counted: 10, correct: 4, xent_nonpad: 30.0, xent_counted: 25.0 };
        MetricsRecord::from_counts(round, Split::Eval, &counts)
    }

    #[test]
    fn perplexity_is_exp_loss() {
        let r = record(1);
        assert!((r.perplexity - r.loss.exp()).abs() < 1e-9);
        assert_eq!(r.loss, 2.5);
        assert_eq!(r.accuracy, 0.4);
    }

    #[test]
    fn jsonl_appends_one_line_per_record_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut sink = MetricsSink::open(&path, MetricsFormat::Jsonl).unwrap();
        for round in 0..3 {
            sink.write(&record(round)).unwrap();
            let lines = std::fs::read_to_string(&path).unwrap().lines().count();
            assert_eq!(lines as u64, round + 1);
        }
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.iter().map(|r| r.round).collect::<Vec<_>>(), vec![0, 1, 2]);
        assert_eq!(back[2], record(2));
    }

    #[test]
    fn csv_has_a_single_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        MetricsSink::open(&path, MetricsFormat::Csv).unwrap().write(&record(0)).unwrap();
        MetricsSink::open(&path, MetricsFormat::Csv).unwrap().write(&record(1)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], CSV_HEADER);
        assert!(lines[2].starts_with("1,eval,2.5,"));
    }

    #[test]
    fn unwritable_path_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("missing").join("m.jsonl");
        let err = MetricsSink::open(&path, MetricsFormat::Jsonl).err().unwrap();
        assert!(err.to_string().contains("missing"));
    }
}
