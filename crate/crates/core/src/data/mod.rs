//! Federated text corpora: synthetic generation, partitioned-file ingestion,
//! vocabulary construction and encoding.

mod corpus;
mod vocab;

use std::path::PathBuf;

pub use corpus::{
    generate_synthetic, load_partitioned, parse_partitioned, split_holdout, word, FederatedDataset, RawCorpus,
    SyntheticConfig,
};
pub use vocab::{Tokenizer, Vocab, EOS, OOV, PAD, RESERVED};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed corpus line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("corpus file is empty")]
    EmptyFile,
    #[error("corpus contains no tokens")]
    NoTokens,
    #[error("{0}")]
    InvalidArgument(String),
}
