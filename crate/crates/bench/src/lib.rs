//! Fixtures shared by the benchmarks: a default-sized model with seeded
//! parameters and a batch of synthetic sequences.

use sifed_core::autodiff::ParamTree;
use sifed_core::data::{generate_synthetic, FederatedDataset, SyntheticConfig, Tokenizer, Vocab};
use sifed_core::models::{LmParams, ModelConfig, ModelVariant};
use sifed_core::rng::{stream, Purpose};

pub const SEED: u64 = 17;
pub const MAX_SEQ_LEN: usize = 20;

pub struct Fixture {
    pub model: ModelConfig,
    pub params: ParamTree,
    /// One client's padded sequences.
    pub sequences: Vec<Vec<u32>>,
}

impl Fixture {
    pub fn new(variant: ModelVariant) -> Self {
        let raw = generate_synthetic(4, &SyntheticConfig::default(), SEED).expect("valid generator config");
        let ids: Vec<String> = raw.client_ids().map(str::to_string).collect();
        let lines = raw.iter().flat_map(|(_, l)| l.iter().map(String::as_str));
        let vocab = Vocab::build(lines, 4000, Tokenizer::Whitespace).expect("corpus has tokens");
        let data = FederatedDataset::encode(&raw, &ids, &vocab, MAX_SEQ_LEN);
        let sequences = data.iter().next().map(|(_, s)| s.to_vec()).expect("non-empty corpus");
        let model = ModelConfig { max_positions: MAX_SEQ_LEN, ..ModelConfig::new(variant, vocab.len()) };
        let params = LmParams::init(&model, &mut stream(SEED, Purpose::ModelInit, 0, 0)).to_tree();
        Self { model, params, sequences }
    }

    /// The first `n` sequences, repeated if the client holds fewer.
    pub fn batch(&self, n: usize) -> Vec<Vec<u32>> {
        self.sequences.iter().cycle().take(n).cloned().collect()
    }
}
