use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use super::{DataError, Vocab};
use crate::rng::{stream, Purpose};

/// Raw text per client, clients in first-appearance order, lines in file order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RawCorpus {
    clients: Vec<(String, Vec<String>)>,
    index: HashMap<String, usize>,
}

impl RawCorpus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, client: &str, line: impl Into<String>) {
        let slot = match self.index.get(client) {
            Some(i) => *i,
            None => {
                self.index.insert(client.to_string(), self.clients.len());
                self.clients.push((client.to_string(), Vec::new()));
                self.clients.len() - 1
            }
        };
        self.clients[slot].1.push(line.into());
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    pub fn client_ids(&self) -> impl Iterator<Item = &str> {
        self.clients.iter().map(|(id, _)| id.as_str())
    }

    pub fn lines(&self, client: &str) -> Option<&[String]> {
        self.index.get(client).map(|i| self.clients[*i].1.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[String])> {
        self.clients.iter().map(|(id, l)| (id.as_str(), l.as_slice()))
    }

    /// Writes the corpus in the partitioned `client_id<TAB>text` format.
    pub fn to_partitioned_string(&self) -> String {
        let mut out = String::new();
        for (id, lines) in &self.clients {
            for l in lines {
                out.push_str(id);
                out.push('\t');
                out.push_str(l);
                out.push('\n');
            }
        }
        out
    }
}

/// Parses the partitioned format: one `client_id<TAB>text` example per line.
pub fn parse_partitioned(text: &str) -> Result<RawCorpus, DataError> {
    let mut corpus = RawCorpus::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        let (id, body) = line.split_once('\t').ok_or_else(|| DataError::Malformed {
            line: n + 1,
            reason: "missing tab separator".into(),
        })?;
        if id.is_empty() {
            return Err(DataError::Malformed { line: n + 1, reason: "empty client id".into() });
        }
        corpus.push(id, body);
    }
    if corpus.num_clients() == 0 {
        return Err(DataError::EmptyFile);
    }
    Ok(corpus)
}

pub fn load_partitioned(path: &Path) -> Result<RawCorpus, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    parse_partitioned(&text)
}

/// Parameters of the synthetic federated corpus.
///
/// Each client's text comes from a mixture: with probability `1 - alpha` the
/// next word follows a sparse bigram chain shared by everyone, and with
/// probability `alpha` it is drawn from a client-specific unigram
/// distribution. `alpha = 0` makes clients identically distributed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub words: usize,
    pub successors: usize,
    pub min_sequences: usize,
    pub max_sequences: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub alpha: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { words: 60, successors: 3, min_sequences: 10, max_sequences: 30, min_len: 4, max_len: 16, alpha: 0.3 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::InvalidArgument(m.to_string()));
        if self.words < 2 || self.successors == 0 || self.successors > self.words {
            return bad("need words >= 2 and 1 <= successors <= words");
        }
        if self.min_sequences == 0 || self.min_sequences > self.max_sequences {
            return bad("need 1 <= min_sequences <= max_sequences");
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

fn zipf_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|r| 1.0 / r as f64).collect()
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

/// Seeded synthetic corpus with `n_clients` clients named `client00000`, ….
pub fn generate_synthetic(n_clients: usize, cfg: &SyntheticConfig, seed: u64) -> Result<RawCorpus, DataError> {
    cfg.validate()?;
    if n_clients == 0 {
        return Err(DataError::InvalidArgument("n_clients must be >= 1".into()));
    }
    let mut shared = stream(seed, Purpose::CorpusShared, 0, 0);
    let start = WeightedIndex::new(zipf_weights(cfg.words)).expect("positive weights");
    // Row w: a few favoured successors plus a thin uniform floor.
    let transitions: Vec<WeightedIndex<f64>> = (0..cfg.words)
        .map(|_| {
            let mut w = vec![0.02 / cfg.words as f64; cfg.words];
            let mut order: Vec<usize> = (0..cfg.words).collect();
            order.shuffle(&mut shared);
            for (rank, &next) in order.iter().take(cfg.successors).enumerate() {
                w[next] += 0.98 / (rank + 1) as f64;
            }
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let mut corpus = RawCorpus::new();
    for c in 0..n_clients {
        let mut rng = stream(seed, Purpose::CorpusClient, c as u64, 0);
        let mut personal = zipf_weights(cfg.words);
        personal.shuffle(&mut rng);
        let personal = WeightedIndex::new(personal).expect("positive weights");
        let id = format!("client{c:05}");
        let n_seq = rng.random_range(cfg.min_sequences..=cfg.max_sequences);
        for _ in 0..n_seq {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut prev = start.sample(&mut rng);
            let mut line = vec![word(prev)];
            for _ in 1..len {
                let personal_draw = rng.random::<f64>() < cfg.alpha;
                prev = if personal_draw { personal.sample(&mut rng) } else { transitions[prev].sample(&mut rng) };
                line.push(word(prev));
            }
            corpus.push(&id, line.join(" "));
        }
    }
    Ok(corpus)
}

/// Deterministically holds out `ceil(fraction * n)` clients (at least one when
/// `n >= 2` and `fraction > 0`). Returns `(train, eval)`, both sorted.
pub fn split_holdout(ids: &[String], fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let mut shuffled: Vec<String> = ids.to_vec();
    shuffled.sort();
    shuffled.shuffle(&mut stream(seed, Purpose::HoldoutSplit, 0, 0));
    let mut n_eval = (fraction * ids.len() as f64).ceil() as usize;
    if fraction > 0.0 && ids.len() >= 2 {
        n_eval = n_eval.clamp(1, ids.len() - 1);
    }
    let mut eval: Vec<String> = shuffled[..n_eval.min(ids.len())].to_vec();
    let mut train: Vec<String> = shuffled[n_eval.min(ids.len())..].to_vec();
    eval.sort();
    train.sort();
    (train, eval)
}

/// Encoded sequences per client. Every sequence has exactly `max_seq_len`
/// ids and at least one prediction target; clients left without sequences
/// are dropped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FederatedDataset {
    clients: BTreeMap<String, Vec<Vec<u32>>>,
}

impl FederatedDataset {
    pub fn encode(raw: &RawCorpus, clients: &[String], vocab: &Vocab, max_seq_len: usize) -> Self {
        let mut out = BTreeMap::new();
        for id in clients {
            let Some(lines) = raw.lines(id) else { continue };
            let seqs: Vec<Vec<u32>> = lines
                .iter()
                .map(|l| vocab.encode(l, max_seq_len))
                .filter(|s| s.iter().filter(|t| **t != super::PAD).count() >= 2)
                .collect();
            if !seqs.is_empty() {
                out.insert(id.clone(), seqs);
            }
        }
        Self { clients: out }
    }

    pub fn from_map(clients: BTreeMap<String, Vec<Vec<u32>>>) -> Self {
        Self { clients: clients.into_iter().filter(|(_, s)| !s.is_empty()).collect() }
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Client ids in sorted order.
    pub fn client_ids(&self) -> Vec<String> {
        self.clients.keys().cloned().collect()
    }

    pub fn get(&self, id: &str) -> Option<&[Vec<u32>]> {
        self.clients.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Vec<u32>])> {
        self.clients.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn num_sequences(&self) -> usize {
        self.clients.values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Tokenizer;

    #[test]
    fn two_clients_one_line_each() {
        let c = parse_partitioned("u1\thello world\nu2\tbye\n").unwrap();
        assert_eq!(c.num_clients(), 2);
        assert_eq!(c.lines("u1").unwrap(), &["hello world".to_string()]);
        assert_eq!(c.lines("u2").unwrap(), &["bye".to_string()]);
    }

    #[test]
    fn repeated_ids_append_in_order() {
        let c = parse_partitioned("u1\ta\nu2\tb\nu1\tc\n").unwrap();
        assert_eq!(c.lines("u1").unwrap(), &["a".to_string(), "c".to_string()]);
        assert_eq!(c.client_ids().collect::<Vec<_>>(), vec!["u1", "u2"]);
    }

    #[test]
    fn missing_tab_names_the_line() {
        let err = parse_partitioned("u1\ta\nno tab here\n").unwrap_err();
        assert!(matches!(err, DataError::Malformed { line: 2, .. }));
        assert!(err.to_string().contains("line 2"));
        assert!(matches!(parse_partitioned(""), Err(DataError::EmptyFile)));
    }

    #[test]
    fn load_from_disk_roundtrip() {
        let corpus = generate_synthetic(3, &SyntheticConfig::default(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.tsv");
        fs::write(&path, corpus.to_partitioned_string()).unwrap();
        assert_eq!(load_partitioned(&path).unwrap(), corpus);
        assert!(matches!(load_partitioned(&dir.path().join("missing")), Err(DataError::Io { .. })));
    }

    #[test]
    fn synthetic_is_deterministic_and_non_empty() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(100, &cfg, 5).unwrap();
        assert_eq!(a.num_clients(), 100);
        assert!(a.iter().all(|(_, lines)| !lines.is_empty()));
        assert_eq!(a, generate_synthetic(100, &cfg, 5).unwrap());
        assert_ne!(a, generate_synthetic(100, &cfg, 6).unwrap());
    }

    #[test]
    fn holdout_split_is_disjoint_and_deterministic() {
        let ids: Vec<String> = (0..20).map(|i| format!("c{i}")).collect();
        let (train, eval) = split_holdout(&ids, 0.1, 3);
        assert_eq!(eval.len(), 2);
        assert_eq!(train.len(), 18);
        assert!(eval.iter().all(|e| !train.contains(e)));
        assert_eq!((train, eval), split_holdout(&ids, 0.1, 3));
    }

    #[test]
    fn dataset_drops_targetless_sequences() {
        let raw = parse_partitioned("a\tx y\na\t\nb\t\n").unwrap();
        let v = Vocab::build(["x y"], 6, Tokenizer::Whitespace).unwrap();
        let ds = FederatedDataset::encode(&raw, &["a".into(), "b".into()], &v, 5);
        assert_eq!(ds.num_clients(), 1);
        assert_eq!(ds.get("a").unwrap().len(), 1);
    }

    fn token_counts(corpus: &RawCorpus, client: &str, words: usize) -> Vec<f64> {
        let mut counts = vec![0.0; words];
        for line in corpus.lines(client).unwrap() {
            for w in line.split_whitespace() {
                counts[w[1..].parse::<usize>().unwrap()] += 1.0;
            }
        }
        counts
    }

    /// Pearson chi-square homogeneity test between two count vectors, cells
    /// with tiny expectation merged into one.
    fn homogeneity_p_value(a: &[f64], b: &[f64]) -> f64 {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let (na, nb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let n = na + nb;
        let mut cells: Vec<(f64, f64)> = Vec::new();
        let mut rest = (0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            if (x + y) * na.min(nb) / n < 5.0 {
                rest = (rest.0 + x, rest.1 + y);
            } else {
                cells.push((*x, *y));
            }
        }
        if rest.0 + rest.1 > 0.0 {
            cells.push(rest);
        }
        let stat: f64 = cells
            .iter()
            .map(|(x, y)| {
                let col = x + y;
                let (ea, eb) = (col * na / n, col * nb / n);
                (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
            })
            .sum();
        let df = (cells.len() - 1) as f64;
        1.0 - ChiSquared::new(df).unwrap().cdf(stat)
    }

    #[test]
    fn iid_clients_share_a_token_distribution() {
        let cfg = SyntheticConfig { alpha: 0.0, min_sequences: 1500, max_sequences: 1500, ..Default::default() };
        let corpus = generate_synthetic(2, &cfg, 21).unwrap();
        let a = token_counts(&corpus, "client00000", cfg.words);
        let b = token_counts(&corpus, "client00001", cfg.words);
        assert!(a.iter().sum::<f64>() >= 1e4 && b.iter().sum::<f64>() >= 1e4);
        let p = homogeneity_p_value(&a, &b);
        assert!(p > 0.01, "p = {p}");

        let skewed = SyntheticConfig { alpha: 1.0, ..cfg };
        let corpus = generate_synthetic(2, &skewed, 21).unwrap();
        let a = token_counts(&corpus, "client00000", cfg.words);
        let b = token_counts(&corpus, "client00001", cfg.words);
        assert!(homogeneity_p_value(&a, &b) < 1e-6);
    }
}
