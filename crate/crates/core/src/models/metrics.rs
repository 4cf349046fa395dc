//! Cross-entropy, perplexity and next-token accuracy.
//!
//! Padding never counts. The loss used for training averages over every
//! non-pad target; reported perplexity and accuracy additionally discount
//! end-of-sequence targets, and in [`MetricMode::InVocab`] also
//! out-of-vocabulary targets.

use serde::{Deserialize, Serialize};

use crate::autodiff::{log_sum_exp, Tensor};
use crate::data::{EOS, OOV, PAD};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    /// Discount end-of-sequence targets.
    #[default]
    Standard,
    /// Discount end-of-sequence and out-of-vocabulary targets.
    InVocab,
}

/// Additive token statistics; merge across batches and clients, then derive
/// the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenCounts {
    /// Non-pad targets.
    pub nonpad: u64,
    /// Targets that count toward metrics.
    pub counted: u64,
    /// Counted targets whose argmax prediction is correct.
    pub correct: u64,
    /// Cross-entropy summed over non-pad targets.
    pub xent_nonpad: f64,
    /// Cross-entropy summed over counted targets.
    pub xent_counted: f64,
}

impl TokenCounts {
    pub fn merge(&mut self, other: &TokenCounts) {
        self.nonpad += other.nonpad;
        self.counted += other.counted;
        self.correct += other.correct;
        self.xent_nonpad += other.xent_nonpad;
        self.xent_counted += other.xent_counted;
    }

    /// Mean cross-entropy over non-pad targets (0 when there are none).
    pub fn mean_xent(&self) -> f64 {
        if self.nonpad == 0 { 0.0 } else { self.xent_nonpad / self.nonpad as f64 }
    }

    /// Mean cross-entropy over counted targets (0 when there are none).
    pub fn counted_loss(&self) -> f64 {
        if self.counted == 0 { 0.0 } else { self.xent_counted / self.counted as f64 }
    }

    pub fn perplexity(&self) -> f64 {
        self.counted_loss().exp()
    }

    /// Fraction of counted targets predicted correctly; 0 when nothing counts.
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 { 0.0 } else { self.correct as f64 / self.counted as f64 }
    }
}

fn is_counted(target: u32, mode: MetricMode) -> bool {
    match mode {
        MetricMode::Standard => target != PAD && target != EOS,
        MetricMode::InVocab => target != PAD && target != EOS && target != OOV,
    }
}

pub(crate) fn count_tokens(logits: &Tensor, targets: &[u32], mode: MetricMode) -> TokenCounts {
    let (rows, _) = logits.dims2().expect("logits matrix");
    assert_eq!(rows, targets.len(), "one target per logits row");
    let mut c = TokenCounts::default();
    for (r, &t) in targets.iter().enumerate() {
        if t == PAD {
            continue;
        }
        let row = logits.row(r);
        let xent = log_sum_exp(row) - row[t as usize];
        c.nonpad += 1;
        c.xent_nonpad += xent;
        if is_counted(t, mode) {
            c.counted += 1;
            c.xent_counted += xent;
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (j, v)| if *v > row[best] { j } else { best });
            if argmax == t as usize {
                c.correct += 1;
            }
        }
    }
    c
}

/// Mean non-pad cross-entropy of `logits` (`rows × vocab`) against `targets`,
/// with the full token counts.
pub fn loss_and_metrics(logits: &Tensor, targets: &[u32], mode: MetricMode) -> (f64, TokenCounts) {
    let c = count_tokens(logits, targets, mode);
    (c.mean_xent(), c)
}
