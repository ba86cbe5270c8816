//! Entropy accounting: bits per byte, amortized embedding cost, per-token
//! estimates, occlusion proxies, known-entropy Markov sources and the
//! train/test generalization audit.
//!
//! Everything is in nats internally; bits appear only at report boundaries.

mod markov;
mod per_token;
mod records;
pub mod stats;

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

pub use markov::{generalization_audit, markov_corpus, plug_in_rate, AuditVerdict, MarkovSource, SYMBOL_OFFSET};
pub use per_token::{
    causal_entropies, chain_rule_difference, occlusion_scores, occlusion_window, padded_window, second_order_entropies, sequence_entropy, single_model_entropy, two_model_entropy, window_losses, ConditionalTable, OcclusionMetric, TokenScorer,
};
pub use records::{EntropyRecord, Method, TSV_HEADER};

use crate::error::{Error, Result};
use crate::tokenizer::CorpusStats;

/// Bits per byte of a causal model with mean loss `mean_loss` (nats/token).
pub fn bpb_causal(mean_loss: f64, stats: &CorpusStats) -> Result<f64> {
    if stats.bytes == 0 {
        return Err(Error::Empty("corpus bytes"));
    }
    if !(mean_loss >= 0.0) {
        return Err(Error::Config(format!("loss {mean_loss} must be non-negative")));
    }
    Ok(stats.tokens as f64 / stats.bytes as f64 * mean_loss / LN_2)
}

/// Bits per byte spent on one `n_p * b_p`-bit embedding per `n_ctx` tokens.
pub fn amortized_bpb(n_p: usize, b_p: usize, n_ctx: usize, bytes_per_token: f64) -> f64 {
    (n_p * b_p) as f64 / (n_ctx as f64 * bytes_per_token)
}

/// The per-token loss equivalent of an amortized bits-per-byte figure.
pub fn amortized_loss(bpb_a: f64, bytes_per_token: f64) -> f64 {
    bpb_a * LN_2 * bytes_per_token
}

/// Embedding and residual costs of a corpus under one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Mean cross-entropy of predicted tokens, nats/token.
    pub raw_loss: f64,
    /// Embedding bits per token expressed in nats.
    pub amortized_loss: f64,
    pub total_loss: f64,
    pub bpb_a: f64,
    pub bpb: f64,
    pub n_p: usize,
    pub b_p: usize,
    pub n_ctx: usize,
    /// Embeddings sent (one per window); 0 for causal models.
    pub windows: usize,
    pub tokens: u64,
    pub bytes: u64,
    pub bytes_per_token: f64,
}

impl CompressionReport {
    /// `windows` embeddings of `n_p * b_p` bits each over `stats.tokens` tokens.
    pub fn new(raw_loss: f64, n_p: usize, b_p: usize, n_ctx: usize, windows: usize, stats: &CorpusStats) -> Result<Self> {
        if stats.tokens == 0 || stats.bytes == 0 {
            return Err(Error::Empty("corpus"));
        }
        let bpt = stats.bytes_per_token();
        let embed_bits = (windows * n_p * b_p) as f64;
        let amortized_loss = embed_bits * LN_2 / stats.tokens as f64;
        let bpb_a = embed_bits / stats.bytes as f64;
        let total_loss = raw_loss + amortized_loss;
        Ok(Self {
            raw_loss,
            amortized_loss,
            total_loss,
            bpb_a,
            bpb: bpb_causal(total_loss, stats)?,
            n_p,
            b_p,
            n_ctx,
            windows,
            tokens: stats.tokens,
            bytes: stats.bytes,
            bytes_per_token: bpt,
        })
    }

    /// Largest discrepancy between stored and recomputed derived fields.
    pub fn consistency_error(&self) -> f64 {
        let ratio = self.tokens as f64 / self.bytes as f64;
        let total = ratio * (self.raw_loss + self.amortized_loss) / LN_2;
        let la = amortized_loss(self.bpb_a, self.bytes_per_token);
        [
            (total - self.bpb).abs(),
            (self.raw_loss + self.amortized_loss - self.total_loss).abs(),
            (la - self.amortized_loss).abs(),
            (1.0 / self.bytes_per_token - ratio).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_bpb_examples() {
        let one = CorpusStats::new(100, 100).unwrap();
        assert!((bpb_causal(LN_2, &one).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(bpb_causal(0.0, &one).unwrap(), 0.0);
        let fw = CorpusStats::new(100, 392).unwrap();
        // 2.6 / 3.92 / ln 2, by hand: 0.95688
        assert!((bpb_causal(2.6, &fw).unwrap() - 0.9569).abs() < 1e-3);
        assert!(bpb_causal(-1.0, &fw).is_err());
    }

    #[test]
    fn amortized_examples() {
        assert!((amortized_bpb(128, 8, 512, 3.92) - 0.510).abs() < 1e-3);
        assert!((amortized_loss(0.51, 3.92) - 1.386).abs() < 1e-3);
        assert!((amortized_bpb(1024, 4, 512, 3.92) - 2.04).abs() < 1e-2);
        let a = amortized_bpb(64, 8, 1024, 3.92);
        assert!((amortized_loss(a, 3.92) - 0.347).abs() < 1e-3);
        assert_eq!(amortized_bpb(64, 0, 1024, 3.92), 0.0);
        assert_eq!(amortized_loss(0.0, 3.92), 0.0);
    }

    #[test]
    fn report_fields_recompute() {
        let stats = CorpusStats::new(1024 * 10, 40_141).unwrap();
        let r = CompressionReport::new(2.1, 64, 8, 1024, 10, &stats).unwrap();
        assert!(r.consistency_error() < 1e-9);
        assert!((r.amortized_loss - 64.0 * 8.0 * LN_2 / 1024.0).abs() < 1e-12);
        let none = CompressionReport::new(2.1, 64, 0, 1024, 10, &stats).unwrap();
        assert_eq!(none.total_loss, 2.1);
        let back: CompressionReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
