//! Per-token entropy estimates from causal and entropy estimation models.
//!
//! Every window handed to a scorer is left-padded; chunked estimates keep at
//! least one leading pad so the first real token of a chunk is predicted
//! from the pad position.

use std::collections::HashMap;

use super::CompressionReport;
use crate::error::{Error, Result};
use crate::model::{Batch, Family, ForwardOpts, Model};
use crate::tensor::Tape;
use crate::tokenizer::{CorpusStats, PAD};

/// Windows per forward pass in the batched estimators.
const BATCH: usize = 16;

/// Anything that assigns a loss to each predicted token of a window.
pub trait TokenScorer {
    /// Longest window accepted.
    fn context(&self) -> usize;

    /// Loss (nats) of every predicted token, indexed by its position in the
    /// row-major `(batch, seq)` block; NaN where nothing is predicted.
    fn position_losses(&self, tokens: &[u32], batch: usize) -> Result<Vec<f64>>;
}

/// Position-indexed token losses of a model under explicit forward options.
pub fn window_losses(model: &Model<f32>, tokens: &[u32], batch: usize, opts: &ForwardOpts<'_>) -> Result<Vec<f64>> {
    if model.config().family == Family::SecondOrder {
        return Err(Error::Family("second-order models do not predict tokens".into()));
    }
    let seq = tokens.len() / batch.max(1);
    let b = Batch::new(tokens, batch, seq)?;
    let mut tape = Tape::inference();
    let bound = model.bind(&mut tape, false);
    let out = model.forward(&mut tape, &bound, &b, opts)?;
    let ce = tape.cross_entropy(out.logits, &out.targets)?;
    let ce = tape.value(ce).data();
    let mut losses = vec![f64::NAN; tokens.len()];
    for (r, t) in out.targets.iter().enumerate() {
        if t.is_some() {
            let p = model.predicted_position(r, seq).expect("token-predicting family");
            losses[p] = ce[r] as f64;
        }
    }
    Ok(losses)
}

impl TokenScorer for Model<f32> {
    fn context(&self) -> usize {
        self.config().n_ctx
    }

    fn position_losses(&self, tokens: &[u32], batch: usize) -> Result<Vec<f64>> {
        window_losses(self, tokens, batch, &ForwardOpts::default())
    }
}

/// The `n`-token window ending at `doc[end]`, left-padded, holding at
/// least `min_pad` pads.
pub fn padded_window(doc: &[u32], end: usize, n: usize, min_pad: usize) -> Vec<u32> {
    let keep = (end + 1).min(n.saturating_sub(min_pad));
    let mut w = vec![PAD; n - keep];
    w.extend_from_slice(&doc[end + 1 - keep..=end]);
    w
}

fn nan_sum(xs: &[f64]) -> f64 {
    xs.iter().filter(|x| !x.is_nan()).sum()
}

/// Total loss of the longer stream minus that of the shorter one; NaN
/// entries (unpredicted positions) count as zero.
pub fn chain_rule_difference(longer: &[f64], shorter: &[f64]) -> f64 {
    nan_sum(longer) - nan_sum(shorter)
}

fn check_doc(doc: &[u32]) -> Result<()> {
    if doc.contains(&PAD) {
        return Err(Error::Config("document contains the pad token".into()));
    }
    Ok(())
}

/// Position losses of each window, scored in batches.
fn window_losses_batched<S: TokenScorer + ?Sized>(scorer: &S, windows: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.len());
    for group in windows.chunks(BATCH) {
        let n = group[0].len();
        let flat: Vec<u32> = group.iter().flatten().copied().collect();
        let l = scorer.position_losses(&flat, group.len())?;
        out.extend(l.chunks(n).map(|c| c.to_vec()));
    }
    Ok(out)
}

/// Splits a document into chunks of `n - 1` tokens, each behind one pad.
fn chunk_windows(doc: &[u32], n: usize) -> Vec<(usize, Vec<u32>)> {
    let step = n.saturating_sub(1).max(1);
    (0..doc.len())
        .step_by(step)
        .map(|s| {
            let end = (s + step).min(doc.len());
            let mut w = vec![PAD; n - (end - s)];
            w.extend_from_slice(&doc[s..end]);
            (s, w)
        })
        .collect()
}

/// Loss of every token of `doc`, from consecutive chunks of `n_ctx - 1`
/// tokens. For causal models these are the per-token conditional entropy
/// estimates; for entropy estimation models the residual code lengths.
pub fn causal_entropies<S: TokenScorer + ?Sized>(scorer: &S, doc: &[u32]) -> Result<Vec<f64>> {
    check_doc(doc)?;
    let n = scorer.context();
    let chunks = chunk_windows(doc, n);
    let mut out = vec![f64::NAN; doc.len()];
    for group in chunks.chunks(BATCH) {
        let flat: Vec<u32> = group.iter().flat_map(|(_, w)| w.iter().copied()).collect();
        let l = scorer.position_losses(&flat, group.len())?;
        for (g, (start, w)) in group.iter().enumerate() {
            let pads = w.iter().take_while(|&&t| t == PAD).count();
            for p in pads..n {
                out[start + p - pads] = l[g * n + p];
            }
        }
    }
    Ok(out)
}

/// Entropies predicted by a second-order model for every token of `doc`;
/// `shifted` reads each token's prediction from the row before it.
pub fn second_order_entropies(model: &Model<f32>, doc: &[u32], shifted: bool) -> Result<Vec<f64>> {
    check_doc(doc)?;
    if model.config().family != Family::SecondOrder {
        return Err(Error::Family(format!("expected a second-order model, not {}", model.config().family)));
    }
    let n = model.config().n_ctx;
    let chunks = chunk_windows(doc, n);
    let mut out = vec![f64::NAN; doc.len()];
    let opts = ForwardOpts {
        shifted,
        ..Default::default()
    };
    for group in chunks.chunks(BATCH) {
        let flat: Vec<u32> = group.iter().flat_map(|(_, w)| w.iter().copied()).collect();
        let b = Batch::new(&flat, group.len(), n)?;
        let mut tape = Tape::inference();
        let bound = model.bind(&mut tape, false);
        let o = model.forward(&mut tape, &bound, &b, &opts)?;
        let pred = tape.value(o.logits).data();
        for (r, t) in o.targets.iter().enumerate() {
            if let Some(pos) = *t {
                let (g, p) = (pos / n, pos % n);
                let (start, w) = &group[g];
                let pads = w.iter().take_while(|&&t| t == PAD).count();
                out[start + p - pads] = pred[r] as f64;
            }
        }
    }
    Ok(out)
}

/// Corpus-level cost of a model: mean residual loss plus one `d_e * b_p`
/// bit embedding per chunk for models with an encoder.
pub fn sequence_entropy(model: &Model<f32>, docs: &[Vec<u32>], bytes: u64) -> Result<CompressionReport> {
    let cfg = model.config();
    if cfg.family == Family::SecondOrder {
        return Err(Error::Family("second-order models have no sequence entropy".into()));
    }
    let mut losses = Vec::new();
    let mut windows = 0;
    for d in docs {
        losses.extend(causal_entropies(model, d)?);
        windows += chunk_windows(d, cfg.n_ctx).len();
    }
    if losses.iter().any(|l| l.is_nan()) {
        return Err(Error::Config("some tokens received no prediction".into()));
    }
    let stats = CorpusStats::new(losses.len() as u64, bytes)?;
    let (n_p, b_p) = if cfg.has_encoder() { (cfg.d_e, cfg.b_p) } else { (0, 0) };
    CompressionReport::new(super::stats::mean(&losses), n_p, b_p, cfg.n_ctx, if n_p > 0 { windows } else { 0 }, &stats)
}

/// Chain-rule estimate of each token's conditional entropy from models with
/// contexts `n` (`theta1`) and `n + 1` (`theta2`): the window of `n + 1`
/// tokens ending at the token, minus the same window without it.
pub fn two_model_entropy<A: TokenScorer + ?Sized, B: TokenScorer + ?Sized>(theta1: &A, theta2: &B, doc: &[u32]) -> Result<Vec<f64>> {
    check_doc(doc)?;
    let (n1, n2) = (theta1.context(), theta2.context());
    if n2 != n1 + 1 {
        return Err(Error::Config(format!("two-model estimation needs contexts n and n+1, got {n1} and {n2}")));
    }
    let w2: Vec<Vec<u32>> = (0..doc.len()).map(|j| padded_window(doc, j, n2, 0)).collect();
    let w1: Vec<Vec<u32>> = w2.iter().map(|w| w[..n1].to_vec()).collect();
    let s2 = window_losses_batched(theta2, &w2)?;
    let s1 = window_losses_batched(theta1, &w1)?;
    Ok(s2.iter().zip(&s1).map(|(a, b)| chain_rule_difference(a, b)).collect())
}

/// Single-model estimate: a window ending at the token, minus the same
/// window shifted right behind an extra pad.
pub fn single_model_entropy<S: TokenScorer + ?Sized>(theta: &S, doc: &[u32]) -> Result<Vec<f64>> {
    check_doc(doc)?;
    let n = theta.context();
    if n < 2 {
        return Err(Error::Config("single-model estimation needs n_ctx >= 2".into()));
    }
    let a: Vec<Vec<u32>> = (0..doc.len()).map(|j| padded_window(doc, j, n, 1)).collect();
    let b: Vec<Vec<u32>> = a
        .iter()
        .map(|w| {
            let mut s = vec![PAD];
            s.extend_from_slice(&w[..n - 1]);
            s
        })
        .collect();
    let sa = window_losses_batched(theta, &a)?;
    let sb = window_losses_batched(theta, &b)?;
    Ok(sa.iter().zip(&sb).map(|(x, y)| chain_rule_difference(x, y)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OcclusionMetric {
    /// Manhattan distance between clean and occluded logits, min-max
    /// normalized per window over non-pad inputs.
    L1,
    /// One minus cosine similarity; not normalized.
    Cosine,
}

/// Change in an entropy estimation model's logits when its embedding is
/// removed, attributed to each predicted token of one window. NaN where the
/// input row is a pad.
pub fn occlusion_window(model: &Model<f32>, window: &[u32], metric: OcclusionMetric) -> Result<Vec<f64>> {
    if model.config().family != Family::Eem {
        return Err(Error::Family(format!("occlusion needs an eem model, not {}", model.config().family)));
    }
    if window.iter().all(|&t| t == PAD) {
        return Err(Error::Empty("non-pad tokens in occlusion sample"));
    }
    let b = Batch::single(window)?;
    let run = |occlude: bool| -> Result<Vec<f32>> {
        let mut tape = Tape::inference();
        let bound = model.bind(&mut tape, false);
        let out = model.forward(
            &mut tape,
            &bound,
            &b,
            &ForwardOpts {
                occlude,
                ..Default::default()
            },
        )?;
        Ok(tape.take_value(out.logits).into_data())
    };
    let (clean, occ) = (run(false)?, run(true)?);
    let v = model.config().vocab;
    let n = window.len();
    let mut scores = vec![f64::NAN; n];
    for r in 0..n - 1 {
        if window[r] == PAD || window[r + 1] == PAD {
            continue;
        }
        let (y, z) = (&clean[r * v..(r + 1) * v], &occ[r * v..(r + 1) * v]);
        scores[r + 1] = match metric {
            OcclusionMetric::L1 => y.iter().zip(z).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum(),
            OcclusionMetric::Cosine => cosine_distance(y, z),
        };
    }
    if metric == OcclusionMetric::L1 {
        minmax_normalize(&mut scores);
    }
    Ok(scores)
}

pub(crate) fn cosine_distance(y: &[f32], z: &[f32]) -> f64 {
    let dot: f64 = y.iter().zip(z).map(|(a, b)| *a as f64 * *b as f64).sum();
    let ny: f64 = y.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    let nz: f64 = z.iter().map(|a| (*a as f64).powi(2)).sum::<f64>().sqrt();
    if ny == 0.0 || nz == 0.0 {
        return if ny == nz { 0.0 } else { 1.0 };
    }
    1.0 - dot / (ny * nz)
}

/// Linear min-max scaling of the finite entries to [0, 1]; NaN entries are
/// ignored for both extremes.
pub(crate) fn minmax_normalize(xs: &mut [f64]) {
    let lo = xs.iter().filter(|x| !x.is_nan()).fold(f64::INFINITY, |a, &b| a.min(b));
    let hi = xs.iter().filter(|x| !x.is_nan()).fold(0.0f64, |a, &b| a.max(b));
    let span = hi - lo;
    for x in xs.iter_mut().filter(|x| !x.is_nan()) {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.0 };
    }
}

/// Occlusion scores for every token of a document, chunked like
/// [`causal_entropies`].
pub fn occlusion_scores(model: &Model<f32>, doc: &[u32], metric: OcclusionMetric) -> Result<Vec<f64>> {
    check_doc(doc)?;
    if doc.is_empty() {
        return Err(Error::Empty("document"));
    }
    let n = model.config().n_ctx;
    let mut out = vec![f64::NAN; doc.len()];
    for (start, w) in chunk_windows(doc, n) {
        let pads = w.iter().take_while(|&&t| t == PAD).count();
        if pads == n - 1 {
            continue;
        }
        let s = occlusion_window(model, &w, metric)?;
        for p in pads..n {
            out[start + p - pads] = s[p];
        }
    }
    Ok(out)
}

/// An explicit conditional distribution over short sequences, derived from
/// a joint table. Serves as an exactly known scorer.
#[derive(Clone, Debug)]
pub struct ConditionalTable {
    n_ctx: usize,
    symbols: Vec<u32>,
    /// Marginal probability of every prefix.
    prefix: HashMap<Vec<u32>, f64>,
}

impl ConditionalTable {
    /// `joint[k]` is the probability of the `len`-symbol sequence whose
    /// digits in base `symbols.len()` (first symbol most significant) are `k`.
    pub fn from_joint(symbols: &[u32], len: usize, joint: &[f64], n_ctx: usize) -> Result<Self> {
        let v = symbols.len();
        if joint.len() != v.pow(len as u32) {
            return Err(Error::shape("joint table", &[joint.len()], &[v, len]));
        }
        let total: f64 = joint.iter().sum();
        if (total - 1.0).abs() > 1e-9 || joint.iter().any(|&p| !(p > 0.0)) {
            return Err(Error::Config("joint table must be positive and sum to 1".into()));
        }
        let mut prefix = HashMap::new();
        for (k, &p) in joint.iter().enumerate() {
            let seq = Self::decode_index(symbols, len, k);
            for l in 0..=len {
                *prefix.entry(seq[..l].to_vec()).or_insert(0.0) += p;
            }
        }
        Ok(Self {
            n_ctx,
            symbols: symbols.to_vec(),
            prefix,
        })
    }

    pub fn decode_index(symbols: &[u32], len: usize, mut k: usize) -> Vec<u32> {
        let v = symbols.len();
        let mut seq = vec![0; len];
        for i in (0..len).rev() {
            seq[i] = symbols[k % v];
            k /= v;
        }
        seq
    }

    pub fn symbols(&self) -> &[u32] {
        &self.symbols
    }

    /// Probability of a prefix.
    pub fn prob(&self, seq: &[u32]) -> f64 {
        self.prefix.get(seq).copied().unwrap_or(0.0)
    }
}

impl TokenScorer for ConditionalTable {
    fn context(&self) -> usize {
        self.n_ctx
    }

    fn position_losses(&self, tokens: &[u32], batch: usize) -> Result<Vec<f64>> {
        let seq = tokens.len() / batch.max(1);
        let mut out = vec![f64::NAN; tokens.len()];
        for (b, w) in tokens.chunks(seq).enumerate() {
            let pads = w.iter().take_while(|&&t| t == PAD).count();
            for p in pads.max(1)..seq {
                let ctx = &w[pads..p];
                let (num, den) = (self.prob(&w[pads..=p]), self.prob(ctx));
                if num == 0.0 || den == 0.0 {
                    return Err(Error::Config(format!("sequence {:?} is outside the table", &w[pads..=p])));
                }
                out[b * seq + p] = -(num / den).ln();
            }
        }
        Ok(out)
    }
}
