//! Fixed-length, left-padded training windows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::PAD;

/// Documents cut into `n_ctx` windows. The last piece of each document is
/// left-padded. Optional per-token entropy targets ride along (NaN where
/// unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct Windows {
    n_ctx: usize,
    tokens: Vec<u32>,
    entropy: Option<Vec<f32>>,
    /// `(document, first token index)` of each window's real tokens.
    origin: Vec<(usize, usize)>,
}

impl Windows {
    pub fn from_documents(docs: &[Vec<u32>], n_ctx: usize) -> Result<Self> {
        Self::build(docs, None, n_ctx)
    }

    /// `entropy[d][i]` is the target for token `i` of document `d`.
    pub fn with_entropy(docs: &[Vec<u32>], entropy: &[Vec<f64>], n_ctx: usize) -> Result<Self> {
        if docs.len() != entropy.len() || docs.iter().zip(entropy).any(|(d, e)| d.len() != e.len()) {
            return Err(Error::Config("entropy targets do not line up with the documents".into()));
        }
        Self::build(docs, Some(entropy), n_ctx)
    }

    fn build(docs: &[Vec<u32>], entropy: Option<&[Vec<f64>]>, n_ctx: usize) -> Result<Self> {
        if n_ctx == 0 {
            return Err(Error::Config("n_ctx must be positive".into()));
        }
        let mut tokens = Vec::new();
        let mut ent = entropy.map(|_| Vec::new());
        let mut origin = Vec::new();
        for (d, doc) in docs.iter().enumerate() {
            if doc.contains(&PAD) {
                return Err(Error::Config(format!("document {d} contains the pad token")));
            }
            for start in (0..doc.len()).step_by(n_ctx) {
                let end = (start + n_ctx).min(doc.len());
                let pad = n_ctx - (end - start);
                tokens.extend(std::iter::repeat_n(PAD, pad));
                tokens.extend_from_slice(&doc[start..end]);
                if let (Some(out), Some(e)) = (ent.as_mut(), entropy) {
                    out.extend(std::iter::repeat_n(f32::NAN, pad));
                    out.extend(e[d][start..end].iter().map(|&x| x as f32));
                }
                origin.push((d, start));
            }
        }
        Ok(Self {
            n_ctx,
            tokens,
            entropy: ent,
            origin,
        })
    }

    pub fn n_ctx(&self) -> usize {
        self.n_ctx
    }

    pub fn len(&self) -> usize {
        self.origin.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn window(&self, i: usize) -> &[u32] {
        &self.tokens[i * self.n_ctx..(i + 1) * self.n_ctx]
    }

    pub fn entropy(&self) -> Option<&[f32]> {
        self.entropy.as_deref()
    }

    pub fn origin(&self, i: usize) -> (usize, usize) {
        self.origin[i]
    }

    /// Non-pad tokens over all windows.
    pub fn token_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t != PAD).count()
    }

    /// Keeps the windows listed in `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let n = self.n_ctx;
        Self {
            n_ctx: n,
            tokens: idx.iter().flat_map(|&i| self.window(i).iter().copied()).collect(),
            entropy: self.entropy.as_ref().map(|e| idx.iter().flat_map(|&i| e[i * n..(i + 1) * n].iter().copied()).collect()),
            origin: idx.iter().map(|&i| self.origin[i]).collect(),
        }
    }

    /// Gathers windows `idx` into one row-major token block and its targets.
    pub fn gather(&self, idx: &[usize]) -> (Vec<u32>, Option<Vec<f32>>) {
        let s = self.subset(idx);
        (s.tokens, s.entropy)
    }
}

/// Window indices of the `step`-th batch: epochs are independent seeded
/// shuffles, so any step can be reproduced without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, step: usize, seed: u64) -> Vec<usize> {
    let mut out = Vec::with_capacity(batch);
    let mut pos = step * batch;
    let mut cached: Option<(usize, Vec<usize>)> = None;
    while out.len() < batch {
        let epoch = pos / n;
        if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0xA076_1D64_78BD_642F));
            perm.shuffle(&mut rng);
            cached = Some((epoch, perm));
        }
        out.push(cached.as_ref().expect("epoch permutation").1[pos % n]);
        pos += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cut_and_pad() {
        let docs = vec![vec![5, 6, 7, 8, 9], vec![3]];
        let w = Windows::from_documents(&docs, 3).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.window(0), &[5, 6, 7]);
        assert_eq!(w.window(1), &[PAD, 8, 9]);
        assert_eq!(w.window(2), &[PAD, PAD, 3]);
        assert_eq!(w.origin(1), (0, 3));
        assert_eq!(w.token_count(), 6);
    }

    #[test]
    fn entropy_follows_tokens() {
        let docs = vec![vec![5, 6, 7, 8]];
        let e = vec![vec![0.1, 0.2, 0.3, 0.4]];
        let w = Windows::with_entropy(&docs, &e, 3).unwrap();
        let ent = w.entropy().unwrap();
        assert_eq!(&ent[..3], &[0.1, 0.2, 0.3]);
        assert!(ent[3].is_nan() && ent[4].is_nan());
        assert_eq!(ent[5], 0.4);
        let (t, e2) = w.gather(&[1]);
        assert_eq!(t, vec![PAD, PAD, 8]);
        assert_eq!(e2.unwrap()[2], 0.4);
        assert!(Windows::with_entropy(&docs, &[vec![0.0]], 3).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 10;
        let mut seen: Vec<usize> = (0..5).flat_map(|s| batch_indices(n, 2, s, 7)).collect();
        seen.sort();
        assert_eq!(seen, (0..n).collect::<Vec<_>>());
        assert_eq!(batch_indices(n, 3, 4, 7), batch_indices(n, 3, 4, 7));
        assert_ne!(batch_indices(n, 10, 0, 7), batch_indices(n, 10, 1, 7));
    }
}
