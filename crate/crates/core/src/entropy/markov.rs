//! First-order Markov sources with analytic entropy rates, plug-in
//! estimation, and the train/test audit against a known source entropy.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{mean, std_err};
use crate::error::{Error, Result};

/// Token id of symbol 0; ids below are the specials.
pub const SYMBOL_OFFSET: u32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovSource {
    p: Vec<Vec<f64>>,
    pi: Vec<f64>,
    rate: f64,
}

impl MarkovSource {
    pub fn new(p: Vec<Vec<f64>>) -> Result<Self> {
        let n = p.len();
        if n == 0 {
            return Err(Error::Empty("transition matrix"));
        }
        for (i, row) in p.iter().enumerate() {
            if row.len() != n {
                return Err(Error::shape("transition matrix", &[n, row.len()], &[n, n]));
            }
            if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("row {i} of the transition matrix is not stochastic")));
            }
        }
        let pi = stationary(&p)?;
        let rate = pi
            .iter()
            .zip(&p)
            .map(|(w, row)| w * row.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum::<f64>())
            .sum();
        Ok(Self { p, pi, rate })
    }

    /// Independent uniform symbols.
    pub fn uniform(states: usize) -> Result<Self> {
        Self::new(vec![vec![1.0 / states as f64; states]; states])
    }

    /// Deterministic cycle through the states.
    pub fn cycle(states: usize) -> Result<Self> {
        Self::new((0..states).map(|i| (0..states).map(|j| f64::from(u8::from(j == (i + 1) % states))).collect()).collect())
    }

    /// Parses rows of whitespace- or comma-separated probabilities; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let row: std::result::Result<Vec<f64>, _> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::parse).collect();
            rows.push(row.map_err(|_| Error::Config(format!("markov spec: bad row {line:?}")))?);
        }
        Self::new(rows)
    }

    pub fn states(&self) -> usize {
        self.p.len()
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.p
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    /// Nats per symbol.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// A chain of `len` symbols started from the stationary distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, len: usize) -> Vec<usize> {
        let draw = |rng: &mut R, w: &[f64]| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, &x) in w.iter().enumerate() {
                acc += x;
                if u < acc {
                    return i;
                }
            }
            w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
        };
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        out.push(draw(rng, &self.pi));
        for _ in 1..len {
            let s = *out.last().unwrap();
            out.push(draw(rng, &self.p[s]));
        }
        out
    }
}

fn stationary(p: &[Vec<f64>]) -> Result<Vec<f64>> {
    // Solve (Pᵀ - I) π = 0 with the last equation replaced by Σπ = 1.
    let n = p.len();
    let mut a = DMatrix::from_fn(n, n, |i, j| p[j][i] - f64::from(u8::from(i == j)));
    let mut b = DVector::zeros(n);
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    b[n - 1] = 1.0;
    let pi = a.lu().solve(&b).ok_or_else(|| Error::Config("transition matrix has no unique stationary distribution".into()))?;
    let pi: Vec<f64> = pi.iter().map(|x| x.max(0.0)).collect();
    let z: f64 = pi.iter().sum();
    Ok(pi.into_iter().map(|x| x / z).collect())
}

/// `docs` independent chains of `len` symbols as token ids.
pub fn markov_corpus(source: &MarkovSource, docs: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..docs).map(|_| source.sample(&mut rng, len).into_iter().map(|s| s as u32 + SYMBOL_OFFSET).collect()).collect()
}

/// Plug-in conditional entropy H(X_t | X_{t-1}) from bigram counts, in
/// nats, with the standard error of the mean per-transition surprisal.
pub fn plug_in_rate(docs: &[Vec<u32>], states: usize) -> Result<(f64, f64)> {
    let mut counts = vec![vec![0u64; states]; states];
    let idx = |t: u32| -> Result<usize> {
        t.checked_sub(SYMBOL_OFFSET)
            .map(|s| s as usize)
            .filter(|&s| s < states)
            .ok_or(Error::Index {
                what: "markov symbol",
                index: t as usize,
                extent: states,
            })
    };
    for d in docs {
        for w in d.windows(2) {
            counts[idx(w[0])?][idx(w[1])?] += 1;
        }
    }
    let rows: Vec<u64> = counts.iter().map(|r| r.iter().sum()).collect();
    let mut surprisal = Vec::new();
    for d in docs {
        for w in d.windows(2) {
            let (a, b) = (idx(w[0])?, idx(w[1])?);
            surprisal.push(-(counts[a][b] as f64 / rows[a] as f64).ln());
        }
    }
    if surprisal.is_empty() {
        return Err(Error::Empty("transitions"));
    }
    Ok((mean(&surprisal), std_err(&surprisal)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub train_gap: f64,
    pub test_gap: f64,
    /// (train - H) + (test - H); nonnegative for iid splits.
    pub slack: f64,
    /// Allowed negative slack from estimation noise.
    pub tolerance: f64,
    /// Train loss is below the source entropy.
    pub below_entropy: bool,
    /// With train below H, the test excess covers the train deficit.
    pub lower_bound_holds: bool,
    pub pass: bool,
}

/// Checks cross-entropies on iid splits against a source entropy `h`,
/// allowing `2 * se` of noise.
pub fn generalization_audit(train_ce: f64, test_ce: f64, h: f64, se: f64) -> AuditVerdict {
    let (train_gap, test_gap) = (train_ce - h, test_ce - h);
    let slack = train_gap + test_gap;
    let tolerance = 2.0 * se.abs();
    let below_entropy = train_gap < 0.0;
    let lower_bound_holds = !below_entropy || train_gap >= -test_gap - tolerance;
    AuditVerdict {
        train_gap,
        test_gap,
        slack,
        tolerance,
        below_entropy,
        lower_bound_holds,
        pass: slack >= -tolerance && lower_bound_holds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_rates() {
        let u = MarkovSource::uniform(7).unwrap();
        assert!((u.rate() - 7f64.ln()).abs() < 1e-12);
        let c = MarkovSource::cycle(5).unwrap();
        assert_eq!(c.rate(), 0.0);
        assert!(c.stationary().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        let two = MarkovSource::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        // π = (5/6, 1/6)
        assert!((two.stationary()[0] - 5.0 / 6.0).abs() < 1e-12);
        let hb = |p: f64| -p * p.ln() - (1.0 - p) * (1.0 - p).ln();
        assert!((two.rate() - (5.0 / 6.0 * hb(0.1) + 1.0 / 6.0 * 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn stationary_is_fixed_point() {
        let s = MarkovSource::new(vec![vec![0.2, 0.5, 0.3], vec![0.0, 0.1, 0.9], vec![0.6, 0.4, 0.0]]).unwrap();
        let pi = s.stationary();
        for j in 0..3 {
            let v: f64 = (0..3).map(|i| pi[i] * s.transitions()[i][j]).sum();
            assert!((v - pi[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_non_stochastic() {
        assert!(MarkovSource::new(vec![vec![0.5, 0.4], vec![0.5, 0.5]]).is_err());
        assert!(MarkovSource::new(vec![vec![1.0]; 2]).is_err());
        assert!(MarkovSource::from_text("0.9 0.1\n0.5, x\n").is_err());
        let t = MarkovSource::from_text("# chain\n0.9 0.1\n0.5,0.5\n").unwrap();
        assert_eq!(t.states(), 2);
    }

    #[test]
    fn plug_in_matches_two_state_rate() {
        let s = MarkovSource::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let corpus = markov_corpus(&s, 1, 1_000_000, 42);
        let (h, se) = plug_in_rate(&corpus, 2).unwrap();
        assert!((h - s.rate()).abs() / s.rate() < 0.01, "{h} vs {}", s.rate());
        assert!(se > 0.0 && se < 1e-3);
    }

    #[test]
    fn sampling_is_seeded() {
        let s = MarkovSource::uniform(4).unwrap();
        assert_eq!(markov_corpus(&s, 3, 50, 1), markov_corpus(&s, 3, 50, 1));
        assert_ne!(markov_corpus(&s, 3, 50, 1), markov_corpus(&s, 3, 50, 2));
        assert!(markov_corpus(&s, 2, 100, 3).iter().flatten().all(|&t| (3..7).contains(&t)));
    }

    #[test]
    fn audit_examples() {
        let v = generalization_audit(0.4, 0.4, 0.4, 0.0);
        assert_eq!((v.slack, v.train_gap, v.test_gap), (0.0, 0.0, 0.0));
        assert!(v.pass);
        let v = generalization_audit(0.2, 0.7, 0.4, 0.0);
        assert!(v.below_entropy && v.lower_bound_holds && v.pass);
        let v = generalization_audit(0.1, 0.5, 0.4, 0.01);
        assert!(!v.lower_bound_holds && !v.pass);
        assert!(generalization_audit(0.39, 0.40, 0.4, 0.01).pass);
    }
}
