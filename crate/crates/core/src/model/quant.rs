//! Embedding bottleneck helpers: simulated low-precision formats, uniform
//! training noise and modular embedding slices.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum QuantFormat {
    Fp16,
    E4m3,
    E5m2,
    Int8Absmax,
}

struct Minifloat {
    exp_bits: u32,
    man_bits: u32,
    bias: i32,
    max: f64,
}

const FP16: Minifloat = Minifloat {
    exp_bits: 5,
    man_bits: 10,
    bias: 15,
    max: 65504.0,
};
// Finite-only variant: the all-ones exponent still encodes numbers.
const E4M3: Minifloat = Minifloat {
    exp_bits: 4,
    man_bits: 3,
    bias: 7,
    max: 448.0,
};
const E5M2: Minifloat = Minifloat {
    exp_bits: 5,
    man_bits: 2,
    bias: 15,
    max: 57344.0,
};

impl Minifloat {
    fn emin(&self) -> i32 {
        1 - self.bias
    }

    fn round(&self, x: f64) -> f64 {
        if x == 0.0 || x.is_nan() {
            return 0.0;
        }
        let a = x.abs();
        if a >= self.max {
            return self.max.copysign(x);
        }
        let e = (a.log2().floor() as i32).max(self.emin());
        let quantum = 2f64.powi(e - self.man_bits as i32);
        let r = ((a / quantum).round_ties_even() * quantum).min(self.max);
        r.copysign(x)
    }

    fn encode(&self, x: f64) -> u32 {
        let v = self.round(x);
        let sign = u32::from(v.is_sign_negative()) << (self.exp_bits + self.man_bits);
        let a = v.abs();
        if a == 0.0 {
            return sign;
        }
        let e = a.log2().floor() as i32;
        let (field, mant) = if e < self.emin() {
            (0, a / 2f64.powi(self.emin() - self.man_bits as i32))
        } else {
            ((e + self.bias) as u32, a / 2f64.powi(e - self.man_bits as i32) - 2f64.powi(self.man_bits as i32))
        };
        sign | (field << self.man_bits) | mant as u32
    }

    fn decode(&self, bits: u32) -> f64 {
        let sign = if bits >> (self.exp_bits + self.man_bits) & 1 == 1 { -1.0 } else { 1.0 };
        let field = (bits >> self.man_bits) & ((1 << self.exp_bits) - 1);
        let mant = (bits & ((1 << self.man_bits) - 1)) as f64;
        let m = self.man_bits as i32;
        let mag = if field == 0 {
            mant * 2f64.powi(self.emin() - m)
        } else {
            (2f64.powi(m) + mant) * 2f64.powi(field as i32 - self.bias - m)
        };
        sign * mag
    }
}

impl QuantFormat {
    pub const ALL: [QuantFormat; 4] = [QuantFormat::Fp16, QuantFormat::E4m3, QuantFormat::E5m2, QuantFormat::Int8Absmax];

    pub fn as_str(self) -> &'static str {
        match self {
            QuantFormat::Fp16 => "fp16",
            QuantFormat::E4m3 => "e4m3",
            QuantFormat::E5m2 => "e5m2",
            QuantFormat::Int8Absmax => "int8_absmax",
        }
    }

    /// Stored bits per activation.
    pub fn bits(self) -> usize {
        match self {
            QuantFormat::Fp16 => 16,
            _ => 8,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            QuantFormat::Fp16 => 1,
            QuantFormat::E4m3 => 2,
            QuantFormat::E5m2 => 3,
            QuantFormat::Int8Absmax => 4,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.code() == c)
    }

    fn minifloat(self) -> Option<&'static Minifloat> {
        match self {
            QuantFormat::Fp16 => Some(&FP16),
            QuantFormat::E4m3 => Some(&E4M3),
            QuantFormat::E5m2 => Some(&E5M2),
            QuantFormat::Int8Absmax => None,
        }
    }

    /// Largest finite magnitude (for int8, relative to the per-tensor scale).
    pub fn max_value(self) -> f64 {
        self.minifloat().map_or(127.0, |m| m.max)
    }
}

impl fmt::Display for QuantFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QuantFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown quantization format {s:?} (expected fp16, e4m3, e5m2, int8_absmax)")))
    }
}

fn absmax(values: &[f32]) -> f64 {
    values.iter().fold(0.0f64, |m, v| m.max((*v as f64).abs()))
}

/// Rounds values onto the format's grid and returns them at working precision.
pub fn quantize_embedding(values: &[f32], format: QuantFormat) -> Vec<f32> {
    match format.minifloat() {
        Some(m) => values.iter().map(|&v| m.round(v as f64) as f32).collect(),
        None => {
            let scale = absmax(values);
            if scale == 0.0 {
                return vec![0.0; values.len()];
            }
            values
                .iter()
                .map(|&v| {
                    let q = (v as f64 / scale * 127.0).round_ties_even().clamp(-127.0, 127.0);
                    (q * scale / 127.0) as f32
                })
                .collect()
        }
    }
}

/// Packed representation of a quantized embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedEmbedding {
    pub format: QuantFormat,
    /// Per-tensor scale, only meaningful for int8.
    pub scale: f32,
    pub codes: Vec<u32>,
}

impl PackedEmbedding {
    pub fn pack(values: &[f32], format: QuantFormat) -> Self {
        match format.minifloat() {
            Some(m) => Self {
                format,
                scale: 1.0,
                codes: values.iter().map(|&v| m.encode(v as f64)).collect(),
            },
            None => {
                let scale = absmax(values);
                let codes = values
                    .iter()
                    .map(|&v| {
                        let q = if scale == 0.0 {
                            0.0
                        } else {
                            (v as f64 / scale * 127.0).round_ties_even().clamp(-127.0, 127.0)
                        };
                        (q as i8) as u8 as u32
                    })
                    .collect();
                Self {
                    format,
                    scale: scale as f32,
                    codes,
                }
            }
        }
    }

    pub fn unpack(&self) -> Vec<f32> {
        match self.format.minifloat() {
            Some(m) => self.codes.iter().map(|&c| m.decode(c) as f32).collect(),
            None => self
                .codes
                .iter()
                .map(|&c| ((c as u8 as i8) as f64 * self.scale as f64 / 127.0) as f32)
                .collect(),
        }
    }
}

/// Draws `n` samples of `U(-q, q)`.
pub fn uniform_noise<R: Rng + ?Sized>(rng: &mut R, n: usize, q: f64) -> Vec<f64> {
    (0..n).map(|_| if q > 0.0 { rng.random_range(-q..q) } else { 0.0 }).collect()
}

/// Indices of the length-`s` modular slice for decoder position `n`.
///
/// `e[m..min(m+s, d)]` followed by the wrapped head `e[0..max(0, m+s-d)]`,
/// with `m = n mod d`. `middle_out` starts half a width further along.
pub fn unroll_indices(d: usize, n: usize, s: usize, middle_out: bool) -> Result<Vec<usize>> {
    if s == 0 || s > d {
        return Err(Error::Config(format!("unroll slice {s} must lie in 1..={d}")));
    }
    let m = if middle_out { (n + d / 2) % d } else { n % d };
    let mut idx: Vec<usize> = (m..(m + s).min(d)).collect();
    idx.extend(0..(m + s).saturating_sub(d));
    Ok(idx)
}

pub fn unroll_embedding<T: Copy>(e: &[T], n: usize, s: usize) -> Result<Vec<T>> {
    Ok(unroll_indices(e.len(), n, s, false)?.into_iter().map(|i| e[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_points_unchanged() {
        for f in [QuantFormat::Fp16, QuantFormat::E4m3, QuantFormat::E5m2] {
            for v in [0.5f32, -0.5, 1.0, 0.0, 2.0, -0.125] {
                assert_eq!(quantize_embedding(&[v], f), vec![v], "{f}");
            }
        }
        assert_eq!(quantize_embedding(&[1.0625f32], QuantFormat::E4m3), vec![1.0]);
        assert_eq!(quantize_embedding(&[1.1875f32], QuantFormat::E4m3), vec![1.25]);
    }

    #[test]
    fn saturation() {
        assert_eq!(quantize_embedding(&[1e6f32], QuantFormat::E4m3), vec![448.0]);
        assert_eq!(quantize_embedding(&[-1e6f32], QuantFormat::E5m2), vec![-57344.0]);
        assert_eq!(quantize_embedding(&[1e6f32], QuantFormat::Fp16), vec![65504.0]);
    }

    #[test]
    fn int8_absmax_keeps_extreme() {
        let v = [0.3f32, -1.7, 0.9, 1.2];
        let q = quantize_embedding(&v, QuantFormat::Int8Absmax);
        assert_eq!(q[1], -1.7);
        for (a, b) in v.iter().zip(&q) {
            assert!((a - b).abs() <= 1.7 / 127.0 / 2.0 + 1e-7);
        }
    }

    #[test]
    fn e5m2_grid_is_coarser_near_one() {
        // Enumerated spacing just above 1.0: 2^-3 for e4m3 and 2^-2 for e5m2.
        assert_eq!(E4M3.decode(E4M3.encode(1.0) + 1) - 1.0, 0.125);
        assert_eq!(E5M2.decode(E5M2.encode(1.0) + 1) - 1.0, 0.25);
    }

    #[test]
    fn pack_unpack_matches_quantize() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f32> = (0..300).map(|_| rng.random_range(-20.0..20.0)).collect();
        let mut v2 = v.clone();
        v2.extend([1e-7, -3e-5, 0.0, 500.0]);
        for f in QuantFormat::ALL {
            let p = PackedEmbedding::pack(&v2, f);
            assert_eq!(p.unpack(), quantize_embedding(&v2, f), "{f}");
            assert!(p.codes.iter().all(|&c| c < (1 << f.bits())));
        }
    }

    #[test]
    fn unroll_examples() {
        assert_eq!(unroll_indices(512, 0, 256, false).unwrap(), (0..256).collect::<Vec<_>>());
        assert_eq!(unroll_indices(512, 512, 256, false).unwrap(), unroll_indices(512, 0, 256, false).unwrap());
        let w = unroll_indices(512, 511, 256, false).unwrap();
        assert_eq!(w.len(), 256);
        assert_eq!(w[0], 511);
        assert_eq!(&w[1..], &(0..255).collect::<Vec<_>>()[..]);
        assert!(unroll_indices(8, 0, 9, false).is_err());
        assert_eq!(unroll_indices(8, 0, 4, true).unwrap(), vec![4, 5, 6, 7]);
    }
}
