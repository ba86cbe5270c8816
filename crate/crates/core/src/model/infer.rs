//! Position-by-position decoding with cached keys/values (transformer) or
//! cached mixer inputs. Encoder and decoder of the codec both drive this
//! path, so the floating-point results agree bit for bit.

use super::{Backbone, Family, ForwardOpts, Introduction, Model, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::kernels::{rmsnorm_rows, rotary_tables, rotate_head, silu};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::tokenizer::PAD;

/// Row vector times matrix, accumulated row by row. Packing a GEMM for a
/// single row costs more than the product.
fn vecmat(x: &[f32], w: &Tensor<f32>) -> Vec<f32> {
    let n = w.shape()[1];
    let mut out = vec![0.0f32; n];
    for (xi, row) in x.iter().zip(w.data().chunks_exact(n)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
    out
}

fn rmsnorm(x: &[f32], gain: &Tensor<f32>) -> Vec<f32> {
    rmsnorm_rows(x, gain.data(), NORM_EPS).0
}

struct Layer<'m> {
    norm1: &'m Tensor<f32>,
    norm2: &'m Tensor<f32>,
    w1: &'m Tensor<f32>,
    w2: &'m Tensor<f32>,
    mix: Mix<'m>,
    /// Cached keys and values, or conv inputs (in `keys`).
    keys: Vec<f32>,
    values: Vec<f32>,
}

enum Mix<'m> {
    Attn {
        wq: &'m Tensor<f32>,
        wk: &'m Tensor<f32>,
        wv: &'m Tensor<f32>,
        wo: &'m Tensor<f32>,
    },
    Conv {
        conv: &'m Tensor<f32>,
        conv_in: Option<&'m Tensor<f32>>,
        conv_out: Option<&'m Tensor<f32>>,
    },
}

/// Incremental decoder state for one window.
pub struct Session<'m> {
    model: &'m Model<f32>,
    layers: Vec<Layer<'m>>,
    valid: Vec<bool>,
    /// Per-position additive input (`embed_project`) or concat features (`embed_concat`).
    memory: Option<Vec<f32>>,
    rope: Option<(Vec<f64>, Vec<f64>)>,
    logits: Vec<f32>,
}

impl<'m> Session<'m> {
    /// Starts a window. Entropy estimation models need the compressed
    /// embedding (`d_e` values); causal models take `None`.
    pub fn new(model: &'m Model<f32>, embedding: Option<&[f32]>) -> Result<Self> {
        let cfg = model.config();
        match (cfg.family, embedding) {
            (Family::Causal, None) | (Family::Eem, Some(_)) => {}
            (Family::Causal | Family::Eem, _) => {
                return Err(Error::Config("embedding must be given exactly for entropy estimation models".into()));
            }
            (f, _) => return Err(Error::Family(format!("incremental decoding supports causal and eem models, not {f}"))),
        }
        if cfg.backbone == Backbone::Mixer && !cfg.mixer_causal {
            return Err(Error::Config("incremental decoding needs a causal decoder".into()));
        }
        let p = |n: String| model.param(&n).ok_or_else(|| Error::format("model", format!("missing {n}")));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let mix = match cfg.backbone {
                Backbone::Transformer => Mix::Attn {
                    wq: p(format!("dec.{l}.wq"))?,
                    wk: p(format!("dec.{l}.wk"))?,
                    wv: p(format!("dec.{l}.wv"))?,
                    wo: p(format!("dec.{l}.wo"))?,
                },
                Backbone::Mixer => Mix::Conv {
                    conv: p(format!("dec.{l}.conv"))?,
                    conv_in: model.param(&format!("dec.{l}.conv_in")),
                    conv_out: model.param(&format!("dec.{l}.conv_out")),
                },
            };
            layers.push(Layer {
                norm1: p(format!("dec.{l}.norm1"))?,
                norm2: p(format!("dec.{l}.norm2"))?,
                w1: p(format!("dec.{l}.w1"))?,
                w2: p(format!("dec.{l}.w2"))?,
                mix,
                keys: Vec::new(),
                values: Vec::new(),
            });
        }
        let mut s = Self {
            model,
            layers,
            valid: Vec::new(),
            memory: None,
            rope: (cfg.backbone == Backbone::Transformer && cfg.rotary).then(|| rotary_tables(cfg.n_ctx + 1, cfg.head_dim())),
            logits: Vec::new(),
        };
        if let Some(e) = embedding {
            if e.len() != cfg.d_e {
                return Err(Error::shape("embedding", &[e.len()], &[cfg.d_e]));
            }
            match cfg.introduction {
                Introduction::TokenConcat => {
                    let m = vecmat(e, p("bn.up".into())?);
                    s.push_row(m, true);
                }
                Introduction::EmbedProject => s.memory = Some(vecmat(e, p("bn.up".into())?)),
                Introduction::EmbedConcat => s.memory = Some(e.to_vec()),
            }
        }
        Ok(s)
    }

    /// Number of decoder positions consumed, memory position included.
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Consumes one token; returns logits of the distribution over the next one.
    pub fn step(&mut self, token: u32) -> Result<&[f32]> {
        let cfg = self.model.config();
        if token as usize >= cfg.vocab {
            return Err(Error::Index {
                what: "token id",
                index: token as usize,
                extent: cfg.vocab,
            });
        }
        let d = cfg.d_model;
        let emb = self.model.param("tok_emb").expect("decoder embedding");
        let mut x = emb.data()[token as usize * d..(token as usize + 1) * d].to_vec();
        match (&self.memory, cfg.introduction) {
            (Some(m), Introduction::EmbedProject) => x.iter_mut().zip(m).for_each(|(a, b)| *a += b),
            (Some(m), Introduction::EmbedConcat) => {
                x.extend_from_slice(m);
                let mut y = vecmat(&x, self.model.param("eem.mix_w").expect("mix weights"));
                let b = self.model.param("eem.mix_b").expect("mix bias");
                y.iter_mut().zip(b.data()).for_each(|(a, b)| *a += b);
                x = y;
            }
            _ => {}
        }
        self.push_row(x, token != PAD);
        Ok(&self.logits)
    }

    fn push_row(&mut self, mut x: Vec<f32>, valid: bool) {
        let cfg = self.model.config();
        let pos = self.valid.len();
        self.valid.push(valid);
        let d = cfg.d_model;
        let heads = cfg.n_heads;
        let hd = d / heads;
        for layer in &mut self.layers {
            let h = rmsnorm(&x, layer.norm1);
            let mixed = match layer.mix {
                Mix::Attn { wq, wk, wv, wo } => {
                    let mut q = vecmat(&h, wq);
                    let mut k = vecmat(&h, wk);
                    let v = vecmat(&h, wv);
                    if let Some((cos, sin)) = &self.rope {
                        let half = hd / 2;
                        let (c, s) = (&cos[pos * half..(pos + 1) * half], &sin[pos * half..(pos + 1) * half]);
                        for hh in 0..heads {
                            let r = hh * hd..(hh + 1) * hd;
                            let src = q[r.clone()].to_vec();
                            rotate_head(&src, &mut q[r.clone()], c, s, 1.0);
                            let src = k[r.clone()].to_vec();
                            rotate_head(&src, &mut k[r], c, s, 1.0);
                        }
                    }
                    layer.keys.extend_from_slice(&k);
                    layer.values.extend_from_slice(&v);
                    let n = pos + 1;
                    let scale = 1.0 / (hd as f64).sqrt();
                    let mut out = vec![0.0f32; d];
                    let mut scores = vec![0.0f32; n];
                    for hh in 0..heads {
                        let off = hh * hd;
                        f32::gemm(1, hd, n, &q[off..], (hd, 1), &layer.keys[off..], (1, d), &mut scores, (n, 1), 0.0);
                        let mut mx = f64::NEG_INFINITY;
                        let s64: Vec<f64> = (0..n)
                            .map(|j| {
                                let v = if self.valid[j] { scores[j] as f64 * scale } else { f64::NEG_INFINITY };
                                mx = mx.max(v);
                                v
                            })
                            .collect();
                        if mx == f64::NEG_INFINITY {
                            continue;
                        }
                        let sum: f64 = s64.iter().map(|&s| (s - mx).exp()).sum();
                        let p: Vec<f32> = s64.iter().map(|&s| ((s - mx).exp() / sum) as f32).collect();
                        f32::gemm(1, n, hd, &p, (n, 1), &layer.values[off..], (d, 1), &mut out[off..], (d, 1), 0.0);
                    }
                    vecmat(&out, wo)
                }
                Mix::Conv { conv, conv_in, conv_out } => {
                    let hc = match conv_in {
                        Some(w) => vecmat(&h, w),
                        None => h,
                    };
                    layer.keys.extend_from_slice(&hc);
                    let kernel = cfg.kernel;
                    let nmax = conv.shape()[1];
                    let center = (kernel as isize - 1) / 2;
                    let mut out = vec![0.0f32; d];
                    let w = conv.data();
                    for hh in 0..heads {
                        for tap in 0..kernel {
                            let shift = tap as isize - center;
                            let mut acc = vec![0.0f32; hd];
                            for j in 0..=pos {
                                if !self.valid[j] {
                                    continue;
                                }
                                let wij = w[((hh * nmax + pos) * nmax + j) * kernel + tap];
                                let row = &layer.keys[j * d + hh * hd..j * d + (hh + 1) * hd];
                                for (c, a) in acc.iter_mut().enumerate() {
                                    let src = c as isize + shift;
                                    if (0..hd as isize).contains(&src) {
                                        *a += wij * row[src as usize];
                                    }
                                }
                            }
                            out[hh * hd..(hh + 1) * hd].iter_mut().zip(&acc).for_each(|(o, a)| *o += a);
                        }
                    }
                    match conv_out {
                        Some(w) => vecmat(&out, w),
                        None => out,
                    }
                }
            };
            x.iter_mut().zip(&mixed).for_each(|(a, b)| *a += b);
            let h = rmsnorm(&x, layer.norm2);
            let f: Vec<f32> = vecmat(&h, layer.w1).into_iter().map(|v| silu(v as f64) as f32).collect();
            let f = vecmat(&f, layer.w2);
            x.iter_mut().zip(&f).for_each(|(a, b)| *a += b);
        }
        let y = rmsnorm(&x, self.model.param("dec.norm").expect("final norm"));
        self.logits = vecmat(&y, self.model.param("lm_head").expect("lm head"));
    }
}

impl Model<f32> {
    /// Compressed embeddings `(batch * d_e)` of full windows, before quantization.
    pub fn embed(&self, tokens: &[u32], batch: usize) -> Result<Vec<f32>> {
        let seq = tokens.len() / batch.max(1);
        let b = super::Batch::new(tokens, batch, seq)?;
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, false);
        let e = self.encode_embedding(&mut tape, &bound, &b, &ForwardOpts::default())?;
        Ok(tape.value(e).data().to_vec())
    }
}
