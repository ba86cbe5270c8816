use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::quant::{quantize_embedding, uniform_noise, unroll_indices, QuantFormat};
use super::{Backbone, Family, Introduction, Model, NoiseSite, Unroll, NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{AttentionSpec, ConvSpec, Scalar, Tape, Tensor, Var};
use crate::tokenizer::PAD;

/// Tape handles of a model's parameters, in model order.
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// `batch` left-padded windows of `seq` tokens each, row-major.
#[derive(Clone, Copy, Debug)]
pub struct Batch<'a> {
    pub tokens: &'a [u32],
    pub batch: usize,
    pub seq: usize,
}

impl<'a> Batch<'a> {
    pub fn new(tokens: &'a [u32], batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::shape("batch tokens", &[tokens.len()], &[batch, seq]));
        }
        Ok(Self { tokens, batch, seq })
    }

    pub fn single(tokens: &'a [u32]) -> Result<Self> {
        Self::new(tokens, 1, tokens.len())
    }

    fn key_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|&t| t != PAD).collect()
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOpts<'a> {
    /// Enables dropout and bottleneck noise.
    pub train: bool,
    pub seed: u64,
    /// Rounds the compressed embedding onto a low-precision grid.
    pub quantize: Option<QuantFormat>,
    /// Zeroes the embedding and masks its memory position.
    pub occlude: bool,
    /// Replaces the compressed embedding, `batch * d_e` values.
    pub embedding: Option<&'a [f32]>,
    /// Target alignment of second-order models.
    pub shifted: bool,
}

pub struct Output {
    /// `(batch * seq, vocab)` logits, or `(batch * seq, 1)` entropy predictions.
    pub logits: Var,
    /// Target of each row: a token id, or for second-order models the
    /// position whose entropy the row predicts.
    pub targets: Vec<Option<usize>>,
    /// Compressed embedding `(batch, d_e)` as consumed by the decoder.
    pub embedding: Option<Var>,
}

struct Ctx<'m, T: Scalar> {
    model: &'m Model<T>,
    bound: &'m Bound,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, name: &str) -> Var {
        self.bound.0[self.model.slot(name)]
    }
}

struct StackSpec<'a> {
    prefix: &'a str,
    layers: usize,
    batch: usize,
    seq: usize,
    causal: bool,
    key_mask: Option<&'a [bool]>,
    dropout: Option<(f64, u64)>,
}

fn stack<T: Scalar>(tape: &mut Tape<T>, cx: &Ctx<'_, T>, mut x: Var, s: &StackSpec<'_>) -> Result<Var> {
    let cfg = &cx.model.config;
    for l in 0..s.layers {
        let p = |m: &str| cx.p(&format!("{}.{l}.{m}", s.prefix));
        let h = tape.rmsnorm(x, p("norm1"), NORM_EPS)?;
        let mixed = match cfg.backbone {
            Backbone::Transformer => {
                let mut q = tape.matmul(h, p("wq"))?;
                let mut k = tape.matmul(h, p("wk"))?;
                let v = tape.matmul(h, p("wv"))?;
                if cfg.rotary {
                    q = tape.rotary(q, cfg.n_heads, s.seq)?;
                    k = tape.rotary(k, cfg.n_heads, s.seq)?;
                }
                let spec = AttentionSpec {
                    batch: s.batch,
                    seq: s.seq,
                    heads: cfg.n_heads,
                    causal: s.causal,
                    key_mask: s.key_mask,
                    dropout: s.dropout.map(|(pd, seed)| (pd, seed.wrapping_add(l as u64))),
                };
                let a = tape.attention(q, k, v, &spec)?;
                tape.matmul(a, p("wo"))?
            }
            Backbone::Mixer => {
                let multi = cfg.n_heads > 1;
                let h = if multi { tape.matmul(h, p("conv_in"))? } else { h };
                let spec = ConvSpec {
                    batch: s.batch,
                    seq: s.seq,
                    heads: cfg.n_heads,
                    kernel: cfg.kernel,
                    causal: s.causal,
                    key_mask: s.key_mask,
                };
                let c = tape.seq_conv(h, p("conv"), &spec)?;
                if multi {
                    tape.matmul(c, p("conv_out"))?
                } else {
                    c
                }
            }
        };
        x = tape.add(x, mixed)?;
        let h = tape.rmsnorm(x, p("norm2"), NORM_EPS)?;
        let f = tape.matmul(h, p("w1"))?;
        let f = tape.silu(f);
        let f = tape.matmul(f, p("w2"))?;
        x = tape.add(x, f)?;
    }
    tape.rmsnorm(x, cx.p(&format!("{}.norm", s.prefix)), NORM_EPS)
}

fn repeat_rows(batch: usize, seq: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, seq)).collect()
}

fn next_token_targets(b: &Batch<'_>) -> Vec<Option<usize>> {
    let mut t = vec![None; b.tokens.len()];
    for bi in 0..b.batch {
        for i in 0..b.seq - 1 {
            let tok = b.tokens[bi * b.seq + i + 1];
            if tok != PAD {
                t[bi * b.seq + i] = Some(tok as usize);
            }
        }
    }
    t
}

impl<T: Scalar> Model<T> {
    fn check_batch(&self, b: &Batch<'_>) -> Result<()> {
        if b.seq > self.config.n_ctx {
            return Err(Error::Config(format!("window of {} tokens exceeds n_ctx {}", b.seq, self.config.n_ctx)));
        }
        if let Some(&bad) = b.tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Index {
                what: "token id",
                index: bad as usize,
                extent: self.config.vocab,
            });
        }
        Ok(())
    }

    fn dropout(&self, opts: &ForwardOpts<'_>, stream: u64) -> Option<(f64, u64)> {
        (opts.train && self.config.dropout > 0.0).then(|| (self.config.dropout, opts.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (stream << 32)))
    }

    /// Dispatches on the model family.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Output> {
        self.check_batch(b)?;
        match self.config.family {
            Family::Causal => self.forward_causal(tape, bound, b, opts),
            Family::Autoencoder => self.forward_autoencoder(tape, bound, b, opts),
            Family::Eem => self.forward_eem(tape, bound, b, opts),
            Family::SecondOrder => self.forward_second_order(tape, bound, b, opts),
        }
    }

    fn decoder_stack(&self, tape: &mut Tape<T>, cx: &Ctx<'_, T>, x: Var, batch: usize, seq: usize, mask: Option<&[bool]>, opts: &ForwardOpts<'_>) -> Result<Var> {
        let cfg = &self.config;
        let causal = cfg.backbone == Backbone::Transformer || cfg.mixer_causal;
        let spec = StackSpec {
            prefix: "dec",
            layers: cfg.n_layers,
            batch,
            seq,
            causal,
            key_mask: mask,
            dropout: self.dropout(opts, 1),
        };
        stack(tape, cx, x, &spec)
    }

    pub fn forward_causal(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Output> {
        self.expect(Family::Causal)?;
        let cx = Ctx { model: self, bound };
        let mask = b.key_mask();
        let x = tape.embedding(cx.p("tok_emb"), b.tokens)?;
        let y = self.decoder_stack(tape, &cx, x, b.batch, b.seq, Some(&mask), opts)?;
        let logits = tape.matmul(y, cx.p("lm_head"))?;
        Ok(Output {
            logits,
            targets: next_token_targets(b),
            embedding: None,
        })
    }

    fn expect(&self, f: Family) -> Result<()> {
        if self.config.family != f {
            return Err(Error::Family(format!("{} model used as {}", self.config.family, f)));
        }
        Ok(())
    }

    /// Encoder and bottleneck output `(batch, d_e)` for models that have an encoder.
    pub fn encode_embedding(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Var> {
        if !self.config.has_encoder() {
            return Err(Error::Family(format!("{} models have no encoder", self.config.family)));
        }
        self.check_batch(b)?;
        self.compressed_embedding(tape, &Ctx { model: self, bound }, b, opts)
    }

    /// Encoder, bottleneck and optional quantization: `(batch, d_e)`.
    fn compressed_embedding(&self, tape: &mut Tape<T>, cx: &Ctx<'_, T>, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Var> {
        let cfg = &self.config;
        if let Some(e) = opts.embedding {
            if e.len() != b.batch * cfg.d_e {
                return Err(Error::shape("embedding override", &[e.len()], &[b.batch, cfg.d_e]));
            }
            let t = Tensor::new(vec![b.batch, cfg.d_e], e.iter().map(|&v| T::from_f64(v as f64)).collect())?;
            return Ok(tape.constant(t));
        }
        if opts.occlude {
            return Ok(tape.constant(Tensor::zeros(vec![b.batch, cfg.d_e])));
        }
        let mask = b.key_mask();
        let x = tape.embedding(cx.p("enc.tok_emb"), b.tokens)?;
        let spec = StackSpec {
            prefix: "enc",
            layers: cfg.n_enc_layers,
            batch: b.batch,
            seq: b.seq,
            causal: cfg.encoder_causal,
            key_mask: Some(&mask),
            dropout: self.dropout(opts, 2),
        };
        let y = stack(tape, cx, x, &spec)?;
        let last: Vec<usize> = (0..b.batch).map(|bi| bi * b.seq + b.seq - 1).collect();
        let mut h = tape.gather_rows(y, &last)?;
        let noisy = opts.train && cfg.qat_q > 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5EED_0FB0_771E);
        if noisy && cfg.noise_site == NoiseSite::Pre {
            let n = uniform_noise(&mut rng, b.batch * cfg.d_enc, cfg.qat_q);
            let n = tape.constant(Tensor::from_f64(vec![b.batch, cfg.d_enc], &n)?);
            h = tape.add(h, n)?;
        }
        let c = tape.matmul(h, cx.p("bn.down"))?;
        let mut c = tape.add_row(c, cx.p("bn.down_b"))?;
        if noisy && cfg.noise_site == NoiseSite::In {
            let n = uniform_noise(&mut rng, b.batch * cfg.d_e, cfg.qat_q);
            let n = tape.constant(Tensor::from_f64(vec![b.batch, cfg.d_e], &n)?);
            c = tape.add(c, n)?;
        }
        if let Some(fmt) = opts.quantize {
            let vals: Vec<f32> = tape.value(c).data().iter().map(|v| v.as_f64() as f32).collect();
            let q = quantize_embedding(&vals, fmt);
            c = tape.constant(Tensor::new(vec![b.batch, cfg.d_e], q.into_iter().map(|v| T::from_f64(v as f64)).collect())?);
        }
        Ok(c)
    }

    pub fn forward_autoencoder(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Output> {
        self.expect(Family::Autoencoder)?;
        let cfg = &self.config;
        let cx = Ctx { model: self, bound };
        let c = self.compressed_embedding(tape, &cx, b, opts)?;
        let u = tape.matmul(c, cx.p("bn.up"))?;
        let x = match cfg.unroll {
            Unroll::Repeat => tape.gather_rows(u, &repeat_rows(b.batch, b.seq))?,
            Unroll::FirstForward | Unroll::MiddleOut => {
                let d = cfg.d_model;
                let mut idx = Vec::with_capacity(b.batch * b.seq * cfg.slice);
                for bi in 0..b.batch {
                    for i in 0..b.seq {
                        idx.extend(unroll_indices(d, i, cfg.slice, cfg.unroll == Unroll::MiddleOut)?.into_iter().map(|j| bi * d + j));
                    }
                }
                let s = tape.gather(u, idx, vec![b.batch * b.seq, cfg.slice])?;
                let s = tape.matmul(s, cx.p("ae.unroll_w"))?;
                tape.add_row(s, cx.p("ae.unroll_b"))?
            }
        };
        let y = self.decoder_stack(tape, &cx, x, b.batch, b.seq, None, opts)?;
        let logits = tape.matmul(y, cx.p("lm_head"))?;
        let targets = b.tokens.iter().map(|&t| (t != PAD).then_some(t as usize)).collect();
        Ok(Output {
            logits,
            targets,
            embedding: Some(c),
        })
    }

    pub fn forward_eem(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Output> {
        self.expect(Family::Eem)?;
        let cfg = &self.config;
        let cx = Ctx { model: self, bound };
        let c = self.compressed_embedding(tape, &cx, b, opts)?;
        let xt = tape.embedding(cx.p("tok_emb"), b.tokens)?;
        let mut mask = b.key_mask();
        let rep = repeat_rows(b.batch, b.seq);
        let logits_in = match cfg.introduction {
            Introduction::TokenConcat => {
                let m = tape.matmul(c, cx.p("bn.up"))?;
                let cat = tape.concat_rows(m, xt)?;
                let seq = b.seq + 1;
                let mut rows = Vec::with_capacity(b.batch * seq);
                let mut full_mask = Vec::with_capacity(b.batch * seq);
                for bi in 0..b.batch {
                    rows.push(bi);
                    full_mask.push(!opts.occlude);
                    for i in 0..b.seq {
                        rows.push(b.batch + bi * b.seq + i);
                        full_mask.push(mask[bi * b.seq + i]);
                    }
                }
                let x = tape.gather_rows(cat, &rows)?;
                mask = full_mask;
                let y = self.decoder_stack(tape, &cx, x, b.batch, seq, Some(&mask), opts)?;
                let keep: Vec<usize> = (0..b.batch).flat_map(|bi| (1..seq).map(move |i| bi * seq + i)).collect();
                tape.gather_rows(y, &keep)?
            }
            Introduction::EmbedConcat => {
                let cr = tape.gather_rows(c, &rep)?;
                let x = tape.concat_cols(xt, cr)?;
                let x = tape.matmul(x, cx.p("eem.mix_w"))?;
                let x = tape.add_row(x, cx.p("eem.mix_b"))?;
                self.decoder_stack(tape, &cx, x, b.batch, b.seq, Some(&mask), opts)?
            }
            Introduction::EmbedProject => {
                let u = tape.matmul(c, cx.p("bn.up"))?;
                let ur = tape.gather_rows(u, &rep)?;
                let x = tape.add(xt, ur)?;
                self.decoder_stack(tape, &cx, x, b.batch, b.seq, Some(&mask), opts)?
            }
        };
        let logits = tape.matmul(logits_in, cx.p("lm_head"))?;
        Ok(Output {
            logits,
            targets: next_token_targets(b),
            embedding: Some(c),
        })
    }

    /// Non-negative per-position entropy predictions.
    ///
    /// Row `i` predicts the entropy of token `i + 1` when `opts.shifted`,
    /// otherwise of token `i`; `targets` holds that flat position.
    pub fn forward_second_order(&self, tape: &mut Tape<T>, bound: &Bound, b: &Batch<'_>, opts: &ForwardOpts<'_>) -> Result<Output> {
        self.expect(Family::SecondOrder)?;
        let cx = Ctx { model: self, bound };
        let mask = b.key_mask();
        let x = tape.embedding(cx.p("tok_emb"), b.tokens)?;
        let y = self.decoder_stack(tape, &cx, x, b.batch, b.seq, Some(&mask), opts)?;
        let h = tape.matmul(y, cx.p("head_w"))?;
        let h = tape.add_row(h, cx.p("head_b"))?;
        let pred = tape.softplus(h);
        let shift = usize::from(opts.shifted);
        let mut targets = vec![None; b.tokens.len()];
        for bi in 0..b.batch {
            for i in 0..b.seq.saturating_sub(shift) {
                let pos = bi * b.seq + i + shift;
                if b.tokens[pos] != PAD {
                    targets[bi * b.seq + i] = Some(pos);
                }
            }
        }
        Ok(Output {
            logits: pred,
            targets,
            embedding: None,
        })
    }

    /// Flat position of the token predicted by row `row` of a `seq`-long window.
    pub fn predicted_position(&self, row: usize, seq: usize) -> Option<usize> {
        match self.config.family {
            Family::Autoencoder => Some(row),
            Family::SecondOrder => None,
            _ => ((row % seq) + 1 < seq).then_some(row + 1),
        }
    }
}
