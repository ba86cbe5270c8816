//! Model zoo: causal language models, autoencoders, entropy estimation
//! models and second-order entropy regressors over transformer and
//! masked-mixer backbones.

pub mod archive;
pub mod gradsuite;
mod config;
pub mod infer;
pub mod quant;
mod zoo;

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub(crate) use config::parse;
pub use config::{Backbone, Family, Introduction, ModelConfig, NoiseSite, Unroll};
pub use infer::Session;
pub use quant::{quantize_embedding, unroll_embedding, PackedEmbedding, QuantFormat};
pub use zoo::{Batch, Bound, ForwardOpts, Output};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::tokenizer::checksum64;

pub(crate) const INIT_STD: f64 = 0.02;
pub(crate) const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

/// Named parameters with a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

struct Specs(Vec<(String, Vec<usize>, Init)>);

impl Specs {
    fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) {
        self.0.push((name.into(), shape, init));
    }

    fn stack(&mut self, cfg: &ModelConfig, prefix: &str, d: usize, layers: usize, seq: usize) {
        let resid = Init::Normal(INIT_STD / (2.0 * layers as f64).sqrt());
        let w = Init::Normal(INIT_STD);
        for l in 0..layers {
            let p = format!("{prefix}.{l}");
            self.add(format!("{p}.norm1"), vec![d], Init::Ones);
            match cfg.backbone {
                Backbone::Transformer => {
                    for m in ["wq", "wk", "wv"] {
                        self.add(format!("{p}.{m}"), vec![d, d], w);
                    }
                    self.add(format!("{p}.wo"), vec![d, d], resid);
                }
                Backbone::Mixer if cfg.n_heads > 1 => {
                    self.add(format!("{p}.conv_in"), vec![d, d], w);
                    self.add(format!("{p}.conv"), vec![cfg.n_heads, seq, seq, cfg.kernel], w);
                    self.add(format!("{p}.conv_out"), vec![d, d], resid);
                }
                Backbone::Mixer => self.add(format!("{p}.conv"), vec![1, seq, seq, cfg.kernel], resid),
            }
            self.add(format!("{p}.norm2"), vec![d], Init::Ones);
            self.add(format!("{p}.w1"), vec![d, 4 * d], w);
            self.add(format!("{p}.w2"), vec![4 * d, d], resid);
        }
        self.add(format!("{prefix}.norm"), vec![d], Init::Ones);
    }
}

fn specs(cfg: &ModelConfig) -> Specs {
    let mut s = Specs(Vec::new());
    let (v, d) = (cfg.vocab, cfg.d_model);
    let w = Init::Normal(INIT_STD);
    if cfg.has_encoder() {
        s.add("enc.tok_emb", vec![v, cfg.d_enc], w);
        s.stack(cfg, "enc", cfg.d_enc, cfg.n_enc_layers, cfg.n_ctx);
        s.add("bn.down", vec![cfg.d_enc, cfg.d_e], Init::Normal(1.0 / (cfg.d_enc as f64).sqrt()));
        s.add("bn.down_b", vec![cfg.d_e], Init::Zeros);
    }
    let mut dec_seq = cfg.n_ctx;
    match cfg.family {
        Family::Causal | Family::SecondOrder => s.add("tok_emb", vec![v, d], w),
        Family::Autoencoder => {
            s.add("bn.up", vec![cfg.d_e, d], w);
            if cfg.unroll != Unroll::Repeat {
                s.add("ae.unroll_w", vec![cfg.slice, d], Init::Normal(1.0 / (cfg.slice as f64).sqrt()));
                s.add("ae.unroll_b", vec![d], Init::Zeros);
            }
        }
        Family::Eem => {
            s.add("tok_emb", vec![v, d], w);
            match cfg.introduction {
                Introduction::TokenConcat => {
                    s.add("bn.up", vec![cfg.d_e, d], w);
                    dec_seq += 1;
                }
                Introduction::EmbedProject => s.add("bn.up", vec![cfg.d_e, d], w),
                Introduction::EmbedConcat => {
                    s.add("eem.mix_w", vec![d + cfg.d_e, d], w);
                    s.add("eem.mix_b", vec![d], Init::Zeros);
                }
            }
        }
    }
    s.stack(cfg, "dec", d, cfg.n_layers, dec_seq);
    if cfg.family == Family::SecondOrder {
        s.add("head_w", vec![d, 1], w);
        s.add("head_b", vec![1], Init::Zeros);
    } else {
        s.add("lm_head", vec![d, v], w);
    }
    s
}

impl<T: Scalar> Model<T> {
    /// Freshly initialized parameters, deterministic in `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape, init) in specs(&config).0 {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Ones => vec![T::one(); n],
                Init::Zeros => vec![T::zero(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?);
        }
        Self::from_parts(config, names, params)
    }

    fn from_parts(config: ModelConfig, names: Vec<String>, params: Vec<Tensor<T>>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::format("model", format!("parameter {n} appears twice")));
            }
        }
        Ok(Self {
            config,
            names,
            params,
            index,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub(crate) fn slot(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("model has no parameter {name}"))
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Records every parameter on the tape.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect())
    }
}

impl Model<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta: Vec<(String, String)> = self.config.to_kv().into_iter().collect();
        let tensors: Vec<(&str, &Tensor<f32>)> = self.names.iter().map(String::as_str).zip(&self.params).collect();
        archive::write(&meta, &tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ar = archive::read(bytes)?;
        let config = ModelConfig::from_kv(ar.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let expected = specs(&config).0;
        if expected.len() != ar.tensors.len() {
            return Err(Error::format("checkpoint", format!("expected {} tensors, found {}", expected.len(), ar.tensors.len())));
        }
        for ((name, shape, _), (got, t)) in expected.iter().zip(&ar.tensors) {
            if name != got || shape.as_slice() != t.shape() {
                return Err(Error::format("checkpoint", format!("tensor {got} {:?} does not match {name} {shape:?}", t.shape())));
            }
        }
        let (names, params) = ar.tensors.into_iter().unzip();
        Self::from_parts(config, names, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Identity of the exact parameter values and configuration.
    pub fn checksum(&self) -> u64 {
        checksum64(&self.to_bytes())
    }
}

#[cfg(test)]
mod tests;
