use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

macro_rules! kv_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
        pub enum $name {
            $($var),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$var => $s),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($name::$var),)+
                    other => Err(Error::Config(format!(
                        "unknown {} {other:?} (expected one of {})",
                        stringify!($name).to_lowercase(),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

kv_enum!(Family {
    Causal => "causal",
    Autoencoder => "autoencoder",
    Eem => "eem",
    SecondOrder => "second_order",
});

kv_enum!(Backbone {
    Transformer => "transformer",
    Mixer => "mixer",
});

kv_enum!(
    /// How the compressed embedding enters the causal decoder.
    Introduction {
        TokenConcat => "token_concat",
        EmbedConcat => "embed_concat",
        EmbedProject => "embed_project",
    }
);

kv_enum!(
    /// Decoder input layout of the autoencoder.
    Unroll {
        Repeat => "repeat",
        FirstForward => "first_forward",
        MiddleOut => "middle_out",
    }
);

kv_enum!(
    /// Where uniform training noise enters the bottleneck.
    NoiseSite {
        Pre => "pre",
        In => "in",
    }
);

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub backbone: Backbone,
    pub vocab: usize,
    pub d_model: usize,
    pub d_enc: usize,
    pub n_layers: usize,
    pub n_enc_layers: usize,
    pub n_ctx: usize,
    /// Compressed embedding width (`n_p` activations).
    pub d_e: usize,
    /// Bits per transmitted embedding activation.
    pub b_p: usize,
    pub n_heads: usize,
    pub kernel: usize,
    pub introduction: Introduction,
    pub unroll: Unroll,
    pub slice: usize,
    pub qat_q: f64,
    pub noise_site: NoiseSite,
    pub dropout: f64,
    pub rotary: bool,
    /// Causal masking inside mixer decoder layers.
    pub mixer_causal: bool,
    pub encoder_causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::new(Family::Causal, Backbone::Transformer, 259, 64, 2, 64)
    }
}

impl ModelConfig {
    /// A config with width-derived defaults filled in.
    pub fn new(family: Family, backbone: Backbone, vocab: usize, d_model: usize, n_layers: usize, n_ctx: usize) -> Self {
        let mut c = Self {
            family,
            backbone,
            vocab,
            d_model,
            d_enc: 0,
            n_layers,
            n_enc_layers: n_layers,
            n_ctx,
            d_e: 16,
            b_p: 8,
            n_heads: 4,
            kernel: 1,
            introduction: Introduction::TokenConcat,
            unroll: Unroll::Repeat,
            slice: 0,
            qat_q: 0.0,
            noise_site: NoiseSite::Pre,
            dropout: 0.0,
            rotary: true,
            mixer_causal: true,
            encoder_causal: false,
        };
        c.fill_defaults();
        c
    }

    /// Re-derives encoder width, slice size and encoder causality from the backbone.
    pub fn fill_defaults(&mut self) {
        self.d_enc = match self.backbone {
            Backbone::Transformer => self.d_model / 2,
            Backbone::Mixer => self.d_model / 4,
        }
        .max(1);
        self.d_e = self.d_e.min(self.d_enc);
        self.slice = (self.d_model / 2).max(1);
        self.encoder_causal = self.backbone == Backbone::Mixer;
        if self.backbone == Backbone::Mixer {
            self.n_heads = 1;
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn has_encoder(&self) -> bool {
        matches!(self.family, Family::Autoencoder | Family::Eem)
    }

    /// Embedding bits per window, `n_p * b_p`.
    pub fn embedding_bits(&self) -> usize {
        if self.has_encoder() {
            self.d_e * self.b_p
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab < 2 || self.d_model == 0 || self.n_layers == 0 || self.n_ctx < 2 {
            return bad(format!(
                "vocab, d_model, n_layers and n_ctx must be positive (got {}, {}, {}, {})",
                self.vocab, self.d_model, self.n_layers, self.n_ctx
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.backbone == Backbone::Transformer && self.rotary && self.head_dim() % 2 != 0 {
            return bad(format!("rotary needs an even head width, got {}", self.head_dim()));
        }
        if self.has_encoder() {
            if self.d_enc == 0 || self.n_enc_layers == 0 {
                return bad("encoder width and depth must be positive".into());
            }
            if self.d_enc % self.n_heads != 0 {
                return bad(format!("d_enc {} is not divisible by n_heads {}", self.d_enc, self.n_heads));
            }
            if self.backbone == Backbone::Transformer && self.rotary && (self.d_enc / self.n_heads) % 2 != 0 {
                return bad("rotary needs an even encoder head width".into());
            }
            if self.d_e == 0 || self.d_e > self.d_enc {
                return bad(format!("d_e {} must lie in 1..={} (d_enc)", self.d_e, self.d_enc));
            }
        }
        if self.family == Family::Autoencoder && (self.slice == 0 || self.slice > self.d_model) {
            return bad(format!("slice {} must lie in 1..={}", self.slice, self.d_model));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("mixer kernel must be odd, got {}", self.kernel));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.qat_q < 0.0 || !self.qat_q.is_finite() {
            return bad(format!("qat_q must be a finite non-negative amplitude, got {}", self.qat_q));
        }
        if self.b_p > 32 {
            return bad(format!("b_p {} exceeds 32 bits", self.b_p));
        }
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if self.backbone == Backbone::Mixer && !self.mixer_causal {
            w.push("mixer decoder without causal masking is known to train unstably".to_string());
        }
        w
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("family", self.family.to_string());
        put("backbone", self.backbone.to_string());
        put("vocab", self.vocab.to_string());
        put("d_model", self.d_model.to_string());
        put("d_enc", self.d_enc.to_string());
        put("n_layers", self.n_layers.to_string());
        put("n_enc_layers", self.n_enc_layers.to_string());
        put("n_ctx", self.n_ctx.to_string());
        put("d_e", self.d_e.to_string());
        put("b_p", self.b_p.to_string());
        put("n_heads", self.n_heads.to_string());
        put("kernel", self.kernel.to_string());
        put("introduction", self.introduction.to_string());
        put("unroll", self.unroll.to_string());
        put("slice", self.slice.to_string());
        put("qat_q", format!("{:?}", self.qat_q));
        put("noise_site", self.noise_site.to_string());
        put("dropout", format!("{:?}", self.dropout));
        put("rotary", self.rotary.to_string());
        put("mixer_causal", self.mixer_causal.to_string());
        put("encoder_causal", self.encoder_causal.to_string());
        m
    }

    /// Applies overrides on top of `self`; unknown keys are rejected.
    ///
    /// Setting `backbone` or `d_model` re-derives width defaults unless the
    /// derived keys are given explicitly too.
    pub fn apply_kv<'a>(&mut self, kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let kv: Vec<(&str, &str)> = kv.into_iter().collect();
        let has = |k: &str| kv.iter().any(|(a, _)| *a == k);
        for &(k, v) in &kv {
            match k {
                "family" => self.family = v.parse()?,
                "backbone" => self.backbone = v.parse()?,
                "d_model" => self.d_model = parse(k, v)?,
                _ => {}
            }
        }
        if has("backbone") || has("d_model") {
            let keep_heads = self.n_heads;
            self.fill_defaults();
            if self.backbone == Backbone::Transformer {
                self.n_heads = keep_heads;
            }
        }
        if !has("n_enc_layers") && has("n_layers") {
            self.n_enc_layers = parse("n_layers", kv.iter().find(|(a, _)| *a == "n_layers").map(|(_, v)| *v).unwrap_or("0"))?;
        }
        for &(k, v) in &kv {
            match k {
                "family" | "backbone" | "d_model" => {}
                "vocab" => self.vocab = parse(k, v)?,
                "d_enc" => self.d_enc = parse(k, v)?,
                "n_layers" => self.n_layers = parse(k, v)?,
                "n_enc_layers" => self.n_enc_layers = parse(k, v)?,
                "n_ctx" => self.n_ctx = parse(k, v)?,
                "d_e" | "n_p" => self.d_e = parse(k, v)?,
                "b_p" => self.b_p = parse(k, v)?,
                "n_heads" => self.n_heads = parse(k, v)?,
                "kernel" => self.kernel = parse(k, v)?,
                "introduction" => self.introduction = v.parse()?,
                "unroll" => self.unroll = v.parse()?,
                "slice" => self.slice = parse(k, v)?,
                "qat_q" => self.qat_q = parse(k, v)?,
                "noise_site" => self.noise_site = v.parse()?,
                "dropout" => self.dropout = parse(k, v)?,
                "rotary" => self.rotary = parse(k, v)?,
                "mixer_causal" => self.mixer_causal = parse(k, v)?,
                "encoder_causal" => self.encoder_causal = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown model key {other:?}"))),
            }
        }
        Ok(())
    }

    pub fn from_kv<'a>(kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        c.apply_kv(kv)?;
        c.validate()?;
        Ok(c)
    }
}

pub(crate) fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {key} = {v:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_width_defaults() {
        let t = ModelConfig::new(Family::Eem, Backbone::Transformer, 300, 256, 2, 64);
        assert_eq!(t.d_enc, 128);
        assert_eq!(t.slice, 128);
        let m = ModelConfig::new(Family::Eem, Backbone::Mixer, 300, 256, 2, 64);
        assert_eq!(m.d_enc, 64);
    }

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::new(Family::Eem, Backbone::Mixer, 300, 64, 3, 32);
        c.introduction = Introduction::EmbedProject;
        c.qat_q = 0.25;
        c.kernel = 3;
        let kv = c.to_kv();
        let back = ModelConfig::from_kv(kv.iter().map(|(a, b)| (a.as_str(), b.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig::default();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.family = Family::Autoencoder;
        c.slice = c.d_model + 1;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv([("bogus", "1")]).is_err());
        let mut m = ModelConfig::new(Family::Causal, Backbone::Mixer, 300, 64, 1, 16);
        m.mixer_causal = false;
        assert_eq!(m.warnings().len(), 1);
    }
}
