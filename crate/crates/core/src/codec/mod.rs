//! Lossless token compression driven by model predictions.
//!
//! A document is split into windows of `n_ctx - 1` tokens, each decoded
//! behind one leading pad. Causal mode codes every token under the model's
//! next-token distribution. Entropy estimation mode first transmits one
//! quantized embedding per window, then codes the tokens under the decoder
//! conditioned on it.
//!
//! Stream layout (all integers little-endian):
//!
//! | offset | size | field |
//! |-------:|-----:|-------|
//! | 0  | 4 | magic `EELC` |
//! | 4  | 1 | format version |
//! | 5  | 1 | mode (0 causal, 1 eem) |
//! | 6  | 1 | embedding format code (0 none) |
//! | 7  | 1 | reserved, zero |
//! | 8  | 8 | model checksum |
//! | 16 | 8 | tokenizer checksum |
//! | 24 | 8 | token count |
//! | 32 | 8 | token checksum |
//! | 40 | 4 | n_ctx |
//! | 44 | 4 | d_e |
//! | 48 | 8 | embedding payload length, bits |
//! | 56 | 8 | body length, bits |
//! | 64 | 8 | checksum of bytes 0..64 |
//!
//! The payload follows, padded to a byte, then the arithmetic-coded body,
//! padded with zero bits to a byte.

mod arith;

pub use arith::{ArithDecoder, ArithEncoder, BitReader, BitWriter, FreqTable, TOTAL, TOTAL_BITS};

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::entropy::CompressionReport;
use crate::error::{Error, Result};
use crate::model::{Family, Model, PackedEmbedding, QuantFormat, Session};
use crate::tokenizer::{checksum64, CorpusStats, PAD};

pub const MAGIC: [u8; 4] = *b"EELC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 72;

/// Windows embedded per encoder pass.
const EMBED_BATCH: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Causal,
    Eem,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub mode: Mode,
    pub quant: Option<QuantFormat>,
    pub model_checksum: u64,
    pub tokenizer_checksum: u64,
    pub token_count: u64,
    pub token_checksum: u64,
    pub n_ctx: u32,
    pub d_e: u32,
    pub payload_bits: u64,
    pub body_bits: u64,
}

fn bytes_for(bits: u64) -> usize {
    bits.div_ceil(8) as usize
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_BYTES] {
        let mut b = [0u8; HEADER_BYTES];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5] = match self.mode {
            Mode::Causal => 0,
            Mode::Eem => 1,
        };
        b[6] = self.quant.map_or(0, QuantFormat::code);
        b[8..16].copy_from_slice(&self.model_checksum.to_le_bytes());
        b[16..24].copy_from_slice(&self.tokenizer_checksum.to_le_bytes());
        b[24..32].copy_from_slice(&self.token_count.to_le_bytes());
        b[32..40].copy_from_slice(&self.token_checksum.to_le_bytes());
        b[40..44].copy_from_slice(&self.n_ctx.to_le_bytes());
        b[44..48].copy_from_slice(&self.d_e.to_le_bytes());
        b[48..56].copy_from_slice(&self.payload_bits.to_le_bytes());
        b[56..64].copy_from_slice(&self.body_bits.to_le_bytes());
        let sum = checksum64(&b[..64]);
        b[64..].copy_from_slice(&sum.to_le_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("bitstream header", d.to_string());
        if bytes.len() < HEADER_BYTES {
            return Err(bad("truncated header"));
        }
        if bytes[..4] != MAGIC {
            return Err(bad("bad magic"));
        }
        if checksum64(&bytes[..64]).to_le_bytes() != bytes[64..HEADER_BYTES] {
            return Err(Error::Checksum("bitstream header is corrupt".into()));
        }
        if bytes[4] != VERSION {
            return Err(bad(&format!("unsupported version {}", bytes[4])));
        }
        let mode = match bytes[5] {
            0 => Mode::Causal,
            1 => Mode::Eem,
            m => return Err(bad(&format!("unknown mode {m}"))),
        };
        let quant = match bytes[6] {
            0 => None,
            c => Some(QuantFormat::from_code(c).ok_or_else(|| bad(&format!("unknown embedding format {c}")))?),
        };
        if bytes[7] != 0 || (mode == Mode::Eem) != quant.is_some() {
            return Err(bad("inconsistent mode fields"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        Ok(Self {
            mode,
            quant,
            model_checksum: u64_at(8),
            tokenizer_checksum: u64_at(16),
            token_count: u64_at(24),
            token_checksum: u64_at(32),
            n_ctx: u32_at(40),
            d_e: u32_at(44),
            payload_bits: u64_at(48),
            body_bits: u64_at(56),
        })
    }
}

pub fn token_checksum(tokens: &[u32]) -> u64 {
    let bytes: Vec<u8> = tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
    checksum64(&bytes)
}

/// Bit counts of one encoded document.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub tokens: u64,
    pub windows: u64,
    pub payload_bits: u64,
    pub body_bits: u64,
    /// Cross-entropy of the tokens under the model's own softmax, nats.
    pub model_nats: f64,
    /// Ideal code length under the coded integer distributions, bits.
    pub coded_bits: f64,
}

impl EncodeStats {
    /// Body bits minus the model's cross-entropy in bits.
    pub fn body_overhead(&self) -> f64 {
        self.body_bits as f64 - self.model_nats / LN_2
    }
}

#[derive(Clone, Debug)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub stats: EncodeStats,
}

/// Window boundaries: `(start, real tokens)` for chunks of `n_ctx - 1`.
fn windows(len: usize, n_ctx: usize) -> Vec<(usize, usize)> {
    let step = n_ctx - 1;
    (0..len).step_by(step).map(|s| (s, step.min(len - s))).collect()
}

/// Encoder and decoder bound to one model and tokenizer.
pub struct Codec<'m> {
    model: &'m Model<f32>,
    model_checksum: u64,
    tokenizer_checksum: u64,
    quant: QuantFormat,
}

impl<'m> Codec<'m> {
    /// Embeddings default to fp8 e4m3 when the model declares 8 bits per
    /// activation and fp16 for 16.
    pub fn new(model: &'m Model<f32>, tokenizer_checksum: u64) -> Result<Self> {
        let cfg = model.config();
        if !matches!(cfg.family, Family::Causal | Family::Eem) {
            return Err(Error::Family(format!("the codec drives causal or eem models, not {}", cfg.family)));
        }
        if cfg.n_ctx < 2 {
            return Err(Error::Config("the codec needs n_ctx >= 2".into()));
        }
        let quant = match cfg.b_p {
            16 => QuantFormat::Fp16,
            _ => QuantFormat::E4m3,
        };
        Ok(Self {
            model,
            model_checksum: model.checksum(),
            tokenizer_checksum,
            quant,
        })
    }

    pub fn with_quant(mut self, quant: QuantFormat) -> Self {
        self.quant = quant;
        self
    }

    pub fn mode(&self) -> Mode {
        match self.model.config().family {
            Family::Eem => Mode::Eem,
            _ => Mode::Causal,
        }
    }

    pub fn quant(&self) -> QuantFormat {
        self.quant
    }

    /// Bits of one transmitted embedding.
    pub fn embedding_bits(&self) -> u64 {
        match self.mode() {
            Mode::Causal => 0,
            Mode::Eem => {
                let scale = if self.quant == QuantFormat::Int8Absmax { 32 } else { 0 };
                (self.model.config().d_e * self.quant.bits()) as u64 + scale
            }
        }
    }

    fn window_tokens(&self, tokens: &[u32], start: usize, len: usize) -> Vec<u32> {
        let n = self.model.config().n_ctx;
        let mut w = vec![PAD; n - len];
        w.extend_from_slice(&tokens[start..start + len]);
        w
    }

    fn write_embedding(&self, out: &mut BitWriter, e: &[f32]) -> Vec<f32> {
        let packed = PackedEmbedding::pack(e, self.quant);
        if self.quant == QuantFormat::Int8Absmax {
            out.push_bits(packed.scale.to_bits() as u64, 32);
        }
        for &c in &packed.codes {
            out.push_bits(c as u64, self.quant.bits() as u32);
        }
        packed.unpack()
    }

    fn read_embedding(&self, r: &mut BitReader<'_>) -> Vec<f32> {
        let scale = if self.quant == QuantFormat::Int8Absmax { f32::from_bits(r.bits(32) as u32) } else { 1.0 };
        let codes = (0..self.model.config().d_e).map(|_| r.bits(self.quant.bits() as u32) as u32).collect();
        PackedEmbedding { format: self.quant, scale, codes }.unpack()
    }

    pub fn encode(&self, tokens: &[u32]) -> Result<Encoded> {
        let cfg = self.model.config();
        for &t in tokens {
            if t == PAD || t as usize >= cfg.vocab {
                return Err(Error::Index {
                    what: "codable token id",
                    index: t as usize,
                    extent: cfg.vocab,
                });
            }
        }
        let wins = windows(tokens.len(), cfg.n_ctx);
        let mut payload = BitWriter::new();
        let mut embeddings = Vec::new();
        if self.mode() == Mode::Eem {
            for group in wins.chunks(EMBED_BATCH) {
                let flat: Vec<u32> = group.iter().flat_map(|&(s, l)| self.window_tokens(tokens, s, l)).collect();
                let e = self.model.embed(&flat, group.len())?;
                for row in e.chunks(cfg.d_e) {
                    embeddings.push(self.write_embedding(&mut payload, row));
                }
            }
        }
        let mut enc = ArithEncoder::new();
        let mut stats = EncodeStats {
            tokens: tokens.len() as u64,
            windows: wins.len() as u64,
            payload_bits: payload.bit_len(),
            ..Default::default()
        };
        for (i, &(s, l)) in wins.iter().enumerate() {
            let w = self.window_tokens(tokens, s, l);
            let mut sess = Session::new(self.model, embeddings.get(i).map(Vec::as_slice))?;
            let first = w.len() - l;
            for p in 0..w.len() - 1 {
                let logits = sess.step(w[p])?;
                if p + 1 >= first {
                    let t = w[p + 1] as usize;
                    let (table, norm) = FreqTable::with_log_norm(logits)?;
                    stats.model_nats += norm - logits[t] as f64;
                    stats.coded_bits += table.bits(t);
                    enc.encode(&table, t);
                }
            }
        }
        let body = if tokens.is_empty() { BitWriter::new() } else { enc.finish() };
        stats.body_bits = body.bit_len();
        let header = Header {
            mode: self.mode(),
            quant: (self.mode() == Mode::Eem).then_some(self.quant),
            model_checksum: self.model_checksum,
            tokenizer_checksum: self.tokenizer_checksum,
            token_count: tokens.len() as u64,
            token_checksum: token_checksum(tokens),
            n_ctx: cfg.n_ctx as u32,
            d_e: if self.mode() == Mode::Eem { cfg.d_e as u32 } else { 0 },
            payload_bits: stats.payload_bits,
            body_bits: stats.body_bits,
        };
        let mut bytes = header.to_bytes().to_vec();
        bytes.extend(payload.into_bytes());
        bytes.extend(body.into_bytes());
        Ok(Encoded { bytes, stats })
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<Vec<u32>> {
        let h = Header::parse(bytes)?;
        let cfg = self.model.config();
        if h.model_checksum != self.model_checksum {
            return Err(Error::Checksum(format!("stream was written by model {:016x}, this is {:016x}", h.model_checksum, self.model_checksum)));
        }
        if h.tokenizer_checksum != self.tokenizer_checksum {
            return Err(Error::Checksum(format!(
                "stream was written with tokenizer {:016x}, this is {:016x}",
                h.tokenizer_checksum, self.tokenizer_checksum
            )));
        }
        if h.mode != self.mode() || h.n_ctx as usize != cfg.n_ctx || (h.mode == Mode::Eem && (h.d_e as usize != cfg.d_e || h.quant != Some(self.quant))) {
            return Err(Error::format("bitstream header", "mode or shape disagrees with the model"));
        }
        let n = usize::try_from(h.token_count).map_err(|_| Error::format("bitstream header", "token count"))?;
        let wins = windows(n, cfg.n_ctx);
        if h.payload_bits != wins.len() as u64 * self.embedding_bits() {
            return Err(Error::format("bitstream header", "payload length disagrees with the token count"));
        }
        let (pl, bl) = (bytes_for(h.payload_bits), bytes_for(h.body_bits));
        let want = HEADER_BYTES + pl + bl;
        if bytes.len() < want {
            return Err(Error::format("bitstream", format!("truncated: {} of {want} bytes", bytes.len())));
        }
        if bytes.len() > want {
            return Err(Error::format("bitstream", format!("{} trailing bytes", bytes.len() - want)));
        }
        let mut payload = BitReader::new(&bytes[HEADER_BYTES..HEADER_BYTES + pl], h.payload_bits);
        let mut dec = ArithDecoder::new(BitReader::new(&bytes[HEADER_BYTES + pl..], h.body_bits));
        let mut out: Vec<u32> = Vec::with_capacity(n);
        for &(_, l) in &wins {
            let e = (h.mode == Mode::Eem).then(|| self.read_embedding(&mut payload));
            let mut sess = Session::new(self.model, e.as_deref())?;
            let pads = cfg.n_ctx - l;
            let mut logits = Vec::new();
            for _ in 0..pads {
                logits = sess.step(PAD)?.to_vec();
            }
            for k in 0..l {
                if dec.position() > h.body_bits + 64 {
                    return Err(Error::format("bitstream", "body ended early"));
                }
                let t = dec.decode(&FreqTable::from_logits(&logits)?) as u32;
                out.push(t);
                if k + 1 < l {
                    logits = sess.step(t)?.to_vec();
                }
            }
        }
        if token_checksum(&out) != h.token_checksum {
            return Err(Error::Checksum("decoded tokens do not match the stream checksum".into()));
        }
        Ok(out)
    }
}

/// Achieved and predicted bits per byte of a corpus.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodecReport {
    pub documents: Vec<EncodeStats>,
    pub header_bits: u64,
    /// (payload + body) bits per byte, headers excluded.
    pub achieved_bpb: f64,
    /// The same corpus priced from the model's mean loss and embedding size.
    pub analytic: CompressionReport,
    /// |achieved - analytic| / analytic.
    pub relative_gap: f64,
    /// Every document decoded back to its tokens.
    pub verified: bool,
}

impl CodecReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Compresses every document, optionally decoding each back, and compares
/// the bits written with the analytic cost. `bytes` is the corpus size in
/// bytes.
pub fn measure_bpb(codec: &Codec<'_>, docs: &[Vec<u32>], bytes: u64, verify: bool) -> Result<CodecReport> {
    let mut documents = Vec::with_capacity(docs.len());
    for d in docs {
        let e = codec.encode(d)?;
        if verify && codec.decode(&e.bytes)? != *d {
            return Err(Error::Checksum("round trip changed the tokens".into()));
        }
        documents.push(e.stats);
    }
    let tokens: u64 = documents.iter().map(|s| s.tokens).sum();
    let windows: u64 = documents.iter().map(|s| s.windows).sum();
    let nats: f64 = documents.iter().map(|s| s.model_nats).sum();
    let written: u64 = documents.iter().map(|s| s.payload_bits + s.body_bits).sum();
    let stats = CorpusStats::new(tokens, bytes)?;
    let cfg = codec.model.config();
    let (n_p, b_p, w) = match codec.mode() {
        Mode::Eem => (cfg.d_e, codec.quant.bits(), windows as usize),
        Mode::Causal => (0, 0, 0),
    };
    let analytic = CompressionReport::new(nats / tokens as f64, n_p, b_p, cfg.n_ctx, w, &stats)?;
    let achieved_bpb = written as f64 / bytes as f64;
    Ok(CodecReport {
        header_bits: (docs.len() * HEADER_BYTES * 8) as u64,
        relative_gap: (achieved_bpb - analytic.bpb).abs() / analytic.bpb,
        achieved_bpb,
        analytic,
        documents,
        verified: verify,
    })
}

#[cfg(test)]
mod tests;
