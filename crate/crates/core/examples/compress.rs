//! Compresses mixed-language text with a causal model and an entropy
//! estimation model, checks the round trip and compares achieved bits per
//! byte with the analytic accounting.
//!
//!     cargo run --release --example compress -- 200000

use entroscope::codec::{measure_bpb, Codec, HEADER_BYTES};
use entroscope::corpus::{synthetic_corpus, synthetic_corpus_bytes};
use entroscope::model::{Backbone, Family, Model, ModelConfig, QuantFormat};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{TrainConfig, Trainer, Windows};

fn main() -> entroscope::Result<()> {
    let size: usize = std::env::args().nth(1).map_or(200_000, |s| s.parse().expect("bytes"));
    let tok = Tokenizer::train(&synthetic_corpus(300, 1), 512)?;
    let train: Vec<Vec<u32>> = synthetic_corpus(600, 2).iter().map(|t| tok.encode(t)).collect();
    let texts = synthetic_corpus_bytes(size, 3);
    let docs: Vec<Vec<u32>> = texts.iter().map(|t| tok.encode(t)).collect();
    let bytes: u64 = texts.iter().map(|t| t.len() as u64).sum();
    for family in [Family::Causal, Family::Eem] {
        let mut c = ModelConfig::new(family, Backbone::Transformer, tok.len(), 48, 2, 48);
        c.n_heads = 4;
        c.d_e = 12;
        let mut t = TrainConfig::new(Backbone::Transformer, 500, 16);
        t.max_lr = 1e-3;
        t.warmup_steps = 25;
        let mut tr = Trainer::new(Model::new(c, 4)?, t)?;
        tr.run(&Windows::from_documents(&train, 48)?, None, |_| {})?;
        let codec = Codec::new(tr.model(), tok.checksum())?.with_quant(QuantFormat::E4m3);
        let r = measure_bpb(&codec, &docs, bytes, true)?;
        println!(
            "{family:>6}: {} documents, lossless {}, {:.4} bits/byte achieved, {:.4} analytic (gap {:.3}%), headers {} bytes each",
            r.documents.len(),
            r.verified,
            r.achieved_bpb,
            r.analytic.bpb,
            100.0 * r.relative_gap,
            HEADER_BYTES
        );
        if family == Family::Eem {
            println!("        embedding share {:.4} of {:.4} bits/byte", r.analytic.bpb_a, r.analytic.bpb);
        }
    }
    Ok(())
}
