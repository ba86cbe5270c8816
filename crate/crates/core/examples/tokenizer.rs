//! Trains a byte-level BPE tokenizer on the sample corpus and reports
//! compression of the token stream.
//!
//!     cargo run --release --example tokenizer -- 1024

use std::path::Path;

use entroscope::corpus::read_corpus;
use entroscope::tokenizer::{corpus_stats, Tokenizer};

fn main() -> entroscope::Result<()> {
    let vocab: usize = std::env::args().nth(1).map_or(1024, |s| s.parse().expect("vocab size"));
    let docs = read_corpus(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_corpus.txt")))?;
    for tok in [Tokenizer::bytes(), Tokenizer::train(&docs, vocab)?] {
        let s = corpus_stats(&tok, &docs)?;
        println!("vocab {:>5}: {} tokens for {} bytes, {:.3} bytes/token", tok.vocab_size(), s.tokens, s.bytes, s.bytes_per_token());
    }
    let tok = Tokenizer::train(&docs, vocab)?;
    let text = "Der Fluss und la rivière: река, ποτάμι, 河流.";
    let ids = tok.encode(text);
    let pieces: Vec<String> = ids.iter().map(|&t| tok.token_text(t)).collect();
    println!("{text}\n  -> {} tokens {pieces:?}", ids.len());
    assert_eq!(tok.decode(&ids)?, text);
    Ok(())
}
