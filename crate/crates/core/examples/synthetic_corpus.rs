//! Writes a seeded mixed-language corpus in the blank-line document format.
//!
//!     cargo run --example synthetic_corpus -- data/sample_corpus.txt 200 7

use std::path::PathBuf;

use entroscope::corpus::{synthetic_corpus, write_corpus};

fn main() -> entroscope::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "corpus.txt".into()));
    let n: usize = args.next().map_or(200, |s| s.parse().expect("document count"));
    let seed: u64 = args.next().map_or(7, |s| s.parse().expect("seed"));
    let docs = synthetic_corpus(n, seed);
    write_corpus(&out, &docs)?;
    let bytes: usize = docs.iter().map(String::len).sum();
    println!("{} documents, {bytes} bytes -> {}", docs.len(), out.display());
    Ok(())
}
