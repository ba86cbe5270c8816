//! Trains a small causal transformer on the sample corpus with a held-out
//! split, printing the ledger at each evaluation, then reports bits per byte.
//!
//!     cargo run --release --example train_causal -- 800

use std::path::Path;

use entroscope::corpus::read_corpus;
use entroscope::entropy::bpb_causal;
use entroscope::model::{Backbone, Family, Model, ModelConfig};
use entroscope::tokenizer::{corpus_stats, Tokenizer};
use entroscope::train::{TrainConfig, Trainer, Windows};

fn main() -> entroscope::Result<()> {
    let steps: usize = std::env::args().nth(1).map_or(800, |s| s.parse().expect("steps"));
    let texts = read_corpus(Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/data/sample_corpus.txt")))?;
    let tok = Tokenizer::bytes();
    let docs: Vec<Vec<u32>> = texts.iter().map(|t| tok.encode(t)).collect();
    let (train, eval) = docs.split_at(180);
    let train = Windows::from_documents(train, 64)?;
    let eval = Windows::from_documents(eval, 64)?;

    let mut model = ModelConfig::new(Family::Causal, Backbone::Transformer, tok.len(), 64, 2, 64);
    model.n_heads = 4;
    let mut cfg = TrainConfig::new(Backbone::Transformer, steps, 16);
    cfg.max_lr = 1e-3;
    cfg.warmup_steps = steps / 20;
    cfg.eval_every = 100;
    let mut trainer = Trainer::new(Model::new(model, 0)?, cfg)?;
    println!("{} parameters, {} training windows", trainer.model().parameter_count(), train.len());
    trainer.run(&train, Some(&eval), |r| {
        if let Some(e) = r.eval_loss {
            println!("step {:>5}  lr {:.2e}  train {:.4}  eval {:.4}", r.step, r.lr, r.train_loss, e);
        }
    })?;
    let (step, best) = trainer.ledger().best().expect("evaluated");
    let stats = corpus_stats(&tok, &texts[180..])?;
    println!("best eval {best:.4} nats/token at step {step} = {:.3} bits/byte", bpb_causal(best, &stats)?);
    Ok(())
}
