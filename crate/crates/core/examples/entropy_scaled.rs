//! Entropy-informed training on a set small enough to memorize: plain
//! cross-entropy against the objective that pulls each token's loss toward
//! a reference model's estimate.
//!
//!     cargo run --release --example entropy_scaled

use entroscope::corpus::synthetic_corpus;
use entroscope::entropy::causal_entropies;
use entroscope::model::{Backbone, Family, Model, ModelConfig};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{Objective, TrainConfig, Trainer, Windows};

fn config() -> ModelConfig {
    let mut c = ModelConfig::new(Family::Causal, Backbone::Transformer, Tokenizer::bytes().len(), 64, 2, 64);
    c.n_heads = 4;
    c
}

fn schedule(steps: usize, objective: Objective) -> TrainConfig {
    let mut t = TrainConfig::new(Backbone::Transformer, steps, 16);
    t.max_lr = 1e-3;
    t.warmup_steps = steps / 20;
    t.eval_every = 100;
    t.objective = objective;
    t
}

fn main() -> entroscope::Result<()> {
    let tok = Tokenizer::bytes();
    let enc = |n, seed| -> Vec<Vec<u32>> { synthetic_corpus(n, seed).iter().map(|t| tok.encode(t)).collect() };
    let (reference_docs, small, held_out) = (enc(800, 11), enc(30, 12), enc(100, 13));
    let mut reference = Trainer::new(Model::new(config(), 1)?, schedule(800, Objective::CrossEntropy))?;
    reference.run(&Windows::from_documents(&reference_docs, 64)?, None, |_| {})?;
    let targets: Vec<Vec<f64>> = small.iter().map(|d| causal_entropies(reference.model(), d)).collect::<entroscope::Result<_>>()?;
    let eval = Windows::from_documents(&held_out, 64)?;
    for objective in [Objective::CrossEntropy, Objective::EntropyScaled] {
        let data = match objective {
            Objective::CrossEntropy => Windows::from_documents(&small, 64)?,
            Objective::EntropyScaled => Windows::with_entropy(&small, &targets, 64)?,
        };
        let mut tr = Trainer::new(Model::new(config(), 2)?, schedule(1500, objective))?;
        println!("{objective:?}: {} parameters, {} training tokens", tr.model().parameter_count(), data.token_count());
        tr.run(&data, Some(&eval), |r| {
            if let Some(e) = r.eval_loss {
                println!("  step {:>5}  train {:.4}  eval {:.4}", r.step, r.train_loss, e);
            }
        })?;
    }
    Ok(())
}
