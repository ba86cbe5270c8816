//! Second-order entropy estimation: a model regresses the per-token losses
//! of a causal model, with targets either aligned to each token or shifted
//! one position earlier.
//!
//!     cargo run --release --example second_order

use entroscope::corpus::synthetic_corpus;
use entroscope::entropy::stats::ols;
use entroscope::entropy::{causal_entropies, second_order_entropies};
use entroscope::model::{Backbone, Family, Model, ModelConfig};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{TrainConfig, Trainer, Windows};

fn config(family: Family) -> ModelConfig {
    let mut c = ModelConfig::new(family, Backbone::Transformer, Tokenizer::bytes().len(), 48, 2, 48);
    c.n_heads = 4;
    c
}

fn schedule(steps: usize, shifted: bool) -> TrainConfig {
    let mut t = TrainConfig::new(Backbone::Transformer, steps, 16);
    t.max_lr = 1e-3;
    t.warmup_steps = steps / 20;
    t.shifted = shifted;
    t
}

fn main() -> entroscope::Result<()> {
    let tok = Tokenizer::bytes();
    let docs: Vec<Vec<u32>> = synthetic_corpus(900, 9).iter().map(|t| tok.encode(t)).collect();
    let (ref_docs, docs) = docs.split_at(500);
    let mut causal = Trainer::new(Model::new(config(Family::Causal), 1)?, schedule(600, false))?;
    causal.run(&Windows::from_documents(ref_docs, 48)?, None, |_| {})?;
    let targets: Vec<Vec<f64>> = docs.iter().map(|d| causal_entropies(causal.model(), d)).collect::<entroscope::Result<_>>()?;
    let data = Windows::with_entropy(&docs[..350], &targets[..350], 48)?;
    for shifted in [false, true] {
        let mut tr = Trainer::new(Model::new(config(Family::SecondOrder), 2)?, schedule(600, shifted))?;
        tr.run(&data, None, |_| {})?;
        let (mut p, mut y) = (Vec::new(), Vec::new());
        for (d, t) in docs[350..].iter().zip(&targets[350..]) {
            for (a, b) in second_order_entropies(tr.model(), d, shifted)?.into_iter().zip(t) {
                if a.is_finite() && b.is_finite() {
                    p.push(a);
                    y.push(*b);
                }
            }
        }
        let fit = ols(&p, &y);
        println!("shifted={shifted:<5} held-out R2 {:.3}  slope {:.3}  over {} tokens", fit.r2, fit.slope, p.len());
    }
    Ok(())
}
