//! Per-token entropy estimates for one document: causal losses, the
//! two-model chain-rule difference (contexts n and n+1) and the
//! single-model variant.
//!
//!     cargo run --release --example per_token_entropy

use entroscope::corpus::synthetic_corpus;
use entroscope::entropy::{causal_entropies, single_model_entropy, two_model_entropy};
use entroscope::model::{Backbone, Family, Model, ModelConfig};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{TrainConfig, Trainer, Windows};

fn causal(n_ctx: usize, docs: &[Vec<u32>]) -> entroscope::Result<Model<f32>> {
    let mut c = ModelConfig::new(Family::Causal, Backbone::Transformer, Tokenizer::bytes().len(), 48, 2, n_ctx);
    c.n_heads = 4;
    let mut t = TrainConfig::new(Backbone::Transformer, 400, 16);
    t.max_lr = 1e-3;
    t.warmup_steps = 20;
    let mut tr = Trainer::new(Model::new(c, 1)?, t)?;
    tr.run(&Windows::from_documents(docs, n_ctx)?, None, |_| {})?;
    Ok(tr.model().clone())
}

fn main() -> entroscope::Result<()> {
    let tok = Tokenizer::bytes();
    let docs: Vec<Vec<u32>> = synthetic_corpus(400, 3).iter().map(|t| tok.encode(t)).collect();
    let theta1 = causal(32, &docs)?;
    let theta2 = causal(33, &docs)?;
    let text = "The river market opened early in the morning.";
    let doc = tok.encode(text);
    let c = causal_entropies(&theta1, &doc)?;
    let two = two_model_entropy(&theta1, &theta2, &doc)?;
    let one = single_model_entropy(&theta1, &doc)?;
    println!("{:>5} {:>6} {:>8} {:>9} {:>8}", "index", "token", "causal", "two-model", "single");
    for i in 0..doc.len() {
        println!("{i:>5} {:>6?} {:>8.3} {:>9.3} {:>8.3}", tok.token_text(doc[i]), c[i], two[i], one[i]);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    println!("means: causal {:.3}, two-model {:.3}, single {:.3} nats/token", mean(&c), mean(&two), mean(&one));
    Ok(())
}
