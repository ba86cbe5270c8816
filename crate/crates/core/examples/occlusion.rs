//! Occlusion attributions of an entropy estimation model: how much each
//! token's prediction changes when the embedding is removed, under the l1
//! and cosine metrics, against the token's causal loss.
//!
//!     cargo run --release --example occlusion

use entroscope::corpus::synthetic_corpus;
use entroscope::entropy::stats::pearson;
use entroscope::entropy::{causal_entropies, occlusion_scores, OcclusionMetric};
use entroscope::model::{Backbone, Family, Model, ModelConfig};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{TrainConfig, Trainer, Windows};

fn fit(family: Family, docs: &[Vec<u32>]) -> entroscope::Result<Model<f32>> {
    let mut c = ModelConfig::new(family, Backbone::Transformer, Tokenizer::bytes().len(), 48, 2, 48);
    c.n_heads = 4;
    c.d_e = 12;
    let mut t = TrainConfig::new(Backbone::Transformer, 500, 16);
    t.max_lr = 1e-3;
    t.warmup_steps = 25;
    let mut tr = Trainer::new(Model::new(c, 2)?, t)?;
    tr.run(&Windows::from_documents(docs, 48)?, None, |_| {})?;
    Ok(tr.model().clone())
}

fn main() -> entroscope::Result<()> {
    let tok = Tokenizer::bytes();
    let docs: Vec<Vec<u32>> = synthetic_corpus(500, 5).iter().map(|t| tok.encode(t)).collect();
    let eem = fit(Family::Eem, &docs)?;
    let causal = fit(Family::Causal, &docs)?;
    let doc = tok.encode("Le marché de la rivière est très early in the morning.");
    let l1 = occlusion_scores(&eem, &doc, OcclusionMetric::L1)?;
    let cos = occlusion_scores(&eem, &doc, OcclusionMetric::Cosine)?;
    let h = causal_entropies(&causal, &doc)?;
    println!("{:>6} {:>7} {:>7} {:>7}", "token", "l1", "cosine", "causal");
    for i in 0..doc.len() {
        println!("{:>6?} {:>7.3} {:>7.4} {:>7.3}", tok.token_text(doc[i]), l1[i], cos[i], h[i]);
    }
    let keep: Vec<usize> = (0..doc.len()).filter(|&i| l1[i].is_finite() && cos[i].is_finite()).collect();
    let pick = |v: &[f64]| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
    println!("r(l1, cosine) {:.3}   r(l1, causal) {:.3}", pearson(&pick(&l1), &pick(&cos)), pearson(&pick(&l1), &pick(&h)));
    Ok(())
}
