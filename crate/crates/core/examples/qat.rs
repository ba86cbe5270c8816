//! Quantization-aware training: uniform noise on the encoder output during
//! training, then evaluation with the embedding rounded to each 8- and
//! 16-bit format.
//!
//!     cargo run --release --example qat -- 0.25

use entroscope::corpus::synthetic_corpus;
use entroscope::model::{Backbone, Family, ForwardOpts, Model, ModelConfig, NoiseSite, QuantFormat};
use entroscope::tokenizer::Tokenizer;
use entroscope::train::{evaluate, TrainConfig, Trainer, Windows};

fn main() -> entroscope::Result<()> {
    let q: f64 = std::env::args().nth(1).map_or(0.25, |s| s.parse().expect("noise amplitude"));
    let tok = Tokenizer::bytes();
    let docs: Vec<Vec<u32>> = synthetic_corpus(700, 8).iter().map(|t| tok.encode(t)).collect();
    let (train, eval) = docs.split_at(600);
    let train = Windows::from_documents(train, 48)?;
    let eval = Windows::from_documents(eval, 48)?;
    for amp in [0.0, q] {
        let mut c = ModelConfig::new(Family::Eem, Backbone::Transformer, tok.len(), 48, 2, 48);
        c.n_heads = 4;
        c.d_e = 12;
        c.qat_q = amp;
        c.noise_site = NoiseSite::Pre;
        let mut t = TrainConfig::new(Backbone::Transformer, 600, 16);
        t.max_lr = 1e-3;
        t.warmup_steps = 30;
        let mut tr = Trainer::new(Model::new(c, 3)?, t)?;
        tr.run(&train, None, |_| {})?;
        let base = evaluate(tr.model(), &eval, &ForwardOpts::default(), usize::MAX, 16)?;
        print!("q={amp:<5} float {base:.4}");
        for f in QuantFormat::ALL {
            let opts = ForwardOpts {
                quantize: Some(f),
                ..Default::default()
            };
            print!("  {f} {:+.5}", evaluate(tr.model(), &eval, &opts, usize::MAX, 16)? - base);
        }
        println!();
    }
    Ok(())
}
