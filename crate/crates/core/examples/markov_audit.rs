//! Trains an oversized model on a two-state Markov sample and audits train
//! and held-out cross-entropy against the chain's entropy rate.
//!
//! Extra `section.key=value` arguments override the setup, e.g.
//! `cargo run --release --example markov_audit -- train.total_steps=500`.

use entroscope::audit::{run_markov_audit, AuditSetup};
use entroscope::entropy::MarkovSource;

fn main() -> entroscope::Result<()> {
    let source = MarkovSource::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]])?;
    let mut setup = AuditSetup::memorization(2);
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k.split_once('.') {
            Some(("model", k)) => setup.model.apply_kv([(k, v)])?,
            Some(("train", k)) => setup.train.apply_kv([(k, v)])?,
            _ if k == "train_tokens" => setup.train_tokens = v.parse().expect("count"),
            _ if k == "seed" => setup.seed = v.parse().expect("seed"),
            _ => panic!("unknown key {k}"),
        }
    }
    println!("entropy rate {:.4} nats/token", source.rate());
    println!("{:>6} {:>9} {:>9} {:>9} {:>5}", "step", "train", "test", "slack", "ok");
    let t0 = std::time::Instant::now();
    let report = run_markov_audit(&source, &setup, |r| {
        println!("{:>6} {:>9.4} {:>9.4} {:>9.4} {:>5}  ({:.0?})", r.step, r.train_ce, r.test_ce, r.verdict.slack, r.verdict.pass, t0.elapsed());
    })?;
    println!(
        "plug-in {:.4} / {:.4}, se {:.5}; memorized: {}; all pass: {}",
        report.plug_in_train,
        report.plug_in_test,
        report.std_err,
        report.memorized(),
        report.all_pass()
    );
    Ok(())
}
