//! Train/test cross-entropy audits against a Markov source of known entropy.

use serde::{Deserialize, Serialize};

use crate::entropy::{generalization_audit, markov_corpus, plug_in_rate, AuditVerdict, MarkovSource, SYMBOL_OFFSET};
use crate::error::{Error, Result};
use crate::model::{Backbone, Family, ForwardOpts, Model, ModelConfig};
use crate::train::{evaluate, LedgerRow, RunLedger, TrainConfig, Trainer, Windows};

#[derive(Clone, Debug, PartialEq)]
pub struct AuditSetup {
    pub train_tokens: usize,
    pub test_tokens: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
}

impl AuditSetup {
    /// An oversized causal transformer on a 50k-token sample: enough
    /// capacity to memorize the training windows.
    pub fn memorization(states: usize) -> Self {
        let mut model = ModelConfig::new(Family::Causal, Backbone::Transformer, states + SYMBOL_OFFSET as usize, 96, 3, 64);
        model.n_heads = 4;
        let mut train = TrainConfig::new(Backbone::Transformer, 3000, 32);
        train.max_lr = 2e-3;
        train.warmup_steps = 100;
        train.eval_every = 100;
        train.eval_windows = usize::MAX;
        train.optimizer.weight_decay = 0.0;
        Self {
            train_tokens: 50_000,
            test_tokens: 20_000,
            model,
            train,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub step: usize,
    pub tokens: u64,
    pub train_ce: f64,
    pub test_ce: f64,
    pub verdict: AuditVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Analytic entropy rate, nats/token.
    pub entropy_rate: f64,
    pub plug_in_train: f64,
    pub plug_in_test: f64,
    /// Combined standard error of the two plug-in estimates.
    pub std_err: f64,
    pub rows: Vec<AuditRow>,
}

impl AuditReport {
    /// Some evaluation saw train loss below the entropy rate and test loss above it.
    pub fn memorized(&self) -> bool {
        self.rows.iter().any(|r| r.train_ce < self.entropy_rate && r.test_ce > self.entropy_rate)
    }

    pub fn all_pass(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.verdict.pass)
    }

    pub fn min_slack(&self) -> f64 {
        self.rows.iter().map(|r| r.verdict.slack).fold(f64::INFINITY, f64::min)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,tokens,train_ce,test_ce,entropy_rate,slack,tolerance,pass\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.step, r.tokens, r.train_ce, r.test_ce, self.entropy_rate, r.verdict.slack, r.verdict.tolerance, r.verdict.pass
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Trains `setup.model` on a sample of `source` and audits every evaluation.
/// Train loss is measured over the whole training sample, not the batch.
pub fn run_markov_audit(source: &MarkovSource, setup: &AuditSetup, mut on_row: impl FnMut(&AuditRow)) -> Result<AuditReport> {
    let n = setup.model.n_ctx;
    if setup.model.vocab < source.states() + SYMBOL_OFFSET as usize {
        return Err(Error::Config("model vocabulary is smaller than the source alphabet".into()));
    }
    let docs = |tokens: usize, seed: u64| markov_corpus(source, tokens.div_ceil(n), n, seed);
    let train_docs = docs(setup.train_tokens, setup.seed.wrapping_mul(2).wrapping_add(1));
    let test_docs = docs(setup.test_tokens, setup.seed.wrapping_mul(2).wrapping_add(2));
    let (plug_in_train, se_train) = plug_in_rate(&train_docs, source.states())?;
    let (plug_in_test, se_test) = plug_in_rate(&test_docs, source.states())?;
    let std_err = se_train.hypot(se_test);
    let train = Windows::from_documents(&train_docs, n)?;
    let test = Windows::from_documents(&test_docs, n)?;
    let mut cfg = setup.train.clone();
    cfg.seed = setup.seed;
    cfg.eval_windows = usize::MAX;
    let mut trainer = Trainer::new(Model::new(setup.model.clone(), setup.seed)?, cfg)?;
    let h = source.rate();
    let mut rows = Vec::new();
    while !trainer.is_done() {
        let r = trainer.step(&train, Some(&test))?;
        if let Some(test_ce) = r.eval_loss {
            let train_ce = evaluate(trainer.model(), &train, &ForwardOpts::default(), usize::MAX, 32)?;
            let row = AuditRow {
                step: r.step,
                tokens: r.tokens,
                train_ce,
                test_ce,
                verdict: generalization_audit(train_ce, test_ce, h, std_err),
            };
            on_row(&row);
            rows.push(row);
        }
    }
    Ok(AuditReport {
        entropy_rate: h,
        plug_in_train,
        plug_in_test,
        std_err,
        rows,
    })
}

/// Audits an existing ledger's evaluated rows, using each row's recorded
/// training loss as the train cross-entropy.
pub fn audit_ledger(ledger: &RunLedger, h: f64, se: f64) -> Vec<(LedgerRow, AuditVerdict)> {
    ledger
        .rows()
        .iter()
        .filter_map(|r| r.eval_loss.map(|e| (r.clone(), generalization_audit(r.train_loss, e, h, se))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equality_ledger_passes() {
        let mut l = RunLedger::new();
        for step in 1..=3 {
            l.push(LedgerRow {
                step,
                lr: 1e-3,
                train_loss: 0.5,
                scaled_loss: None,
                eval_loss: Some(0.5),
                tokens: step as u64 * 64,
            })
            .unwrap();
        }
        let v = audit_ledger(&l, 0.5, 0.0);
        assert_eq!(v.len(), 3);
        assert!(v.iter().all(|(_, a)| a.pass && a.slack == 0.0));
    }

    #[test]
    fn short_audit_runs_and_stays_consistent() {
        let source = MarkovSource::new(vec![vec![0.9, 0.1], vec![0.5, 0.5]]).unwrap();
        let mut setup = AuditSetup::memorization(2);
        setup.train_tokens = 2000;
        setup.test_tokens = 2000;
        setup.model = ModelConfig::new(Family::Causal, Backbone::Transformer, 5, 16, 1, 32);
        setup.model.n_heads = 2;
        setup.train.total_steps = 40;
        setup.train.warmup_steps = 5;
        setup.train.eval_every = 20;
        setup.train.batch_size = 8;
        let r = run_markov_audit(&source, &setup, |_| {}).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!((r.plug_in_train - r.entropy_rate).abs() < 0.05);
        assert!(r.to_csv().lines().count() == 3);
        for row in &r.rows {
            assert!((row.verdict.slack - (row.train_ce + row.test_ce - 2.0 * r.entropy_rate)).abs() < 1e-12);
        }
    }
}
