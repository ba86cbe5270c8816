//! Training: schedule, AdamW, entropy-scaled objective, early stopping and
//! resumable runs.

mod data;
mod ledger;
mod optim;

use std::collections::BTreeMap;
use std::path::Path;

pub use data::{batch_indices, Windows};
pub use ledger::{LedgerRow, RunLedger, CSV_HEADER};
pub use optim::{clip_grad_norm, grad_norm, lr_at, AdamState, AdamW};

use crate::error::{Error, Result};
use crate::model::{archive, parse, Backbone, Batch, Bound, Family, ForwardOpts, Model};
use crate::tensor::{Tape, Tensor, Var};

/// Per-token L1 distance to target entropies, summed. Targets must be
/// non-negative and line up with the losses.
pub fn entropy_scaled_loss(losses: &[f64], targets: &[f64]) -> Result<f64> {
    if losses.len() != targets.len() {
        return Err(Error::shape("entropy_scaled_loss", &[losses.len()], &[targets.len()]));
    }
    if let Some(t) = targets.iter().find(|t| !(**t >= 0.0)) {
        return Err(Error::Config(format!("entropy target {t} is negative or NaN")));
    }
    Ok(losses.iter().zip(targets).map(|(l, e)| (l - e).abs()).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Summed (here: averaged) token cross-entropy.
    CrossEntropy,
    /// L1 distance of each token's loss to its target entropy.
    EntropyScaled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    pub eval_every: usize,
    /// Upper bound on evaluation windows.
    pub eval_windows: usize,
    /// Evaluations without improvement tolerated before stopping.
    pub patience: Option<usize>,
    pub objective: Objective,
    /// Second-order target alignment.
    pub shifted: bool,
}

impl TrainConfig {
    pub fn new(backbone: Backbone, total_steps: usize, batch_size: usize) -> Self {
        Self {
            max_lr: match backbone {
                Backbone::Transformer => 2e-4,
                Backbone::Mixer => 5e-4,
            },
            warmup_steps: 500.min(total_steps.saturating_sub(1)),
            total_steps,
            batch_size,
            optimizer: AdamW::default(),
            clip_norm: 1.0,
            seed: 0,
            eval_every: 250,
            eval_windows: 2000,
            patience: None,
            objective: Objective::CrossEntropy,
            shifted: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.max_lr > 0.0) {
            return bad("max_lr must be positive");
        }
        if self.warmup_steps >= self.total_steps {
            return bad("warmup_steps must be below total_steps");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch_size and eval_every must be positive");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("max_lr", format!("{:?}", self.max_lr));
        put("warmup_steps", self.warmup_steps.to_string());
        put("total_steps", self.total_steps.to_string());
        put("batch_size", self.batch_size.to_string());
        put("beta1", format!("{:?}", self.optimizer.beta1));
        put("beta2", format!("{:?}", self.optimizer.beta2));
        put("eps", format!("{:?}", self.optimizer.eps));
        put("weight_decay", format!("{:?}", self.optimizer.weight_decay));
        put("clip_norm", format!("{:?}", self.clip_norm));
        put("seed", self.seed.to_string());
        put("eval_every", self.eval_every.to_string());
        put("eval_windows", self.eval_windows.to_string());
        put("patience", self.patience.map(|p| p.to_string()).unwrap_or_else(|| "none".into()));
        put(
            "objective",
            match self.objective {
                Objective::CrossEntropy => "cross_entropy",
                Objective::EntropyScaled => "entropy_scaled",
            }
            .into(),
        );
        put("shifted", self.shifted.to_string());
        m
    }

    pub fn apply_kv<'a>(&mut self, kv: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        for (k, v) in kv {
            match k {
                "max_lr" => self.max_lr = parse(k, v)?,
                "warmup_steps" => self.warmup_steps = parse(k, v)?,
                "total_steps" => self.total_steps = parse(k, v)?,
                "batch_size" => self.batch_size = parse(k, v)?,
                "beta1" => self.optimizer.beta1 = parse(k, v)?,
                "beta2" => self.optimizer.beta2 = parse(k, v)?,
                "eps" => self.optimizer.eps = parse(k, v)?,
                "weight_decay" => self.optimizer.weight_decay = parse(k, v)?,
                "clip_norm" => self.clip_norm = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "eval_every" => self.eval_every = parse(k, v)?,
                "eval_windows" => self.eval_windows = parse(k, v)?,
                "patience" => self.patience = if v.trim() == "none" { None } else { Some(parse(k, v)?) },
                "objective" => {
                    self.objective = match v.trim() {
                        "cross_entropy" => Objective::CrossEntropy,
                        "entropy_scaled" => Objective::EntropyScaled,
                        o => return Err(Error::Config(format!("unknown objective {o:?}"))),
                    }
                }
                "shifted" => self.shifted = parse(k, v)?,
                other => return Err(Error::Config(format!("unknown training key {other:?}"))),
            }
        }
        Ok(())
    }
}

/// Loss of one batch as recorded on a tape.
pub struct BatchLoss {
    /// Scalar to differentiate.
    pub root: Var,
    /// Mean token cross-entropy (regression MSE for second-order models).
    pub mean_loss: f64,
    /// Mean entropy-scaled objective, when requested.
    pub scaled: Option<f64>,
    /// Rows contributing to `mean_loss`.
    pub count: usize,
    /// Parameter handles, for reading gradients.
    pub bound: Bound,
}

/// Builds the training loss for a block of windows.
///
/// `entropy` holds per-token targets aligned with `tokens` (NaN where
/// unknown). Second-order models always need it; the entropy-scaled
/// objective compares each predicted token's loss with its target.
pub fn batch_loss(model: &Model<f32>, tape: &mut Tape<f32>, tokens: &[u32], entropy: Option<&[f32]>, batch: usize, opts: &ForwardOpts<'_>, objective: Objective) -> Result<BatchLoss> {
    let bound = model.bind(tape, tape.grad_enabled());
    let seq = tokens.len() / batch.max(1);
    let b = Batch::new(tokens, batch, seq)?;
    let out = model.forward(tape, &bound, &b, opts)?;
    let cfg = model.config();
    if cfg.family == Family::SecondOrder {
        let ent = entropy.ok_or_else(|| Error::Config("second-order training needs entropy targets".into()))?;
        let (rows, tgt): (Vec<usize>, Vec<f32>) = out
            .targets
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.and_then(|p| ent[p].is_finite().then_some((r, ent[p]))))
            .unzip();
        if rows.is_empty() {
            return Err(Error::Empty("entropy targets in batch"));
        }
        let p = tape.gather_rows(out.logits, &rows)?;
        let d = tape.abs_diff(p, &tgt)?;
        let sq = tape.mul(d, d)?;
        let root = tape.mean(sq);
        let mean_loss = tape.value(root).data()[0] as f64;
        return Ok(BatchLoss {
            root,
            mean_loss,
            scaled: None,
            count: rows.len(),
            bound,
        });
    }
    let ce = tape.cross_entropy(out.logits, &out.targets)?;
    let active: Vec<usize> = out.targets.iter().enumerate().filter_map(|(r, t)| t.map(|_| r)).collect();
    if active.is_empty() {
        return Err(Error::Empty("predicted tokens in batch"));
    }
    let ce_vals = tape.value(ce).data();
    let mean_loss = active.iter().map(|&r| ce_vals[r] as f64).sum::<f64>() / active.len() as f64;
    match objective {
        Objective::CrossEntropy => {
            let s = tape.sum(ce);
            let root = tape.scale(s, 1.0 / active.len() as f64);
            Ok(BatchLoss {
                root,
                mean_loss,
                scaled: None,
                count: active.len(),
                bound,
            })
        }
        Objective::EntropyScaled => {
            let ent = entropy.ok_or_else(|| Error::Config("entropy-scaled training needs entropy targets".into()))?;
            let (rows, tgt): (Vec<usize>, Vec<f32>) = active
                .iter()
                .filter_map(|&r| {
                    let p = model.predicted_position(r, seq)?;
                    ent[p].is_finite().then_some((r, ent[p]))
                })
                .unzip();
            if rows.is_empty() {
                return Err(Error::Empty("entropy targets in batch"));
            }
            let col = tape.reshape(ce, vec![tokens.len(), 1])?;
            let picked = tape.gather_rows(col, &rows)?;
            let d = tape.abs_diff(picked, &tgt)?;
            let root = tape.mean(d);
            let scaled = tape.value(root).data()[0] as f64;
            Ok(BatchLoss {
                root,
                mean_loss,
                scaled: Some(scaled),
                count: rows.len(),
                bound,
            })
        }
    }
}

/// Token-weighted mean loss over (at most `limit`) windows, no noise or dropout.
pub fn evaluate(model: &Model<f32>, data: &Windows, opts: &ForwardOpts<'_>, limit: usize, chunk: usize) -> Result<f64> {
    let n = data.len().min(limit);
    if n == 0 {
        return Err(Error::Empty("evaluation windows"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for start in (0..n).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
        let (tokens, ent) = data.gather(&idx);
        let mut tape = Tape::inference();
        match batch_loss(model, &mut tape, &tokens, ent.as_deref(), idx.len(), opts, Objective::CrossEntropy) {
            Ok(l) => {
                total += l.mean_loss * l.count as f64;
                count += l.count;
            }
            Err(Error::Empty(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::Empty("evaluation targets"));
    }
    Ok(total / count as f64)
}

/// Evaluation batch size used by the trainer.
const EVAL_CHUNK: usize = 16;

/// A training run in progress.
pub struct Trainer {
    model: Model<f32>,
    config: TrainConfig,
    state: AdamState,
    ledger: RunLedger,
    best: Option<Vec<Tensor<f32>>>,
    stale_evals: usize,
    stopped: bool,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let state = AdamState::new(model.params());
        Ok(Self {
            model,
            config,
            state,
            ledger: RunLedger::new(),
            best: None,
            stale_evals: 0,
            stopped: false,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    /// Completed optimizer steps.
    pub fn step_count(&self) -> usize {
        self.state.step as usize
    }

    pub fn is_done(&self) -> bool {
        self.stopped || self.step_count() >= self.config.total_steps
    }

    /// Parameters of the lowest-eval checkpoint, or the current ones if no
    /// evaluation happened.
    pub fn best_model(&self) -> Model<f32> {
        let mut m = self.model.clone();
        if let Some(b) = &self.best {
            m.params_mut().clone_from_slice(b);
        }
        m
    }

    fn step_seed(&self, step: usize) -> u64 {
        self.config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }

    /// Runs one optimizer step (and an evaluation when due). Returns the ledger row.
    pub fn step(&mut self, train: &Windows, eval: Option<&Windows>) -> Result<LedgerRow> {
        if train.is_empty() {
            return Err(Error::Empty("training windows"));
        }
        if self.config.patience.is_some() && eval.is_none_or(Windows::is_empty) {
            return Err(Error::Empty("evaluation windows (patience is set)"));
        }
        let step = self.step_count();
        let cfg = &self.config;
        let idx = batch_indices(train.len(), cfg.batch_size, step, cfg.seed);
        let (tokens, ent) = train.gather(&idx);
        let opts = ForwardOpts {
            train: true,
            seed: self.step_seed(step),
            shifted: cfg.shifted,
            ..Default::default()
        };
        let mut tape = Tape::new();
        let loss = batch_loss(&self.model, &mut tape, &tokens, ent.as_deref(), idx.len(), &opts, cfg.objective)?;
        if !loss.mean_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {step}")));
        }
        tape.backward(loss.root)?;
        let mut grads: Vec<Vec<f32>> = loss
            .bound
            .vars()
            .iter()
            .zip(self.model.params())
            .map(|(&v, p)| tape.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; p.numel()]))
            .collect();
        drop(tape);
        if cfg.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, cfg.clip_norm);
        }
        let lr = lr_at(step, cfg.warmup_steps, cfg.total_steps, cfg.max_lr);
        cfg.optimizer.step(self.model.params_mut(), &grads, &mut self.state, lr)?;
        let done = self.step_count();
        let eval_loss = match eval {
            Some(e) if !e.is_empty() && (done % self.config.eval_every == 0 || done == self.config.total_steps) => {
                Some(evaluate(&self.model, e, &ForwardOpts::default(), self.config.eval_windows, EVAL_CHUNK)?)
            }
            _ => None,
        };
        let row = LedgerRow {
            step: done,
            lr,
            train_loss: loss.mean_loss,
            scaled_loss: loss.scaled,
            eval_loss,
            tokens: (done * self.config.batch_size * train.n_ctx()) as u64,
        };
        let prev_best = self.ledger.best();
        self.ledger.push(row.clone())?;
        if let Some(e) = eval_loss {
            if prev_best.is_none_or(|(_, b)| e < b) {
                self.best = Some(self.model.params().to_vec());
                self.stale_evals = 0;
            } else {
                self.stale_evals += 1;
                if self.config.patience.is_some_and(|p| self.stale_evals > p) {
                    self.stopped = true;
                }
            }
        }
        Ok(row)
    }

    /// Steps until `total_steps` or early stopping; `on_row` sees every ledger row.
    pub fn run(&mut self, train: &Windows, eval: Option<&Windows>, mut on_row: impl FnMut(&LedgerRow)) -> Result<()> {
        while !self.is_done() {
            let row = self.step(train, eval)?;
            on_row(&row);
        }
        Ok(())
    }

    /// Serializes parameters, optimizer moments, best checkpoint and ledger.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta: Vec<(String, String)> = self.model.config().to_kv().into_iter().map(|(k, v)| (format!("model.{k}"), v)).collect();
        meta.extend(self.config.to_kv().into_iter().map(|(k, v)| (format!("train.{k}"), v)));
        meta.push(("state.step".into(), self.state.step.to_string()));
        meta.push(("state.stale_evals".into(), self.stale_evals.to_string()));
        meta.push(("state.stopped".into(), self.stopped.to_string()));
        for (i, line) in self.ledger.to_csv().lines().enumerate() {
            meta.push((format!("ledger.{i:08}"), line.to_string()));
        }
        let moments: Vec<(String, Tensor<f32>)> = self
            .model
            .names()
            .iter()
            .zip(self.model.params())
            .enumerate()
            .flat_map(|(i, (n, p))| {
                let shape = p.shape().to_vec();
                [
                    (format!("adam_m.{n}"), Tensor::new(shape.clone(), self.state.m[i].clone()).expect("moment shape")),
                    (format!("adam_v.{n}"), Tensor::new(shape, self.state.v[i].clone()).expect("moment shape")),
                ]
            })
            .collect();
        let mut tensors: Vec<(String, &Tensor<f32>)> = self.model.names().iter().map(|n| format!("param.{n}")).zip(self.model.params()).collect();
        tensors.extend(moments.iter().map(|(n, t)| (n.clone(), t)));
        if let Some(b) = &self.best {
            tensors.extend(self.model.names().iter().map(|n| format!("best.{n}")).zip(b));
        }
        let refs: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        archive::write(&meta, &refs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ar = archive::read(bytes)?;
        let pick = |prefix: &'static str| ar.meta.iter().filter_map(move |(k, v)| k.strip_prefix(prefix).map(|k| (k, v.as_str())));
        let model_cfg = crate::model::ModelConfig::from_kv(pick("model."))?;
        let mut config = TrainConfig::new(model_cfg.backbone, 1, 1);
        config.apply_kv(pick("train."))?;
        let meta = |k: &str| ar.meta(k).ok_or_else(|| Error::format("training state", format!("missing {k}")));
        let mut model = Model::<f32>::new(model_cfg, 0)?;
        let mut state = AdamState::new(model.params());
        state.step = parse("state.step", meta("state.step")?)?;
        let stale_evals = parse("state.stale_evals", meta("state.stale_evals")?)?;
        let stopped = parse("state.stopped", meta("state.stopped")?)?;
        let csv: String = ar.meta.iter().filter(|(k, _)| k.starts_with("ledger.")).map(|(_, v)| format!("{v}\n")).collect();
        let ledger = RunLedger::from_csv(&csv)?;
        let find = |name: String| ar.tensors.iter().find(|(n, _)| *n == name).map(|(_, t)| t);
        let names = model.names().to_vec();
        let mut best = Vec::new();
        for (i, n) in names.iter().enumerate() {
            let get = |prefix: &str| find(format!("{prefix}.{n}")).ok_or_else(|| Error::format("training state", format!("missing {prefix}.{n}")));
            let p = get("param")?;
            if p.shape() != model.params()[i].shape() {
                return Err(Error::format("training state", format!("{n} has shape {:?}", p.shape())));
            }
            model.params_mut()[i] = p.clone();
            state.m[i] = get("adam_m")?.data().to_vec();
            state.v[i] = get("adam_v")?.data().to_vec();
            if let Some(b) = find(format!("best.{n}")) {
                best.push(b.clone());
            }
        }
        config.validate()?;
        Ok(Self {
            model,
            config,
            state,
            ledger,
            best: (best.len() == names.len()).then_some(best),
            stale_evals,
            stopped,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
