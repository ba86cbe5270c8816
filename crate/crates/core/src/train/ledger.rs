//! Append-only record of a training run, persisted as CSV.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "step,lr,train_loss,scaled_loss,eval_loss,tokens";

#[derive(Clone, Debug, PartialEq)]
pub struct LedgerRow {
    pub step: usize,
    pub lr: f64,
    /// Mean cross-entropy (or regression loss) of the step's batch, nats.
    pub train_loss: f64,
    /// Entropy-scaled objective when that mode is active.
    pub scaled_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub tokens: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLedger {
    rows: Vec<LedgerRow>,
    /// Step and value of the lowest eval loss so far.
    best: Option<(usize, f64)>,
}

impl RunLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: LedgerRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Config(format!("ledger step {} after {}", row.step, last.step)));
            }
        }
        if let Some(e) = row.eval_loss {
            if self.best.is_none_or(|(_, b)| e < b) {
                self.best = Some((row.step, e));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LedgerRow] {
        &self.rows
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }

    pub fn last(&self) -> Option<&LedgerRow> {
        self.rows.last()
    }

    /// `(step, eval_loss)` for rows that carry an evaluation.
    pub fn evals(&self) -> Vec<(usize, f64)> {
        self.rows.iter().filter_map(|r| r.eval_loss.map(|e| (r.step, e))).collect()
    }

    /// Drops rows after `step`.
    pub fn truncate_after(&mut self, step: usize) {
        let rows = std::mem::take(&mut self.rows);
        self.best = None;
        for r in rows.into_iter().filter(|r| r.step <= step) {
            self.push(r).expect("rows were ordered");
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{},{}", r.step, r.lr, r.train_loss, opt(r.scaled_loss), opt(r.eval_loss), r.tokens).unwrap();
        }
        s
    }

    /// Parses ledger CSV. Columns are matched by header name; `eval_loss`
    /// and `scaled_loss` may be absent.
    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |d: String| Error::format("ledger", d);
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines.next().ok_or(Error::Empty("ledger"))?.split(',').map(str::trim).collect();
        let col = |name: &str| header.iter().position(|h| *h == name);
        let need = |name: &str| col(name).ok_or_else(|| bad(format!("missing column {name}")));
        let (c_step, c_lr, c_train, c_tok) = (need("step")?, need("lr")?, need("train_loss")?, need("tokens")?);
        let (c_scaled, c_eval) = (col("scaled_loss"), col("eval_loss"));
        let mut out = Self::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let get = |c: usize| f.get(c).copied().ok_or_else(|| bad(format!("row {} is short", n + 1)));
            let num = |c: usize| -> Result<f64> { get(c)?.parse().map_err(|_| bad(format!("row {}: bad number", n + 1))) };
            let opt = |c: Option<usize>| -> Result<Option<f64>> {
                match c.map(|c| f.get(c).copied().unwrap_or("")) {
                    None | Some("") => Ok(None),
                    Some(v) => v.parse().map(Some).map_err(|_| bad(format!("row {}: bad number", n + 1))),
                }
            };
            out.push(LedgerRow {
                step: get(c_step)?.parse().map_err(|_| bad(format!("row {}: bad step", n + 1)))?,
                lr: num(c_lr)?,
                train_loss: num(c_train)?,
                scaled_loss: opt(c_scaled)?,
                eval_loss: opt(c_eval)?,
                tokens: get(c_tok)?.parse().map_err(|_| bad(format!("row {}: bad token count", n + 1)))?,
            })?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
