//! Central finite-difference audit of tape gradients in `f64`.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Agreement statistics between analytic and numeric gradients.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub within_tol: usize,
    pub max_rel: f64,
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn fraction_within(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.within_tol as f64 / self.checked as f64
        }
    }

    /// `frac` of coordinates within `tol`, all within `worst_tol`.
    pub fn passes(&self, frac: f64, worst_tol: f64) -> bool {
        self.fraction_within() >= frac && self.max_rel <= worst_tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Denominator floor so that near-zero gradients are compared absolutely.
    pub floor: f64,
    /// Upper bound on probed coordinates per input (strided subsample).
    pub max_coords: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tol: 1e-4,
            floor: 1e-2,
            max_coords: 4096,
        }
    }
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

impl GradCheck {
    /// Compares tape gradients of the scalar `f(inputs)` with central differences.
    pub fn run<F>(&self, inputs: &[Tensor<f64>], f: F) -> Result<GradReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.backward(root)?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
            .collect();

        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
            let root = f(&mut tape, &vars)?;
            Ok(tape.value(root).data()[0])
        };

        let mut report = GradReport {
            checked: 0,
            within_tol: 0,
            max_rel: 0.0,
            worst: None,
        };
        let mut xs = inputs.to_vec();
        for (ti, t) in inputs.iter().enumerate() {
            let n = t.numel();
            let stride = n.div_ceil(self.max_coords.max(1)).max(1);
            for c in (0..n).step_by(stride) {
                let orig = t.data()[c];
                xs[ti].data_mut()[c] = orig + self.step;
                let up = eval(&xs)?;
                xs[ti].data_mut()[c] = orig - self.step;
                let down = eval(&xs)?;
                xs[ti].data_mut()[c] = orig;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[ti][c];
                let e = rel_err(a, numeric, self.floor);
                report.checked += 1;
                if e <= self.tol {
                    report.within_tol += 1;
                }
                if e > report.max_rel || report.worst.is_none() {
                    report.max_rel = report.max_rel.max(e);
                    report.worst = Some((ti, c, a, numeric));
                }
            }
        }
        Ok(report)
    }
}
