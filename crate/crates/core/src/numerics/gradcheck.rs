//! Central finite-difference verification of tape gradients (64-bit only).

use super::param::Module;
use super::tape::{OpKind, Tape, Var};
use super::tensor::Tensor;
use crate::error::{bail, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub worst_rel_error: f64,
    /// `(analytic, numeric)` at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Elements whose gradient is below the finite-difference resolution;
    /// counted but not compared.
    pub unresolved: usize,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Folds several reports for the same check into one (worst case wins).
    pub fn merge(name: &str, reports: &[GradCheckReport]) -> GradCheckReport {
        let tolerance = reports.first().map_or(0.0, |r| r.tolerance);
        let worst = reports.iter().max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error));
        GradCheckReport {
            name: name.to_string(),
            worst_rel_error: worst.map_or(0.0, |r| r.worst_rel_error),
            worst_pair: worst.map_or((0.0, 0.0), |r| r.worst_pair),
            checked: reports.iter().map(|r| r.checked).sum(),
            unresolved: reports.iter().map(|r| r.unresolved).sum(),
            tolerance,
            passed: !reports.is_empty() && reports.iter().all(|r| r.passed),
        }
    }
}

/// Finite differences of `f` at step `h` carry rounding noise of order
/// `ε·|f|/h`; gradients smaller than this many multiples of it are
/// unresolved.
const RESOLUTION_FACTOR: f64 = 1e5;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Doubles the backward of one op kind in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

impl GradCheck {
    fn validate(&self) -> Result<()> {
        if !(1e-6..=1e-4).contains(&self.step) {
            bail!(Config, "finite-difference step {} outside [1e-6, 1e-4]", self.step);
        }
        Ok(())
    }

    fn analytic_tape(&self) -> Tape<f64> {
        match self.fault {
            Some(kind) => Tape::with_fault(kind),
            None => Tape::new(),
        }
    }

    /// Smallest gradient magnitude the central difference can resolve given
    /// the loss values on either side.
    fn resolution(&self, up: f64, down: f64) -> f64 {
        RESOLUTION_FACTOR * f64::EPSILON * up.abs().max(down.abs()).max(1.0) / self.step
    }

    /// `samples` are `(analytic, numeric, resolution)` triples.
    fn report(&self, name: &str, samples: impl Iterator<Item = (f64, f64, f64)>) -> GradCheckReport {
        let mut worst = 0.0f64;
        let mut worst_pair = (0.0, 0.0);
        let mut checked = 0;
        let mut unresolved = 0;
        for (a, n, floor) in samples {
            if a.abs() < floor && n.abs() < floor {
                unresolved += 1;
                continue;
            }
            let e = relative_error(a, n);
            let e = if e.is_nan() { f64::INFINITY } else { e };
            if e > worst || checked == 0 {
                worst = e;
                worst_pair = (a, n);
            }
            checked += 1;
        }
        GradCheckReport {
            name: name.to_string(),
            worst_rel_error: worst,
            worst_pair,
            checked,
            unresolved,
            tolerance: self.tolerance,
            passed: checked > 0 && worst < self.tolerance,
        }
    }

    /// Checks `∂f/∂inputs` for a scalar function of free input tensors.
    pub fn inputs<F>(&self, name: &str, f: F, inputs: &[Tensor<f64>]) -> Result<GradCheckReport>
    where
        F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
    {
        self.validate()?;
        let analytic: Vec<Tensor<f64>> = {
            let tape = self.analytic_tape();
            let vars: Vec<Var<'_, f64>> = inputs.iter().map(|x| tape.input(x.clone())).collect();
            let loss = f(&tape, &vars)?;
            let grads = tape.backward(loss)?;
            vars.iter()
                .zip(inputs)
                .map(|(&v, x)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
                .collect()
        };
        let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
            let tape = Tape::new();
            let vars: Vec<Var<'_, f64>> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            f(&tape, &vars)?.item()
        };
        let mut pairs = Vec::new();
        let mut work = inputs.to_vec();
        for (t, g) in analytic.iter().enumerate() {
            for e in 0..work[t].numel() {
                let orig = work[t].data()[e];
                work[t].data_mut()[e] = orig + self.step;
                let up = eval(&work)?;
                work[t].data_mut()[e] = orig - self.step;
                let down = eval(&work)?;
                work[t].data_mut()[e] = orig;
                pairs.push((g.data()[e], (up - down) / (2.0 * self.step), self.resolution(up, down)));
            }
        }
        Ok(self.report(name, pairs.into_iter()))
    }

    /// Checks the gradient of a scalar function with respect to every
    /// trainable parameter of `module`.
    pub fn module<M, F>(&self, name: &str, module: &mut M, f: F) -> Result<GradCheckReport>
    where
        M: Module<f64>,
        F: for<'t> Fn(&'t Tape<f64>, &M) -> Result<Var<'t, f64>>,
    {
        self.validate()?;
        let analytic: Vec<Option<Tensor<f64>>> = {
            let tape = self.analytic_tape();
            let loss = f(&tape, module)?;
            let grads = tape.backward(loss)?;
            module
                .named_params()
                .iter()
                .map(|(_, p)| {
                    p.trainable
                        .then(|| grads.param(p.key()).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape())))
                })
                .collect()
        };
        let eval = |m: &M| -> Result<f64> {
            let tape = Tape::new();
            f(&tape, m)?.item()
        };
        let mut pairs = Vec::new();
        for (idx, g) in analytic.iter().enumerate() {
            let Some(g) = g else { continue };
            for e in 0..g.numel() {
                let orig = module.named_params()[idx].1.value.data()[e];
                set_element(module, idx, e, orig + self.step);
                let up = eval(module)?;
                set_element(module, idx, e, orig - self.step);
                let down = eval(module)?;
                set_element(module, idx, e, orig);
                pairs.push((g.data()[e], (up - down) / (2.0 * self.step), self.resolution(up, down)));
            }
        }
        Ok(self.report(name, pairs.into_iter()))
    }
}

fn set_element<M: Module<f64>>(module: &mut M, idx: usize, e: usize, v: f64) {
    module.named_params_mut()[idx].1.value.data_mut()[e] = v;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square<'t>(tape: &'t Tape<f64>, xs: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
        let sq = tape.mul(xs[0], xs[0])?;
        Ok(tape.sum(sq))
    }

    #[test]
    fn quadratic_passes() {
        let x = Tensor::full(&[1], 3.0);
        let r = GradCheck::default().inputs("square", square, &[x]).unwrap();
        assert!(r.passed);
        assert!(r.worst_rel_error < 1e-8, "{}", r.worst_rel_error);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let x = Tensor::full(&[1], 3.0);
        let check = GradCheck {
            fault: Some(OpKind::Mul),
            ..GradCheck::default()
        };
        let r = check.inputs("square", square, &[x]).unwrap();
        assert!(!r.passed);
        assert!(r.worst_rel_error > 0.4);
    }

    #[test]
    fn step_range_enforced() {
        let x = Tensor::full(&[1], 3.0);
        let check = GradCheck {
            step: 1e-2,
            ..GradCheck::default()
        };
        assert!(check.inputs("square", square, &[x]).is_err());
    }
}
