use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraTarget {
    Q,
    V,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            targets: vec![LoraTarget::Q, LoraTarget::V],
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 || self.rank >= dim {
            bail!(Config, "LoRA rank {} must be in [1, {dim})", self.rank);
        }
        if !(self.alpha > 0.0) {
            bail!(Config, "LoRA alpha must be positive");
        }
        if self.targets.is_empty() {
            bail!(Config, "LoRA needs at least one target projection");
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Parameters added to an encoder of `layers` blocks at width `dim`.
    pub fn added_params(&self, layers: usize, dim: usize) -> usize {
        self.targets.len() * layers * 2 * self.rank * dim
    }
}

/// Low-rank update `scale · B · A` with `A: [rank × dim]`, `B: [dim × rank]`.
#[derive(Clone, Debug)]
pub struct LoraPair<T: Scalar = f32> {
    pub a: Parameter<T>,
    pub b: Parameter<T>,
    pub scale: f64,
}

impl<T: Scalar> LoraPair<T> {
    pub(crate) fn init(cfg: &LoraConfig, dim: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        Self {
            a: Parameter::new(Tensor::randn(&[cfg.rank, dim], std, rng)),
            b: Parameter::new(Tensor::zeros(&[dim, cfg.rank])),
            scale: cfg.scale(),
        }
    }

    /// `scale · x · B · A` for row-major activations `x: [m × dim]`.
    pub fn delta<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let low = tape.matmul(x, tape.param(&self.b))?;
        let up = tape.matmul(low, tape.param(&self.a))?;
        Ok(tape.scale(up, T::of(self.scale)))
    }

    pub(crate) fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}_a"), &self.a));
        out.push((format!("{prefix}_b"), &self.b));
    }

    pub(crate) fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter<T>)>) {
        out.push((format!("{prefix}_a"), &mut self.a));
        out.push((format!("{prefix}_b"), &mut self.b));
    }
}
