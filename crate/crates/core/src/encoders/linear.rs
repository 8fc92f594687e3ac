use crate::error::Result;
use crate::numerics::{Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::Rng;

/// `y = x · W + b` with `W` stored `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(input: usize, output: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::new(Tensor::randn(&[input, output], std, rng)),
            bias: Parameter::new(Tensor::zeros(&[output])),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[input, output])),
            bias: Parameter::new(Tensor::zeros(&[output])),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let y = tape.matmul(x, tape.param(&self.weight))?;
        tape.add_bias(y, tape.param(&self.bias))
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter<T>)>) {
        out.push((format!("{prefix}.weight"), &mut self.weight));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }

    pub fn detached(&self) -> Self {
        Self {
            weight: self.weight.detached(),
            bias: self.bias.detached(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}
