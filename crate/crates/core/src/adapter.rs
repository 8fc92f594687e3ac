//! The alignment adapter: a single-hidden-layer feed-forward network applied
//! to a sliding window of student embeddings,
//!
//! ```text
//! out_i = W2ᵀ · gelu(W1ᵀ · [r_{i-n/2} | … | r_i | … | r_{i+n/2}] + b1) + b2
//! ```
//!
//! with zero vectors standing in for positions outside the sequence. The
//! same transform is applied at every position.

use serde::{Deserialize, Serialize};

use crate::encoders::{Linear, INIT_STD};
use crate::error::{bail, Result};
use crate::numerics::{assemble_windows, check_window, Module, Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::derived_rng;

/// Hidden width used in the large-scale accounting (BERT-base-sized models).
pub const REFERENCE_HIDDEN: usize = 1280;

/// Parameter count of the large reference encoder used for size percentages
/// in the large-scale accounting.
pub const REFERENCE_PARAMS: usize = 108_600_000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub window_n: usize,
    pub d_c: usize,
    pub d_l: usize,
    pub hidden: usize,
    /// Ablation: skip the activation, leaving a purely linear map.
    #[serde(default)]
    pub linear: bool,
}

impl AdapterConfig {
    pub fn new(window_n: usize, d_c: usize, d_l: usize) -> Self {
        Self {
            window_n,
            d_c,
            d_l,
            hidden: 64,
            linear: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_window(self.window_n)?;
        if self.d_c == 0 || self.d_l == 0 || self.hidden == 0 {
            bail!(Config, "adapter dimensions must be positive: {self:?}");
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.window_n * self.d_c
    }

    /// `n·d_c·hidden + hidden + hidden·d_l + d_l`.
    pub fn param_count(&self) -> usize {
        adapter_param_count(self)
    }
}

pub fn adapter_param_count(cfg: &AdapterConfig) -> usize {
    cfg.window_n * cfg.d_c * cfg.hidden + cfg.hidden + cfg.hidden * cfg.d_l + cfg.d_l
}

/// `100 · Σ components / reference`.
pub fn size_percentage(components: &[usize], reference: usize) -> Result<f64> {
    if reference == 0 {
        bail!(Config, "reference parameter count must be positive");
    }
    Ok(100.0 * components.iter().sum::<usize>() as f64 / reference as f64)
}

#[derive(Clone, Debug)]
pub struct AlignmentAdapter<T: Scalar = f32> {
    config: AdapterConfig,
    pub hidden_layer: Linear<T>,
    pub output_layer: Linear<T>,
}

impl<T: Scalar> AlignmentAdapter<T> {
    /// Seeded `N(0, 0.02²)` weights, zero biases.
    pub fn init(config: AdapterConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(seed, "adapter-init");
        Ok(Self {
            hidden_layer: Linear::init(config.input_dim(), config.hidden, INIT_STD, &mut rng),
            output_layer: Linear::init(config.hidden, config.d_l, INIT_STD, &mut rng),
            config,
        })
    }

    pub fn zeros(config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            hidden_layer: Linear::zeros(config.input_dim(), config.hidden),
            output_layer: Linear::zeros(config.hidden, config.d_l),
            config,
        })
    }

    /// Linear-ablation adapter that reproduces its centre input exactly
    /// (`d_c == d_l == hidden == dim`).
    pub fn identity(window_n: usize, dim: usize) -> Result<Self> {
        let cfg = AdapterConfig {
            window_n,
            d_c: dim,
            d_l: dim,
            hidden: dim,
            linear: true,
        };
        let mut a = Self::zeros(cfg)?;
        let centre = window_n / 2;
        let w1 = a.hidden_layer.weight.value.data_mut();
        for j in 0..dim {
            w1[(centre * dim + j) * dim + j] = T::one();
        }
        a.output_layer.weight.value = Tensor::identity(dim);
        Ok(a)
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn detached(&self) -> Self {
        Self {
            config: self.config.clone(),
            hidden_layer: self.hidden_layer.detached(),
            output_layer: self.output_layer.detached(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> AlignmentAdapter<U> {
        AlignmentAdapter {
            config: self.config.clone(),
            hidden_layer: self.hidden_layer.cast(),
            output_layer: self.output_layer.cast(),
        }
    }

    fn check_cols(&self, cols: usize) -> Result<()> {
        if cols != self.config.d_c {
            bail!(Dimension, "adapter expects {} input columns, got {cols}", self.config.d_c);
        }
        Ok(())
    }

    /// Records the adapter on `tape` for student embeddings `rc: [m × d_c]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, rc: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_cols(rc.value().cols())?;
        let windows = tape.windows(rc, self.config.window_n)?;
        self.forward_windowed(tape, windows)
    }

    /// The feed-forward part alone, for inputs already passed through
    /// [`assemble_windows`] (rows of width `n·d_c`, possibly several
    /// sequences stacked).
    pub fn forward_windowed<'t>(&self, tape: &'t Tape<T>, windows: Var<'t, T>) -> Result<Var<'t, T>> {
        if windows.value().cols() != self.config.input_dim() {
            bail!(
                Dimension,
                "adapter expects windowed rows of width {}, got {}",
                self.config.input_dim(),
                windows.value().cols()
            );
        }
        let h = self.hidden_layer.forward(tape, windows)?;
        let h = if self.config.linear { h } else { h.gelu() };
        self.output_layer.forward(tape, h)
    }

    /// Transformed embeddings `[m × d_l]`.
    pub fn apply(&self, rc: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_cols(rc.cols())?;
        let windows = assemble_windows(rc, self.config.window_n)?;
        let tape = Tape::new();
        let out = self.forward_windowed(&tape, tape.constant(windows))?;
        let v = out.value().clone();
        Ok(v)
    }
}

impl<T: Scalar> Module<T> for AlignmentAdapter<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::with_capacity(4);
        self.hidden_layer.named("hidden", &mut out);
        self.output_layer.named("output", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::with_capacity(4);
        self.hidden_layer.named_mut("hidden", &mut out);
        self.output_layer.named_mut("output", &mut out);
        out
    }
}
