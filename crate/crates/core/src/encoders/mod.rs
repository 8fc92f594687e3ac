//! Toy pre-norm transformer encoders standing in for the large and
//! compressed models, plus LoRA injection and masked-LM pretraining.

mod linear;
mod lora;
mod mlm;

use serde::{Deserialize, Serialize};

pub use linear::Linear;
pub use lora::{LoraConfig, LoraPair, LoraTarget};
pub use mlm::{mlm_pretrain, MlmConfig};

use crate::error::{bail, Result};
use crate::numerics::{Module, Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::{derived_rng, Rng};

pub const INIT_STD: f64 = 0.02;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl EncoderConfig {
    /// Four layers, width 64: the reference (teacher) geometry.
    pub fn teacher(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        Self {
            num_layers: 4,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_len,
            seed,
        }
    }

    /// Independently trained two-layer student at width 32.
    pub fn mini(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        Self {
            num_layers: 2,
            model_dim: 32,
            num_heads: 2,
            ffn_dim: 64,
            vocab_size,
            max_len,
            seed,
        }
    }

    /// Independently trained single-layer student at width 16.
    pub fn tiny(vocab_size: usize, max_len: usize, seed: u64) -> Self {
        Self {
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            vocab_size,
            max_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0
            || self.model_dim == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
            || self.vocab_size == 0
            || self.max_len == 0
        {
            bail!(Config, "encoder sizes must be positive: {self:?}");
        }
        if self.model_dim % self.num_heads != 0 {
            bail!(
                Config,
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim,
                self.num_heads
            );
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    /// Closed-form parameter count (no LoRA).
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.model_dim, self.ffn_dim);
        let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        self.vocab_size * d + self.max_len * d + self.num_layers * per_layer + 2 * d
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer<T: Scalar = f32> {
    pub ln1_gain: Parameter<T>,
    pub ln1_bias: Parameter<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub lora_q: Option<LoraPair<T>>,
    pub lora_v: Option<LoraPair<T>>,
    pub ln2_gain: Parameter<T>,
    pub ln2_bias: Parameter<T>,
    pub ffn_in: Linear<T>,
    pub ffn_out: Linear<T>,
}

impl<T: Scalar> EncoderLayer<T> {
    fn init(cfg: &EncoderConfig, rng: &mut Rng) -> Self {
        let (d, f) = (cfg.model_dim, cfg.ffn_dim);
        Self {
            ln1_gain: Parameter::new(Tensor::full(&[d], T::one())),
            ln1_bias: Parameter::new(Tensor::zeros(&[d])),
            q: Linear::init(d, d, INIT_STD, rng),
            k: Linear::init(d, d, INIT_STD, rng),
            v: Linear::init(d, d, INIT_STD, rng),
            o: Linear::init(d, d, INIT_STD, rng),
            lora_q: None,
            lora_v: None,
            ln2_gain: Parameter::new(Tensor::full(&[d], T::one())),
            ln2_bias: Parameter::new(Tensor::zeros(&[d])),
            ffn_in: Linear::init(d, f, INIT_STD, rng),
            ffn_out: Linear::init(f, d, INIT_STD, rng),
        }
    }

    fn map_params<U: Scalar>(&self, f: &impl Fn(&Parameter<T>) -> Parameter<U>) -> EncoderLayer<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: f(&l.weight),
            bias: f(&l.bias),
        };
        let pair = |p: &Option<LoraPair<T>>| {
            p.as_ref().map(|p| LoraPair {
                a: f(&p.a),
                b: f(&p.b),
                scale: p.scale,
            })
        };
        EncoderLayer {
            ln1_gain: f(&self.ln1_gain),
            ln1_bias: f(&self.ln1_bias),
            q: lin(&self.q),
            k: lin(&self.k),
            v: lin(&self.v),
            o: lin(&self.o),
            lora_q: pair(&self.lora_q),
            lora_v: pair(&self.lora_v),
            ln2_gain: f(&self.ln2_gain),
            ln2_bias: f(&self.ln2_bias),
            ffn_in: lin(&self.ffn_in),
            ffn_out: lin(&self.ffn_out),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Parameter<T>)>) {
        out.push((format!("{prefix}.ln1.gain"), &self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &self.ln1_bias));
        self.q.named(&format!("{prefix}.attn.q"), out);
        self.k.named(&format!("{prefix}.attn.k"), out);
        self.v.named(&format!("{prefix}.attn.v"), out);
        self.o.named(&format!("{prefix}.attn.o"), out);
        if let Some(p) = &self.lora_q {
            p.named(&format!("{prefix}.attn.q.lora"), out);
        }
        if let Some(p) = &self.lora_v {
            p.named(&format!("{prefix}.attn.v.lora"), out);
        }
        out.push((format!("{prefix}.ln2.gain"), &self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &self.ln2_bias));
        self.ffn_in.named(&format!("{prefix}.ffn.in"), out);
        self.ffn_out.named(&format!("{prefix}.ffn.out"), out);
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Parameter<T>)>) {
        out.push((format!("{prefix}.ln1.gain"), &mut self.ln1_gain));
        out.push((format!("{prefix}.ln1.bias"), &mut self.ln1_bias));
        self.q.named_mut(&format!("{prefix}.attn.q"), out);
        self.k.named_mut(&format!("{prefix}.attn.k"), out);
        self.v.named_mut(&format!("{prefix}.attn.v"), out);
        self.o.named_mut(&format!("{prefix}.attn.o"), out);
        if let Some(p) = &mut self.lora_q {
            p.named_mut(&format!("{prefix}.attn.q.lora"), out);
        }
        if let Some(p) = &mut self.lora_v {
            p.named_mut(&format!("{prefix}.attn.v.lora"), out);
        }
        out.push((format!("{prefix}.ln2.gain"), &mut self.ln2_gain));
        out.push((format!("{prefix}.ln2.bias"), &mut self.ln2_bias));
        self.ffn_in.named_mut(&format!("{prefix}.ffn.in"), out);
        self.ffn_out.named_mut(&format!("{prefix}.ffn.out"), out);
    }

    fn projection<'t>(
        tape: &'t Tape<T>,
        lin: &Linear<T>,
        lora: Option<&LoraPair<T>>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let y = lin.forward(tape, x)?;
        match lora {
            Some(pair) => tape.add(y, pair.delta(tape, x)?),
            None => Ok(y),
        }
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        cfg: &EncoderConfig,
        x: Var<'t, T>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var<'t, T>> {
        let h = tape.layer_norm(x, tape.param(&self.ln1_gain), tape.param(&self.ln1_bias), LAYER_NORM_EPS)?;
        let q = Self::projection(tape, &self.q, self.lora_q.as_ref(), h)?;
        let k = self.k.forward(tape, h)?;
        let v = Self::projection(tape, &self.v, self.lora_v.as_ref(), h)?;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = tape.slice_cols(q, head * dh, dh)?;
            let kh = tape.slice_cols(k, head * dh, dh)?;
            let vh = tape.slice_cols(v, head * dh, dh)?;
            let scores = tape.scale(tape.matmul_bt(qh, kh)?, scale);
            let probs = tape.softmax_rows(scores)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(probs.value().clone());
            }
            heads.push(tape.matmul(probs, vh)?);
        }
        let ctx = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
        let x = tape.add(x, self.o.forward(tape, ctx)?)?;

        let h = tape.layer_norm(x, tape.param(&self.ln2_gain), tape.param(&self.ln2_bias), LAYER_NORM_EPS)?;
        let f = self.ffn_out.forward(tape, self.ffn_in.forward(tape, h)?.gelu())?;
        tape.add(x, f)
    }
}

/// A transformer encoder. Produces one `model_dim` row per input token.
#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar = f32> {
    config: EncoderConfig,
    lora: Option<LoraConfig>,
    pub token_embedding: Parameter<T>,
    pub position_embedding: Parameter<T>,
    pub layers: Vec<EncoderLayer<T>>,
    pub final_ln_gain: Parameter<T>,
    pub final_ln_bias: Parameter<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Seeded initialisation: weights `N(0, 0.02²)`, biases zero, layer-norm
    /// gains one.
    pub fn init(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = derived_rng(config.seed, "encoder-init");
        let d = config.model_dim;
        let token_embedding = Parameter::new(Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng));
        let position_embedding = Parameter::new(Tensor::randn(&[config.max_len, d], INIT_STD, &mut rng));
        let layers = (0..config.num_layers)
            .map(|_| EncoderLayer::init(&config, &mut rng))
            .collect();
        Ok(Self {
            config,
            lora: None,
            token_embedding,
            position_embedding,
            layers,
            final_ln_gain: Parameter::new(Tensor::full(&[d], T::one())),
            final_ln_bias: Parameter::new(Tensor::zeros(&[d])),
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    fn map_params<U: Scalar>(&self, f: impl Fn(&Parameter<T>) -> Parameter<U>) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            lora: self.lora.clone(),
            token_embedding: f(&self.token_embedding),
            position_embedding: f(&self.position_embedding),
            layers: self.layers.iter().map(|l| l.map_params(&f)).collect(),
            final_ln_gain: f(&self.final_ln_gain),
            final_ln_bias: f(&self.final_ln_bias),
        }
    }

    /// Deep copy with fresh parameter identities.
    pub fn detached(&self) -> Self {
        self.map_params(Parameter::detached)
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        self.map_params(Parameter::cast)
    }

    pub fn check_input(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            bail!(Input, "empty token sequence");
        }
        if ids.len() > self.config.max_len {
            bail!(Input, "sequence of {} tokens exceeds max_len {}", ids.len(), self.config.max_len);
        }
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            bail!(Input, "token id {bad} outside vocabulary of {}", self.config.vocab_size);
        }
        Ok(())
    }

    fn forward_inner<'t>(
        &self,
        tape: &'t Tape<T>,
        ids: &[u32],
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<Var<'t, T>> {
        self.check_input(ids)?;
        let tok: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos: Vec<usize> = (0..ids.len()).collect();
        let mut x = tape.add(
            tape.gather(tape.param(&self.token_embedding), &tok)?,
            tape.gather(tape.param(&self.position_embedding), &pos)?,
        )?;
        for layer in &self.layers {
            x = layer.forward(tape, &self.config, x, trace.as_deref_mut())?;
        }
        tape.layer_norm(x, tape.param(&self.final_ln_gain), tape.param(&self.final_ln_bias), LAYER_NORM_EPS)
    }

    /// Records the forward pass on `tape`; the result is `[m × model_dim]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, ids: &[u32]) -> Result<Var<'t, T>> {
        self.forward_inner(tape, ids, None)
    }

    /// Final hidden states for `ids`, one row per token.
    pub fn encode(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, ids)?;
        let v = out.value().clone();
        Ok(v)
    }

    /// Like [`Encoder::encode`] but also returns every attention probability
    /// matrix, layer-major then head-major.
    pub fn encode_traced(&self, ids: &[u32]) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let tape = Tape::new();
        let mut trace = Vec::new();
        let out = self.forward_inner(&tape, ids, Some(&mut trace))?;
        let v = out.value().clone();
        Ok((v, trace))
    }

    /// Freezes every parameter.
    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            layer.named(&format!("layers.{i}"), &mut out);
        }
        out.push(("final_ln.gain".to_string(), &self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &self.final_ln_bias));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &mut self.token_embedding),
            ("position_embedding".to_string(), &mut self.position_embedding),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.named_mut(&format!("layers.{i}"), &mut out);
        }
        out.push(("final_ln.gain".to_string(), &mut self.final_ln_gain));
        out.push(("final_ln.bias".to_string(), &mut self.final_ln_bias));
        out
    }
}

/// Emulates layer-pruning compression: keeps the embeddings and the first
/// `keep_layers` blocks of `teacher`. The copy is deep; the teacher is never
/// touched by anything done to the student.
pub fn derive_pruned_student<T: Scalar>(teacher: &Encoder<T>, keep_layers: usize) -> Result<Encoder<T>> {
    let total = teacher.config.num_layers;
    if keep_layers == 0 || keep_layers >= total {
        bail!(Config, "keep_layers must be in [1, {}), got {keep_layers}", total);
    }
    let mut student = teacher.detached();
    student.layers.truncate(keep_layers);
    student.config.num_layers = keep_layers;
    Ok(student)
}

/// Wraps the targeted attention projections with trainable low-rank updates
/// `W + (alpha / rank) · B · A`. `B` starts at zero; every base weight is
/// frozen.
pub fn attach_lora<T: Scalar>(mut enc: Encoder<T>, cfg: &LoraConfig, seed: u64) -> Result<Encoder<T>> {
    cfg.validate(enc.dim())?;
    if enc.lora.is_some() {
        bail!(Config, "encoder already carries LoRA matrices");
    }
    enc.freeze();
    let mut rng = derived_rng(seed, "lora-init");
    let d = enc.dim();
    for layer in &mut enc.layers {
        if cfg.targets.contains(&LoraTarget::Q) {
            layer.lora_q = Some(LoraPair::init(cfg, d, &mut rng));
        }
        if cfg.targets.contains(&LoraTarget::V) {
            layer.lora_v = Some(LoraPair::init(cfg, d, &mut rng));
        }
    }
    enc.lora = Some(cfg.clone());
    Ok(enc)
}

/// Rebuilds an encoder skeleton (including LoRA slots) so checkpoint loading
/// can overwrite every tensor by name.
pub fn encoder_skeleton<T: Scalar>(config: &EncoderConfig, lora: Option<&LoraConfig>) -> Result<Encoder<T>> {
    let enc = Encoder::init(config.clone())?;
    match lora {
        Some(l) => {
            let mut e = attach_lora(enc, l, 0)?;
            e.set_trainable(true);
            Ok(e)
        }
        None => Ok(enc),
    }
}
