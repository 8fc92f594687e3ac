//! Finite-difference checks of every differentiable op and of the composite
//! paths used in training, on random 64-bit instances.

use rand::Rng as _;

use crate::adapter::{AdapterConfig, AlignmentAdapter};
use crate::encoders::{attach_lora, Encoder, EncoderConfig, LoraConfig};
use crate::error::Result;
use crate::finetune::Stack;
use crate::numerics::{GradCheck, GradCheckReport, Module, OpKind, Tape, Tensor, Var};
use crate::seed::{derived_rng, rng, Rng};
use crate::tasks::TaskHead;

/// `sum(out ⊙ R)` for a fixed random `R`, so every output element gets a
/// distinct upstream gradient.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    let r = Tensor::randn(&shape, 1.0, &mut rng(0x5eed));
    let weighted = tape.mul(out, tape.constant(r))?;
    Ok(tape.sum(weighted))
}

fn randn(shape: &[usize], r: &mut Rng) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, r)
}

/// Random inputs for one instance of `op`, and the scalar function to check.
fn check_op(check: &GradCheck, op: OpKind, r: &mut Rng) -> Result<GradCheckReport> {
    let name = op.name();
    match op {
        OpKind::Leaf => unreachable!("leaves have no backward"),
        OpKind::MatMul => check.inputs(
            name,
            |t, x| project(t, t.matmul(x[0], x[1])?),
            &[randn(&[3, 4], r), randn(&[4, 2], r)],
        ),
        OpKind::MatMulBt => check.inputs(
            name,
            |t, x| project(t, t.matmul_bt(x[0], x[1])?),
            &[randn(&[3, 4], r), randn(&[5, 4], r)],
        ),
        OpKind::Add => check.inputs(name, |t, x| project(t, t.add(x[0], x[1])?), &[randn(&[3, 4], r), randn(&[3, 4], r)]),
        OpKind::AddBias => check.inputs(
            name,
            |t, x| project(t, t.add_bias(x[0], x[1])?),
            &[randn(&[3, 4], r), randn(&[4], r)],
        ),
        OpKind::Mul => check.inputs(name, |t, x| project(t, t.mul(x[0], x[1])?), &[randn(&[3, 4], r), randn(&[3, 4], r)]),
        OpKind::Scale => {
            let s = r.random_range(-2.0..2.0);
            check.inputs(name, move |t, x| project(t, t.scale(x[0], s)), &[randn(&[3, 4], r)])
        }
        OpKind::Gelu => check.inputs(name, |t, x| project(t, t.gelu(x[0])), &[randn(&[3, 4], r).map(|v| 2.0 * v)]),
        OpKind::LayerNorm => check.inputs(
            name,
            |t, x| project(t, t.layer_norm(x[0], x[1], x[2], 1e-5)?),
            &[randn(&[3, 5], r), randn(&[5], r), randn(&[5], r)],
        ),
        OpKind::SoftmaxRows => check.inputs(name, |t, x| project(t, t.softmax_rows(x[0])?), &[randn(&[3, 4], r)]),
        OpKind::SliceCols => check.inputs(name, |t, x| project(t, t.slice_cols(x[0], 1, 3)?), &[randn(&[3, 6], r)]),
        OpKind::ConcatCols => check.inputs(
            name,
            |t, x| project(t, t.concat_cols(&[x[0], x[1]])?),
            &[randn(&[3, 2], r), randn(&[3, 3], r)],
        ),
        OpKind::ConcatRows => check.inputs(
            name,
            |t, x| project(t, t.concat_rows(&[x[0], x[1]])?),
            &[randn(&[2, 3], r), randn(&[4, 3], r)],
        ),
        OpKind::Transpose => check.inputs(name, |t, x| project(t, t.transpose(x[0])?), &[randn(&[3, 4], r)]),
        OpKind::Gather => {
            let ids: Vec<usize> = (0..5).map(|_| r.random_range(0..6)).collect();
            check.inputs(name, move |t, x| project(t, t.gather(x[0], &ids)?), &[randn(&[6, 3], r)])
        }
        OpKind::Windows => {
            let n = [1, 3, 5][r.random_range(0..3)];
            let m = r.random_range(1..7);
            check.inputs(name, move |t, x| project(t, t.windows(x[0], n)?), &[randn(&[m, 3], r)])
        }
        OpKind::MseLoss => {
            let target = randn(&[3, 4], r);
            check.inputs(name, move |t, x| t.mse_loss(x[0], &target), &[randn(&[3, 4], r)])
        }
        OpKind::CrossEntropy => {
            let mut labels: Vec<usize> = (0..4).map(|_| r.random_range(0..5)).collect();
            labels[r.random_range(0..4)] = usize::MAX;
            check.inputs(
                name,
                move |t, x| t.cross_entropy(x[0], &labels, Some(usize::MAX)),
                &[randn(&[4, 5], r)],
            )
        }
        OpKind::Sum => check.inputs(name, |t, x| Ok(t.sum(x[0])), &[randn(&[3, 4], r)]),
    }
}

/// Small random encoder with weights large enough for non-trivial gradients.
fn toy_encoder(seed: u64) -> Result<Encoder<f64>> {
    let mut enc = Encoder::<f64>::init(EncoderConfig {
        num_layers: 2,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 12,
        vocab_size: 10,
        max_len: 8,
        seed,
    })?;
    let mut r = derived_rng(seed, "gradcheck-weights");
    for (_, p) in enc.named_params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
    }
    Ok(enc)
}

/// Softmax over positions is invariant to the key bias, to the span head
/// biases and to the bias feeding the span head, so their gradients are
/// identically zero and finite differences only see rounding noise.
fn skip_shift_invariant(m: &mut dyn Module<f64>, span: bool) {
    const SPAN_SHIFTS: [&str; 3] = ["head.start.bias", "head.end.bias", "adapter.output.bias"];
    for (name, p) in m.named_params_mut() {
        if name.ends_with("attn.k.bias") || (span && SPAN_SHIFTS.contains(&name.as_str())) {
            p.trainable = false;
        }
    }
}

fn random_ids(len: usize, vocab: u32, r: &mut Rng) -> Vec<u32> {
    (0..len).map(|_| r.random_range(0..vocab)).collect()
}

fn check_composites(check: &GradCheck, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut r = derived_rng(seed, "gradcheck-composite");
    let mut out = Vec::new();

    let n = [1, 3, 5][(seed % 3) as usize];
    let mut adapter = AlignmentAdapter::<f64>::init(AdapterConfig::new(n, 4, 6), seed)?;
    for (_, p) in adapter.named_params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
    }
    let rc = Tensor::randn(&[5, 4], 1.0, &mut r);
    let target = Tensor::randn(&[5, 6], 1.0, &mut r);
    out.push(check.module("adapter_forward+mse_loss", &mut adapter, |t, a| {
        let y = a.forward(t, t.constant(rc.clone()))?;
        t.mse_loss(y, &target)
    })?);

    let ids = random_ids(5, 10, &mut r);
    let labels: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
    let mut stack = Stack::new(toy_encoder(seed)?, None, TaskHead::tagging(8, 3, seed))?;
    for (_, p) in stack.head.named_params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
    }
    skip_shift_invariant(&mut stack, false);
    out.push(check.module("encoder+tagging_head+cross_entropy", &mut stack, |t, s| {
        let reps = s.reps(t, &ids)?;
        s.head.loss(t, reps, &labels)
    })?);

    let span = (r.random_range(0..5), r.random_range(0..5));
    let span = vec![span.0.min(span.1), span.0.max(span.1)];
    let mut stack = Stack::new(
        toy_encoder(seed)?,
        Some(AlignmentAdapter::init(AdapterConfig::new(3, 8, 6), seed)?),
        TaskHead::span(6, seed),
    )?;
    for (_, p) in stack.named_params_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
    }
    skip_shift_invariant(&mut stack, true);
    out.push(check.module("encoder+adapter+span_head+cross_entropy", &mut stack, |t, s| {
        let reps = s.reps(t, &ids)?;
        s.head.loss(t, reps, &span)
    })?);

    let mut lora = attach_lora(toy_encoder(seed)?, &LoraConfig::default(), seed)?;
    for (_, p) in lora.named_params_mut() {
        if p.trainable {
            p.value = Tensor::randn(p.value.shape(), 0.3, &mut r);
        }
    }
    let target = Tensor::randn(&[5, 8], 1.0, &mut r);
    out.push(check.module("encoder_with_lora+mse_loss", &mut lora, |t, e| {
        let h = e.forward(t, &ids)?;
        t.mse_loss(h, &target)
    })?);
    Ok(out)
}

/// One merged report per op and per composite path, each over `instances`
/// random draws.
pub fn run_gradient_suite(check: &GradCheck, instances: usize, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for op in OpKind::DIFFERENTIABLE {
        let mut r = derived_rng(seed, op.name());
        let per: Vec<GradCheckReport> = (0..instances)
            .map(|_| check_op(check, op, &mut r))
            .collect::<Result<_>>()?;
        reports.push(GradCheckReport::merge(op.name(), &per));
    }
    let mut composite: Vec<Vec<GradCheckReport>> = Vec::new();
    for i in 0..instances {
        for (k, rep) in check_composites(check, seed.wrapping_add(i as u64))?.into_iter().enumerate() {
            if composite.len() <= k {
                composite.push(Vec::new());
            }
            composite[k].push(rep);
        }
    }
    for group in composite {
        let name = group[0].name.clone();
        reports.push(GradCheckReport::merge(&name, &group));
    }
    Ok(reports)
}
