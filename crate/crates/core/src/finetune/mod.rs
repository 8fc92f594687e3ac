//! Task fine-tuning of a student (+ adapter) + head stack in each training
//! mode, with dev-based model selection.

mod latency;
mod report;

use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use latency::{measure_latencies, measure_latency, speedup, LatencyMeasurement, MIN_REPEATS};
pub use report::{build_report, ParamBreakdown, ReportTable, RunReport};

use crate::adapter::AlignmentAdapter;
use crate::encoders::Encoder;
use crate::error::{bail, Error, Result};
use crate::numerics::{Module, Optimizer, Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::derived_rng;
use crate::tasks::{
    argmax_rows, decode_span, spanqa_metrics, tagging_metrics, MetricsReport, Split, TaskData, TaskHead, TaskKind,
    MAX_ANSWER_LEN,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FinetuneMode {
    /// Student and head; no adapter.
    #[serde(rename = "baseline")]
    BaselineFinetune,
    /// Adapter and head on a frozen student.
    #[serde(rename = "frozen")]
    FrozenAdapter,
    /// Student, adapter and head together.
    #[serde(rename = "joint")]
    JointAdapter,
    /// LoRA matrices and head.
    #[serde(rename = "lora")]
    LoraOnly,
    /// LoRA matrices, adapter and head.
    #[serde(rename = "lora+adapter")]
    LoraPlusAdapter,
    /// Head alone on a frozen student.
    #[serde(rename = "head-only")]
    FrozenHeadOnly,
}

impl FinetuneMode {
    pub const ALL: [FinetuneMode; 6] = [
        FinetuneMode::BaselineFinetune,
        FinetuneMode::FrozenAdapter,
        FinetuneMode::JointAdapter,
        FinetuneMode::LoraOnly,
        FinetuneMode::LoraPlusAdapter,
        FinetuneMode::FrozenHeadOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::BaselineFinetune => "baseline",
            FinetuneMode::FrozenAdapter => "frozen",
            FinetuneMode::JointAdapter => "joint",
            FinetuneMode::LoraOnly => "lora",
            FinetuneMode::LoraPlusAdapter => "lora+adapter",
            FinetuneMode::FrozenHeadOnly => "head-only",
        }
    }

    pub fn uses_adapter(self) -> bool {
        matches!(
            self,
            FinetuneMode::FrozenAdapter | FinetuneMode::JointAdapter | FinetuneMode::LoraPlusAdapter
        )
    }

    pub fn uses_lora(self) -> bool {
        matches!(self, FinetuneMode::LoraOnly | FinetuneMode::LoraPlusAdapter)
    }

    /// Whether the student's base weights learn.
    pub fn trains_student(self) -> bool {
        matches!(self, FinetuneMode::BaselineFinetune | FinetuneMode::JointAdapter)
    }

    /// 5e-5 when the student's base weights learn, 1e-4 otherwise.
    pub fn default_learning_rate(self) -> f64 {
        if self.trains_student() {
            5e-5
        } else {
            1e-4
        }
    }
}

impl std::fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FinetuneMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown fine-tuning mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// No-answer margin for span decoding.
    #[serde(default)]
    pub null_threshold: f64,
}

impl FinetuneConfig {
    /// Mode-specific learning rate; 4 epochs for tagging, 3 for span QA.
    pub fn new(mode: FinetuneMode, task: TaskKind, seed: u64) -> Self {
        Self {
            mode,
            learning_rate: mode.default_learning_rate(),
            epochs: match task {
                TaskKind::Tagging => 4,
                TaskKind::Span => 3,
            },
            batch_size: 1,
            seed,
            null_threshold: 0.0,
        }
    }
}

/// Student, optional adapter and task head, applied in that order.
#[derive(Clone, Debug)]
pub struct Stack<T: Scalar = f32> {
    pub student: Encoder<T>,
    pub adapter: Option<AlignmentAdapter<T>>,
    pub head: TaskHead<T>,
}

impl<T: Scalar> Stack<T> {
    pub fn new(student: Encoder<T>, adapter: Option<AlignmentAdapter<T>>, head: TaskHead<T>) -> Result<Self> {
        let stack = Self { student, adapter, head };
        stack.check_dims()?;
        Ok(stack)
    }

    fn check_dims(&self) -> Result<()> {
        let rep_dim = match &self.adapter {
            Some(a) => {
                if a.config().d_c != self.student.dim() {
                    bail!(Config, "adapter expects d_c={} but student dim is {}", a.config().d_c, self.student.dim());
                }
                a.config().d_l
            }
            None => self.student.dim(),
        };
        if self.head.input_dim() != rep_dim {
            bail!(Config, "head input dim {} does not match representation dim {rep_dim}", self.head.input_dim());
        }
        Ok(())
    }

    pub fn detached(&self) -> Self {
        Self {
            student: self.student.detached(),
            adapter: self.adapter.as_ref().map(AlignmentAdapter::detached),
            head: self.head.detached(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Stack<U> {
        Stack {
            student: self.student.cast(),
            adapter: self.adapter.as_ref().map(AlignmentAdapter::cast),
            head: self.head.cast(),
        }
    }

    /// Records the representations fed to the head.
    pub fn reps<'t>(&self, tape: &'t Tape<T>, ids: &[u32]) -> Result<Var<'t, T>> {
        let rc = self.student.forward(tape, ids)?;
        self.reps_from_student(tape, rc)
    }

    fn reps_from_student<'t>(&self, tape: &'t Tape<T>, rc: Var<'t, T>) -> Result<Var<'t, T>> {
        match &self.adapter {
            Some(a) => a.forward(tape, rc),
            None => Ok(rc),
        }
    }

    /// Head logits for one input, without recording gradients.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let reps = self.reps(&tape, ids)?;
        let out = self.head.forward(&tape, reps)?;
        let v = out.value().clone();
        Ok(v)
    }

    /// Parameter counts of each component.
    pub fn breakdown(&self) -> (usize, usize, usize) {
        (
            self.student.param_count(),
            self.adapter.as_ref().map_or(0, Module::param_count),
            self.head.param_count(),
        )
    }
}

impl<T: Scalar> Module<T> for Stack<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out: Vec<(String, &Parameter<T>)> = self
            .student
            .named_params()
            .into_iter()
            .map(|(n, p)| (format!("student.{n}"), p))
            .collect();
        if let Some(a) = &self.adapter {
            out.extend(a.named_params().into_iter().map(|(n, p)| (format!("adapter.{n}"), p)));
        }
        out.extend(self.head.named_params());
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out: Vec<(String, &mut Parameter<T>)> = self
            .student
            .named_params_mut()
            .into_iter()
            .map(|(n, p)| (format!("student.{n}"), p))
            .collect();
        if let Some(a) = &mut self.adapter {
            out.extend(a.named_params_mut().into_iter().map(|(n, p)| (format!("adapter.{n}"), p)));
        }
        out.extend(self.head.named_params_mut());
        out
    }
}

/// Checks that the stack's components fit `mode`.
pub fn check_mode(stack: &Stack, mode: FinetuneMode) -> Result<()> {
    if stack.adapter.is_some() != mode.uses_adapter() {
        bail!(
            Config,
            "mode {mode} {} an adapter",
            if mode.uses_adapter() { "requires" } else { "does not take" }
        );
    }
    if stack.student.lora_config().is_some() != mode.uses_lora() {
        bail!(
            Config,
            "mode {mode} {} LoRA matrices on the student",
            if mode.uses_lora() { "requires" } else { "does not take" }
        );
    }
    Ok(())
}

/// Marks exactly the parameters `mode` trains.
pub fn assign_trainable(stack: &mut Stack, mode: FinetuneMode) {
    for (name, p) in stack.student.named_params_mut() {
        let is_lora = name.contains(".lora_");
        p.trainable = mode.trains_student() || (mode.uses_lora() && is_lora);
    }
    if let Some(a) = &mut stack.adapter {
        a.set_trainable(true);
    }
    stack.head.set_trainable(true);
}

/// SHA-256 over the names and bytes of every non-trainable parameter.
pub fn frozen_hash<T: Scalar>(module: &dyn Module<T>) -> String {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for (name, p) in module.named_params() {
        if !p.trainable {
            hasher.update(name.as_bytes());
            buf.clear();
            p.value.write_le(&mut buf);
            hasher.update(&buf);
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// One training example: model input and its targets.
struct Example {
    ids: Vec<u32>,
    targets: Vec<usize>,
}

fn train_examples(data: &TaskData) -> Vec<Example> {
    match data {
        TaskData::Tagging(d) => d
            .split(Split::Train)
            .map(|s| Example {
                ids: s.ids.clone(),
                targets: s.labels.clone(),
            })
            .collect(),
        TaskData::SpanQa(d) => d
            .split(Split::Train)
            .map(|item| {
                let (s, e) = item.gold_positions();
                Example {
                    ids: item.model_input().0,
                    targets: vec![s, e],
                }
            })
            .collect(),
    }
}

fn task_kind(data: &TaskData) -> TaskKind {
    match data {
        TaskData::Tagging(_) => TaskKind::Tagging,
        TaskData::SpanQa(_) => TaskKind::Span,
    }
}

/// Pure evaluation of `stack` on one split.
pub fn evaluate(stack: &Stack, data: &TaskData, split: Split) -> Result<MetricsReport> {
    evaluate_with(stack, data, split, 0.0)
}

pub fn evaluate_with(stack: &Stack, data: &TaskData, split: Split, null_threshold: f64) -> Result<MetricsReport> {
    if stack.head.kind() != task_kind(data) {
        bail!(Config, "{:?} head cannot be evaluated on {:?} data", stack.head.kind(), task_kind(data));
    }
    if data.split_len(split) == 0 {
        bail!(Data, "split {} is empty", split.as_str());
    }
    match data {
        TaskData::Tagging(d) => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for s in d.split(split) {
                pred.push(argmax_rows(&stack.logits(&s.ids)?));
                gold.push(s.labels.clone());
            }
            tagging_metrics(&pred, &gold, d.num_classes(), d.meta.outside_class)
        }
        TaskData::SpanQa(d) => {
            let mut pred = Vec::new();
            let mut gold = Vec::new();
            for item in d.split(split) {
                let (ids, offset) = item.model_input();
                let logits = stack.logits(&ids)?;
                let start: Vec<f64> = (0..logits.rows()).map(|i| logits.at(i, 0).as_f64()).collect();
                let end: Vec<f64> = (0..logits.rows()).map(|i| logits.at(i, 1).as_f64()).collect();
                let decoded = decode_span(&start, &end, offset..ids.len(), MAX_ANSWER_LEN, null_threshold)?;
                pred.push(decoded.span.map(|(s, e)| (s - offset, e - offset)));
                gold.push(item.answer);
            }
            spanqa_metrics(&pred, &gold)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub config: FinetuneConfig,
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Dev headline metric per epoch.
    pub dev_metric: Vec<f64>,
    /// 1-based epoch of the returned checkpoint, 0 when no training ran.
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Trains the stack for `cfg.epochs` and returns the dev-best copy.
pub fn finetune(mut stack: Stack, data: &TaskData, cfg: &FinetuneConfig) -> Result<(Stack, FinetuneRecord)> {
    check_mode(&stack, cfg.mode)?;
    stack.check_dims()?;
    if stack.head.kind() != task_kind(data) {
        bail!(Config, "{:?} head cannot be trained on {:?} data", stack.head.kind(), task_kind(data));
    }
    if let (Some(k), TaskData::Tagging(d)) = (stack.head.num_classes(), data) {
        if k != d.num_classes() {
            bail!(Config, "head predicts {k} classes, dataset has {}", d.num_classes());
        }
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        bail!(Config, "fine-tuning needs a positive learning rate and batch size");
    }
    let start = Instant::now();
    let mut record = FinetuneRecord {
        config: cfg.clone(),
        train_loss: Vec::new(),
        dev_metric: Vec::new(),
        best_epoch: 0,
        seconds: 0.0,
    };
    if cfg.epochs == 0 {
        return Ok((stack, record));
    }
    let examples = train_examples(data);
    if examples.is_empty() {
        bail!(Data, "no training examples");
    }
    assign_trainable(&mut stack, cfg.mode);
    let frozen_before = frozen_hash(&stack);
    let student_frozen = !stack.student.any_trainable();
    let cache: Option<Vec<Tensor>> = if student_frozen {
        Some(examples.iter().map(|e| stack.student.encode(&e.ids)).collect::<Result<_>>()?)
    } else {
        None
    };

    let mut rng = derived_rng(cfg.seed, "finetune-order");
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut best: Option<(f64, Stack)> = None;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let mut sum: Option<Var<'_, f32>> = None;
            for &k in batch {
                let rc = match &cache {
                    Some(c) => tape.constant(c[k].clone()),
                    None => stack.student.forward(&tape, &examples[k].ids)?,
                };
                let reps = stack.reps_from_student(&tape, rc)?;
                let loss = stack.head.loss(&tape, reps, &examples[k].targets)?;
                sum = Some(match sum {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let loss = tape.scale(sum.expect("non-empty batch"), 1.0 / batch.len() as f32);
            let value = loss.item()?.as_f64();
            if !value.is_finite() {
                bail!(Divergence, "fine-tuning loss became {value} in epoch {epoch}");
            }
            total += value * batch.len() as f64;
            let grads = tape.backward(loss)?;
            stack.accumulate_grads(&grads);
            opt.step(stack.named_params_mut().into_iter().map(|(_, p)| p))?;
        }
        record.train_loss.push(total / examples.len() as f64);
        let dev = evaluate_with(&stack, data, Split::Dev, cfg.null_threshold)?.headline();
        record.dev_metric.push(dev);
        if best.as_ref().is_none_or(|(b, _)| dev > *b) {
            best = Some((dev, stack.clone()));
            record.best_epoch = epoch;
        }
    }
    if frozen_hash(&stack) != frozen_before {
        bail!(FrozenViolation, "a parameter outside the {} trainable set changed", cfg.mode);
    }
    record.seconds = start.elapsed().as_secs_f64();
    let (_, best) = best.expect("at least one epoch");
    Ok((best, record))
}
