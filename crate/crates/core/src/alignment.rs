//! MSE alignment of adapter outputs onto teacher embeddings (phases 1 and 2).
//! Both encoders stay frozen; only the adapter learns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapter::AlignmentAdapter;
use crate::encoders::Encoder;
use crate::error::{bail, Result};
use crate::numerics::{assemble_windows, Module, Optimizer, Scalar, Tape, Tensor};
use crate::seed::derived_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentPhase {
    TaskIndependent,
    TaskSpecific,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPhaseConfig {
    pub phase: AlignmentPhase,
    pub learning_rate: f64,
    pub budget: Budget,
    pub batch_size: usize,
    pub seed: u64,
    /// Share of the corpus held out for validation.
    pub validation_fraction: f64,
    /// Validation every this many steps (step budgets only).
    pub eval_every: usize,
    /// Precompute student and teacher outputs once.
    pub cache: bool,
}

impl AlignmentPhaseConfig {
    /// Learning rate 5e-4, 1000 steps.
    pub fn task_independent(seed: u64) -> Self {
        Self {
            phase: AlignmentPhase::TaskIndependent,
            learning_rate: 5e-4,
            budget: Budget::Steps(1000),
            batch_size: 8,
            seed,
            validation_fraction: 0.1,
            eval_every: 50,
            cache: false,
        }
    }

    /// Learning rate 1e-4, 10 epochs.
    pub fn task_specific(seed: u64) -> Self {
        Self {
            phase: AlignmentPhase::TaskSpecific,
            learning_rate: 1e-4,
            budget: Budget::Epochs(10),
            ..Self::task_independent(seed)
        }
    }

    pub fn defaults_for(phase: AlignmentPhase, seed: u64) -> Self {
        match phase {
            AlignmentPhase::TaskIndependent => Self::task_independent(seed),
            AlignmentPhase::TaskSpecific => Self::task_specific(seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            bail!(Config, "alignment learning rate must be positive");
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            bail!(Config, "batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            bail!(Config, "validation_fraction must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRunRecord {
    pub config: AlignmentPhaseConfig,
    /// Training MSE per step or per epoch.
    pub train_mse: Vec<f64>,
    /// `(index, validation MSE)`, starting with index 0 before training.
    pub validation: Vec<(usize, f64)>,
    /// Seconds since the start of training at each training record.
    pub elapsed: Vec<f64>,
    pub seconds: f64,
}

impl AlignmentRunRecord {
    pub fn initial_validation(&self) -> Option<f64> {
        self.validation.first().map(|v| v.1)
    }

    pub fn final_validation(&self) -> Option<f64> {
        self.validation.last().map(|v| v.1)
    }

    /// One header line, then `index train_mse val_mse elapsed_s` per
    /// record (`-` where no validation ran).
    pub fn to_log(&self) -> String {
        let val: BTreeMap<usize, f64> = self.validation.iter().copied().collect();
        let mut s = String::from("index\ttrain_mse\tval_mse\telapsed_s\n");
        for (i, (t, e)) in self.train_mse.iter().zip(&self.elapsed).enumerate() {
            let idx = i + 1;
            let v = val.get(&idx).map_or("-".to_string(), |v| format!("{v:.8e}"));
            writeln!(s, "{idx}\t{t:.8e}\t{v}\t{e:.4}").expect("string write");
        }
        s
    }
}

/// Student windows and teacher targets for one sequence.
struct Pair {
    windows: Tensor,
    target: Tensor,
}

fn check_setup(adapter: &AlignmentAdapter, student: &Encoder, teacher: &Encoder) -> Result<()> {
    let cfg = adapter.config();
    if cfg.d_c != student.dim() || cfg.d_l != teacher.dim() {
        bail!(
            Config,
            "adapter maps {} -> {} but student/teacher dims are {} / {}",
            cfg.d_c,
            cfg.d_l,
            student.dim(),
            teacher.dim()
        );
    }
    for (who, enc) in [("student", student), ("teacher", teacher)] {
        if enc.any_trainable() {
            bail!(FrozenViolation, "{who} encoder has trainable parameters during alignment");
        }
    }
    Ok(())
}

fn make_pair(adapter: &AlignmentAdapter, student: &Encoder, teacher: &Encoder, ids: &[u32]) -> Result<Pair> {
    Ok(Pair {
        windows: assemble_windows(&student.encode(ids)?, adapter.config().window_n)?,
        target: teacher.encode(ids)?,
    })
}

fn pair_mse(adapter: &AlignmentAdapter, pair: &Pair) -> Result<f64> {
    let tape = Tape::new();
    let out = adapter.forward_windowed(&tape, tape.constant(pair.windows.clone()))?;
    let loss = tape.mse_loss(out, &pair.target)?;
    let v = loss.item()?.as_f64();
    Ok(v)
}

fn mean_mse(adapter: &AlignmentAdapter, pairs: &[Pair]) -> Result<f64> {
    let mut total = 0.0;
    for p in pairs {
        total += pair_mse(adapter, p)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Mean over sequences of the per-sequence MSE between adapter outputs and
/// teacher embeddings.
pub fn eval_alignment_mse(
    adapter: &AlignmentAdapter,
    student: &Encoder,
    teacher: &Encoder,
    corpus: &[Vec<u32>],
) -> Result<f64> {
    if corpus.is_empty() {
        bail!(Data, "alignment evaluation on an empty corpus");
    }
    check_setup(adapter, student, teacher)?;
    let pairs = corpus
        .iter()
        .map(|ids| make_pair(adapter, student, teacher, ids))
        .collect::<Result<Vec<_>>>()?;
    mean_mse(adapter, &pairs)
}

/// Seed-determined split into (train, validation) sequence indices.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut derived_rng(seed, "alignment-holdout"));
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if fraction > 0.0 { n_val.clamp(1, n.saturating_sub(1)) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Batches of equal-length sequences, in seeded random order.
fn epoch_batches(lengths: &[(usize, usize)], batch_size: usize, rng: &mut crate::seed::Rng) -> Vec<Vec<usize>> {
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(i, len) in lengths {
        buckets.entry(len).or_default().push(i);
    }
    let mut batches = Vec::new();
    for mut members in buckets.into_values() {
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Trains `adapter` to map student windows onto teacher embeddings.
pub fn align_train(
    adapter: &mut AlignmentAdapter,
    student: &Encoder,
    teacher: &Encoder,
    corpus: &[Vec<u32>],
    cfg: &AlignmentPhaseConfig,
) -> Result<AlignmentRunRecord> {
    cfg.validate()?;
    check_setup(adapter, student, teacher)?;
    if corpus.len() < 2 {
        bail!(Data, "alignment needs at least two sequences");
    }
    let hashes = (student.weight_hash(), teacher.weight_hash());
    let start = Instant::now();
    let (train_idx, val_idx) = holdout_split(corpus.len(), cfg.validation_fraction, cfg.seed);
    let val_pairs = val_idx
        .iter()
        .map(|&i| make_pair(adapter, student, teacher, &corpus[i]))
        .collect::<Result<Vec<_>>>()?;
    let cache: Option<Vec<Pair>> = if cfg.cache {
        Some(
            train_idx
                .iter()
                .map(|&i| make_pair(adapter, student, teacher, &corpus[i]))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    // positions into train_idx
    let lengths: Vec<(usize, usize)> = train_idx.iter().enumerate().map(|(k, &i)| (k, corpus[i].len())).collect();

    let mut record = AlignmentRunRecord {
        config: cfg.clone(),
        train_mse: Vec::new(),
        validation: Vec::new(),
        elapsed: Vec::new(),
        seconds: 0.0,
    };
    let validate = |adapter: &AlignmentAdapter, index: usize, record: &mut AlignmentRunRecord| -> Result<()> {
        if val_pairs.is_empty() {
            return Ok(());
        }
        let v = mean_mse(adapter, &val_pairs)?;
        if !v.is_finite() {
            bail!(Divergence, "validation MSE became {v} at index {index}");
        }
        record.validation.push((index, v));
        Ok(())
    };
    validate(adapter, 0, &mut record)?;

    let mut rng = derived_rng(cfg.seed, "alignment-batches");
    let mut opt = Optimizer::adam(cfg.learning_rate);
    let mut run_batch = |adapter: &mut AlignmentAdapter, batch: &[usize]| -> Result<f64> {
        let owned: Vec<Pair>;
        let pairs: Vec<&Pair> = match &cache {
            Some(c) => batch.iter().map(|&k| &c[k]).collect(),
            None => {
                owned = batch
                    .iter()
                    .map(|&k| make_pair(adapter, student, teacher, &corpus[train_idx[k]]))
                    .collect::<Result<_>>()?;
                owned.iter().collect()
            }
        };
        let windows = Tensor::concat_rows(&pairs.iter().map(|p| &p.windows).collect::<Vec<_>>())?;
        let target = Tensor::concat_rows(&pairs.iter().map(|p| &p.target).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let out = adapter.forward_windowed(&tape, tape.constant(windows))?;
        let loss = tape.mse_loss(out, &target)?;
        let value = loss.item()?.as_f64();
        if !value.is_finite() {
            bail!(Divergence, "alignment loss became {value}");
        }
        let grads = tape.backward(loss)?;
        adapter.accumulate_grads(&grads);
        opt.step(adapter.named_params_mut().into_iter().map(|(_, p)| p))?;
        Ok(value)
    };

    match cfg.budget {
        Budget::Steps(steps) => {
            let mut queue: Vec<Vec<usize>> = Vec::new();
            for step in 1..=steps {
                if queue.is_empty() {
                    queue = epoch_batches(&lengths, cfg.batch_size, &mut rng);
                    queue.reverse();
                }
                let batch = queue.pop().expect("non-empty epoch");
                let v = run_batch(adapter, &batch)?;
                record.train_mse.push(v);
                record.elapsed.push(start.elapsed().as_secs_f64());
                if step % cfg.eval_every == 0 || step == steps {
                    validate(adapter, step, &mut record)?;
                }
            }
        }
        Budget::Epochs(epochs) => {
            for epoch in 1..=epochs {
                let mut total = 0.0;
                let mut count = 0usize;
                for batch in epoch_batches(&lengths, cfg.batch_size, &mut rng) {
                    total += run_batch(adapter, &batch)? * batch.len() as f64;
                    count += batch.len();
                }
                record.train_mse.push(total / count as f64);
                record.elapsed.push(start.elapsed().as_secs_f64());
                validate(adapter, epoch, &mut record)?;
            }
        }
    }
    if (student.weight_hash(), teacher.weight_hash()) != hashes {
        bail!(FrozenViolation, "encoder weights changed during alignment");
    }
    record.seconds = start.elapsed().as_secs_f64();
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::encoders::EncoderConfig;

    fn setup() -> (Encoder, Encoder, Vec<Vec<u32>>) {
        let mut teacher = Encoder::init(EncoderConfig::teacher(32, 16, 1)).unwrap();
        let mut student = Encoder::init(EncoderConfig::tiny(32, 16, 2)).unwrap();
        teacher.freeze();
        student.freeze();
        let corpus = (0..20u32).map(|i| (0..(4 + i % 3)).map(|j| (i * 7 + j) % 32).collect()).collect();
        (student, teacher, corpus)
    }

    #[test]
    fn zero_budget_leaves_adapter() {
        let (s, t, c) = setup();
        let mut a = AlignmentAdapter::init(AdapterConfig::new(3, 16, 64), 0).unwrap();
        let before = a.weight_hash();
        let cfg = AlignmentPhaseConfig {
            budget: Budget::Steps(0),
            ..AlignmentPhaseConfig::task_independent(0)
        };
        let rec = align_train(&mut a, &s, &t, &c, &cfg).unwrap();
        assert_eq!(a.weight_hash(), before);
        assert_eq!(rec.validation.len(), 1);
        assert!(rec.train_mse.is_empty());
    }

    #[test]
    fn trainable_encoder_rejected() {
        let (s, mut t, c) = setup();
        t.set_trainable(true);
        let mut a = AlignmentAdapter::init(AdapterConfig::new(1, 16, 64), 0).unwrap();
        let err = align_train(&mut a, &s, &t, &c, &AlignmentPhaseConfig::task_independent(0));
        assert!(matches!(err, Err(crate::Error::FrozenViolation(_))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let (s, t, c) = setup();
        let mut a = AlignmentAdapter::init(AdapterConfig::new(1, 32, 64), 0).unwrap();
        let err = align_train(&mut a, &s, &t, &c, &AlignmentPhaseConfig::task_independent(0));
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn cached_and_uncached_agree_bitwise() {
        let (s, t, c) = setup();
        let cfg = AlignmentPhaseConfig {
            budget: Budget::Steps(15),
            eval_every: 5,
            ..AlignmentPhaseConfig::task_independent(3)
        };
        let mut a = AlignmentAdapter::init(AdapterConfig::new(3, 16, 64), 0).unwrap();
        let mut b = a.detached();
        let ra = align_train(&mut a, &s, &t, &c, &cfg).unwrap();
        let rb = align_train(&mut b, &s, &t, &c, &AlignmentPhaseConfig { cache: true, ..cfg }).unwrap();
        assert_eq!(a.weight_hash(), b.weight_hash());
        assert_eq!(ra.train_mse, rb.train_mse);
        assert_eq!(ra.validation, rb.validation);
        assert_eq!(ra.to_log().lines().count(), 16);
    }

    #[test]
    fn empty_eval_corpus() {
        let (s, t, _) = setup();
        let a = AlignmentAdapter::init(AdapterConfig::new(1, 16, 64), 0).unwrap();
        assert!(matches!(eval_alignment_mse(&a, &s, &t, &[]), Err(crate::Error::Data(_))));
    }
}
