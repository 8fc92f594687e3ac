use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::encoders::{Linear, INIT_STD};
use crate::error::{bail, Result};
use crate::numerics::{Module, Parameter, Scalar, Tape, Tensor, Var};
use crate::seed::derived_rng;

/// Longest span the decoder will propose, in tokens.
pub const MAX_ANSWER_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Tagging,
    Span,
}

/// Per-token linear read-out on top of encoder (or adapter) outputs.
#[derive(Clone, Debug)]
pub enum TaskHead<T: Scalar = f32> {
    /// `[input_dim × K]` class logits.
    Tagging { linear: Linear<T> },
    /// Start and end logits, each `[input_dim × 1]`.
    Span { start: Linear<T>, end: Linear<T> },
}

impl<T: Scalar> TaskHead<T> {
    pub fn tagging(input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, "head-init");
        TaskHead::Tagging {
            linear: Linear::init(input_dim, num_classes, INIT_STD, &mut rng),
        }
    }

    pub fn span(input_dim: usize, seed: u64) -> Self {
        let mut rng = derived_rng(seed, "head-init");
        TaskHead::Span {
            start: Linear::init(input_dim, 1, INIT_STD, &mut rng),
            end: Linear::init(input_dim, 1, INIT_STD, &mut rng),
        }
    }

    pub fn kind(&self) -> TaskKind {
        match self {
            TaskHead::Tagging { .. } => TaskKind::Tagging,
            TaskHead::Span { .. } => TaskKind::Span,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskHead::Tagging { linear } => linear.input_dim(),
            TaskHead::Span { start, .. } => start.input_dim(),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self {
            TaskHead::Tagging { linear } => Some(linear.output_dim()),
            TaskHead::Span { .. } => None,
        }
    }

    pub fn detached(&self) -> Self {
        match self {
            TaskHead::Tagging { linear } => TaskHead::Tagging {
                linear: linear.detached(),
            },
            TaskHead::Span { start, end } => TaskHead::Span {
                start: start.detached(),
                end: end.detached(),
            },
        }
    }

    pub fn cast<U: Scalar>(&self) -> TaskHead<U> {
        match self {
            TaskHead::Tagging { linear } => TaskHead::Tagging { linear: linear.cast() },
            TaskHead::Span { start, end } => TaskHead::Span {
                start: start.cast(),
                end: end.cast(),
            },
        }
    }

    fn check_dim(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            bail!(Dimension, "head expects {} input columns, got {cols}", self.input_dim());
        }
        Ok(())
    }

    /// Tagging: `[m × K]`. Span: `[m × 2]`, start logits then end logits.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, reps: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_dim(reps.value().cols())?;
        match self {
            TaskHead::Tagging { linear } => linear.forward(tape, reps),
            TaskHead::Span { start, end } => {
                let s = start.forward(tape, reps)?;
                let e = end.forward(tape, reps)?;
                tape.concat_cols(&[s, e])
            }
        }
    }

    /// Task loss for one sequence. Tagging targets are per-token classes;
    /// span targets are `[start, end]` input positions.
    pub fn loss<'t>(&self, tape: &'t Tape<T>, reps: Var<'t, T>, targets: &[usize]) -> Result<Var<'t, T>> {
        self.check_dim(reps.value().cols())?;
        match self {
            TaskHead::Tagging { linear } => tape.cross_entropy(linear.forward(tape, reps)?, targets, None),
            TaskHead::Span { start, end } => {
                if targets.len() != 2 {
                    bail!(Data, "span targets must be [start, end], got {} values", targets.len());
                }
                let s = tape.transpose(start.forward(tape, reps)?)?;
                let e = tape.transpose(end.forward(tape, reps)?)?;
                let ls = tape.cross_entropy(s, &targets[..1], None)?;
                let le = tape.cross_entropy(e, &targets[1..], None)?;
                tape.add(ls, le)
            }
        }
    }

    /// Forward pass without a gradient record.
    pub fn logits(&self, reps: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(reps.clone()))?;
        let v = out.value().clone();
        Ok(v)
    }
}

impl<T: Scalar> Module<T> for TaskHead<T> {
    fn named_params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::with_capacity(4);
        match self {
            TaskHead::Tagging { linear } => linear.named("head.tag", &mut out),
            TaskHead::Span { start, end } => {
                start.named("head.start", &mut out);
                end.named("head.end", &mut out);
            }
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::with_capacity(4);
        match self {
            TaskHead::Tagging { linear } => linear.named_mut("head.tag", &mut out),
            TaskHead::Span { start, end } => {
                start.named_mut("head.start", &mut out);
                end.named_mut("head.end", &mut out);
            }
        }
        out
    }
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanDecoding {
    /// Best span in input positions, `None` for "no answer".
    pub span: Option<(usize, usize)>,
    pub best_score: f64,
    pub null_score: f64,
}

/// Picks `(s, e)` inside `candidates` maximising `start[s] + end[e]` with
/// `s ≤ e` and `e − s < max_len`; answers "no answer" when
/// `start[0] + end[0] ≥ best + threshold`. Ties keep the earliest span.
pub fn decode_span(
    start: &[f64],
    end: &[f64],
    candidates: Range<usize>,
    max_len: usize,
    threshold: f64,
) -> Result<SpanDecoding> {
    if start.len() != end.len() || start.is_empty() {
        bail!(Dimension, "start/end logits of lengths {} and {}", start.len(), end.len());
    }
    if candidates.end > start.len() || max_len == 0 {
        bail!(Config, "invalid span candidates {candidates:?} for {} positions", start.len());
    }
    let null_score = start[0] + end[0];
    let mut best: Option<((usize, usize), f64)> = None;
    for s in candidates.clone() {
        for e in s..candidates.end.min(s + max_len) {
            let score = start[s] + end[e];
            if best.is_none_or(|(_, b)| score > b) {
                best = Some(((s, e), score));
            }
        }
    }
    Ok(match best {
        Some((span, best_score)) if null_score < best_score + threshold => SpanDecoding {
            span: Some(span),
            best_score,
            null_score,
        },
        Some((_, best_score)) => SpanDecoding {
            span: None,
            best_score,
            null_score,
        },
        None => SpanDecoding {
            span: None,
            best_score: f64::NEG_INFINITY,
            null_score,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_head_ties_to_lowest() {
        let mut head = TaskHead::<f32>::tagging(4, 3, 0);
        for (_, p) in head.named_params_mut() {
            p.value.fill(0.0);
        }
        let logits = head.logits(&Tensor::full(&[5, 4], 1.0)).unwrap();
        assert_eq!(logits.shape(), &[5, 3]);
        assert_eq!(argmax_rows(&logits), vec![0; 5]);
    }

    #[test]
    fn dimension_mismatch() {
        let head = TaskHead::<f32>::span(4, 0);
        assert!(matches!(head.logits(&Tensor::zeros(&[2, 3])), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn decode_three_positions_exhaustive() {
        let start = [0.0, 2.0, -1.0];
        let end = [0.0, 0.5, 3.0];
        let d = decode_span(&start, &end, 1..3, MAX_ANSWER_LEN, 0.0).unwrap();
        assert_eq!(d.span, Some((1, 2)));
        assert_eq!(d.best_score, 5.0);
        let d = decode_span(&[9.0, 1.0, 1.0], &[0.0, 1.0, 1.0], 1..3, MAX_ANSWER_LEN, 0.0).unwrap();
        assert_eq!(d.span, None);
    }

    #[test]
    fn decode_respects_length_cap() {
        let start = [0.0, 5.0, 0.0, 0.0, 0.0];
        let end = [0.0, 0.0, 0.0, 0.0, 5.0];
        let d = decode_span(&start, &end, 1..5, 2, 0.0).unwrap();
        let (s, e) = d.span.unwrap();
        assert!(s <= e && e - s < 2);
    }
}
