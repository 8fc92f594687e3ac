//! Tagging and span-QA metrics. Every figure is a percentage in `[0, 100]`
//! and can be recomputed from the counts stored alongside it.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassCounts {
    pub fn support(&self) -> u64 {
        self.tp + self.fn_
    }

    /// `2·tp / (2·tp + fp + fn)`, or `None` when the class never occurs.
    pub fn f1(&self) -> Option<f64> {
        let denom = 2 * self.tp + self.fp + self.fn_;
        (denom > 0).then(|| (2 * self.tp) as f64 / denom as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggingCounts {
    pub classes: Vec<ClassCounts>,
    pub correct: u64,
    pub total: u64,
    /// Class left out of the overall and macro F1 (NER-style data).
    pub outside: Option<usize>,
}

impl TaggingCounts {
    pub fn accuracy(&self) -> f64 {
        100.0 * (self.correct as f64 / self.total as f64)
    }

    /// Micro-averaged F1 over every class except `skip`.
    pub fn micro_f1(&self, skip: Option<usize>) -> f64 {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (k, c) in self.classes.iter().enumerate() {
            if Some(k) != skip {
                tp += c.tp;
                fp += c.fp;
                fn_ += c.fn_;
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom == 0 {
            return 100.0;
        }
        100.0 * ((2 * tp) as f64 / denom as f64)
    }

    /// Unweighted mean of per-class F1 over classes with gold support,
    /// excluding the outside class.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = self
            .classes
            .iter()
            .enumerate()
            .filter(|&(k, c)| Some(k) != self.outside && c.support() > 0)
            .map(|(_, c)| c.f1().unwrap_or(0.0))
            .collect();
        if scores.is_empty() {
            return 100.0;
        }
        100.0 * scores.iter().sum::<f64>() / scores.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanCounts {
    pub items: u64,
    pub exact: u64,
    pub f1_sum: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "lowercase")]
pub enum MetricsReport {
    Tagging {
        accuracy: f64,
        overall_f1: f64,
        macro_f1: f64,
        counts: TaggingCounts,
    },
    Span {
        exact_match: f64,
        f1: f64,
        counts: SpanCounts,
    },
}

impl MetricsReport {
    /// Accuracy for tagging, token F1 for span QA.
    pub fn headline(&self) -> f64 {
        match self {
            MetricsReport::Tagging { accuracy, .. } => *accuracy,
            MetricsReport::Span { f1, .. } => *f1,
        }
    }

    /// Rebuilds the report from its stored counts alone.
    pub fn recompute(&self) -> MetricsReport {
        match self {
            MetricsReport::Tagging { counts, .. } => tagging_report(counts.clone()),
            MetricsReport::Span { counts, .. } => span_report(counts.clone()),
        }
    }

    /// `(name, value)` pairs in display order.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        match self {
            MetricsReport::Tagging {
                accuracy,
                overall_f1,
                macro_f1,
                ..
            } => vec![("acc", *accuracy), ("f1_o", *overall_f1), ("f1_m", *macro_f1)],
            MetricsReport::Span { exact_match, f1, .. } => vec![("em", *exact_match), ("f1", *f1)],
        }
    }
}

fn tagging_report(counts: TaggingCounts) -> MetricsReport {
    MetricsReport::Tagging {
        accuracy: counts.accuracy(),
        overall_f1: counts.micro_f1(counts.outside),
        macro_f1: counts.macro_f1(),
        counts,
    }
}

fn span_report(counts: SpanCounts) -> MetricsReport {
    MetricsReport::Span {
        exact_match: 100.0 * (counts.exact as f64 / counts.items as f64),
        f1: 100.0 * counts.f1_sum / counts.items as f64,
        counts,
    }
}

pub fn tagging_metrics(
    predicted: &[Vec<usize>],
    gold: &[Vec<usize>],
    num_classes: usize,
    outside: Option<usize>,
) -> Result<MetricsReport> {
    if predicted.len() != gold.len() {
        bail!(Data, "{} predicted sequences for {} gold sequences", predicted.len(), gold.len());
    }
    let mut counts = TaggingCounts {
        classes: vec![ClassCounts::default(); num_classes],
        correct: 0,
        total: 0,
        outside,
    };
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            bail!(Data, "sequence {i}: {} predictions for {} gold labels", p.len(), g.len());
        }
        for (&pk, &gk) in p.iter().zip(g) {
            if pk >= num_classes || gk >= num_classes {
                bail!(Data, "sequence {i}: label outside [0, {num_classes})");
            }
            counts.total += 1;
            if pk == gk {
                counts.correct += 1;
                counts.classes[gk].tp += 1;
            } else {
                counts.classes[pk].fp += 1;
                counts.classes[gk].fn_ += 1;
            }
        }
    }
    if counts.total == 0 {
        bail!(Data, "no tokens to score");
    }
    Ok(tagging_report(counts))
}

/// Token-position F1 between two inclusive spans, with the no-answer rule
/// (both `None` scores 1, exactly one `None` scores 0).
pub fn span_token_f1(predicted: Option<(usize, usize)>, gold: Option<(usize, usize)>) -> f64 {
    match (predicted, gold) {
        (None, None) => 1.0,
        (None, _) | (_, None) => 0.0,
        (Some((ps, pe)), Some((gs, ge))) => {
            let lo = ps.max(gs);
            let hi = pe.min(ge);
            if lo > hi {
                return 0.0;
            }
            let overlap = (hi - lo + 1) as f64;
            let precision = overlap / (pe - ps + 1) as f64;
            let recall = overlap / (ge - gs + 1) as f64;
            2.0 * precision * recall / (precision + recall)
        }
    }
}

pub fn spanqa_metrics(predicted: &[Option<(usize, usize)>], gold: &[Option<(usize, usize)>]) -> Result<MetricsReport> {
    if predicted.len() != gold.len() {
        bail!(Data, "{} predictions for {} gold items", predicted.len(), gold.len());
    }
    if gold.is_empty() {
        bail!(Data, "no items to score");
    }
    let mut counts = SpanCounts {
        items: 0,
        exact: 0,
        f1_sum: 0.0,
    };
    for (i, (&p, &g)) in predicted.iter().zip(gold).enumerate() {
        for (s, e) in [p, g].into_iter().flatten() {
            if s > e {
                bail!(Data, "item {i}: span start {s} after end {e}");
            }
        }
        counts.items += 1;
        if p == g {
            counts.exact += 1;
        }
        counts.f1_sum += span_token_f1(p, g);
    }
    Ok(span_report(counts))
}
