use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::Stack;
use crate::error::{bail, Result};

pub const MIN_REPEATS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyMeasurement {
    /// Median over repeats of seconds per sequence.
    pub median_seconds: f64,
    /// Seconds per sequence of every timed repeat.
    pub samples: Vec<f64>,
}

/// Single-threaded forward wall-clock. One untimed warm-up pass precedes
/// `repeats` timed passes over all of `sequences`.
pub fn measure_latency(stack: &Stack, sequences: &[Vec<u32>], repeats: usize) -> Result<LatencyMeasurement> {
    Ok(measure_latencies(&[stack], sequences, repeats)?.remove(0))
}

/// Times several stacks round-robin: every repeat runs each stack once, in
/// order, so slow drift in machine load hits all of them alike.
pub fn measure_latencies(stacks: &[&Stack], sequences: &[Vec<u32>], repeats: usize) -> Result<Vec<LatencyMeasurement>> {
    if repeats < MIN_REPEATS {
        bail!(Config, "latency needs at least {MIN_REPEATS} repeats, got {repeats}");
    }
    if sequences.is_empty() {
        bail!(Data, "latency measurement needs at least one sequence");
    }
    for stack in stacks {
        for ids in sequences {
            black_box(stack.logits(ids)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(repeats); stacks.len()];
    for _ in 0..repeats {
        for (stack, out) in stacks.iter().zip(&mut samples) {
            let t = Instant::now();
            for ids in sequences {
                black_box(stack.logits(black_box(ids))?);
            }
            out.push(t.elapsed().as_secs_f64() / sequences.len() as f64);
        }
    }
    Ok(samples
        .into_iter()
        .map(|samples| LatencyMeasurement { median_seconds: median(&samples), samples })
        .collect())
}

fn median(samples: &[f64]) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// `reference / measured`.
pub fn speedup(reference: &LatencyMeasurement, measured: &LatencyMeasurement) -> f64 {
    reference.median_seconds / measured.median_seconds
}
