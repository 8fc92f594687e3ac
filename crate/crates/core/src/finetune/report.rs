//! Run reports and the size/speed/quality table built from them.
//!
//! Each [`RunReport`] is one (model, mode, window, task, seed) run and
//! serialises to JSON. [`build_report`] averages seeds and lays runs out as
//! one row per (model, mode, window), one column group per task, followed by
//! `Sz` (percent of the reference parameter count) and `Spd` (speedup over
//! the reference).

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::FinetuneMode;
use crate::adapter::size_percentage;
use crate::error::{bail, Result};
use crate::tasks::MetricsReport;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Encoder parameters, including any LoRA matrices.
    pub model: usize,
    pub adapter: usize,
    pub head: usize,
    /// Parameter count of the reference encoder.
    pub reference: usize,
}

impl ParamBreakdown {
    /// `100 · (model + adapter) / reference`; heads are left out.
    pub fn size_percent(&self) -> Result<f64> {
        size_percentage(&[self.model, self.adapter], self.reference)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    /// `None` marks the reference model.
    pub mode: Option<FinetuneMode>,
    pub window_n: Option<usize>,
    pub task: String,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub params: ParamBreakdown,
    pub size_percent: f64,
    pub latency_seconds: Option<f64>,
    pub speedup: Option<f64>,
    pub config: serde_json::Value,
}

impl RunReport {
    pub fn is_reference(&self) -> bool {
        self.mode.is_none()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub mode: Option<FinetuneMode>,
    pub window_n: Option<usize>,
    /// Task name to seed-averaged `(metric, value)` pairs.
    pub metrics: BTreeMap<String, Vec<(String, f64)>>,
    pub size_percent: f64,
    pub speedup: Option<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub tasks: Vec<String>,
    /// Metric names per task, in column order.
    pub columns: BTreeMap<String, Vec<String>>,
    /// Reference row first.
    pub rows: Vec<ReportRow>,
    pub reference_params: usize,
}

fn column_label(metric: &str) -> &str {
    match metric {
        "acc" => "Acc",
        "f1_o" => "F1_O",
        "f1_m" => "F1_M",
        "em" => "EM",
        "f1" => "F1",
        other => other,
    }
}

impl ReportTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Plain-text table with aligned columns, two decimals throughout.
    pub fn render(&self) -> String {
        let mut header = vec!["Model".to_string(), "Mode".to_string(), "W".to_string()];
        for task in &self.tasks {
            for m in &self.columns[task] {
                header.push(format!("{} {}", task.to_uppercase(), column_label(m)));
            }
        }
        header.push("Sz".into());
        header.push("Spd".into());
        let mut body: Vec<Vec<String>> = Vec::new();
        for row in &self.rows {
            let mut cells = vec![
                row.model.clone(),
                row.mode.map_or("reference".to_string(), |m| m.name().to_string()),
                row.window_n.map_or("-".to_string(), |n| n.to_string()),
            ];
            for task in &self.tasks {
                for m in &self.columns[task] {
                    let v = row
                        .metrics
                        .get(task)
                        .and_then(|fields| fields.iter().find(|(k, _)| k == m))
                        .map_or("-".to_string(), |(_, v)| format!("{v:.2}"));
                    cells.push(v);
                }
            }
            cells.push(format!("{:.2}", row.size_percent));
            cells.push(row.speedup.map_or("-".to_string(), |s| format!("{s:.2}")));
            body.push(cells);
        }
        let widths: Vec<usize> = (0..header.len())
            .map(|c| body.iter().map(|r| r[c].len()).chain([header[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .enumerate()
                .map(|(c, s)| if c < 2 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
                .collect();
            parts.join("  ").trim_end().to_string()
        };
        let mut out = String::new();
        writeln!(out, "{}", line(&header)).expect("string write");
        let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
        writeln!(out, "{}", "-".repeat(rule)).expect("string write");
        for cells in &body {
            writeln!(out, "{}", line(cells)).expect("string write");
        }
        out
    }
}

type RowKey = (usize, Option<FinetuneMode>, Option<usize>);

/// Aggregates runs (averaging over seeds) into one table.
pub fn build_report(runs: &[RunReport]) -> Result<ReportTable> {
    let Some(first) = runs.first() else {
        bail!(Report, "no runs to report");
    };
    let reference_params = first.params.reference;
    if let Some(bad) = runs.iter().find(|r| r.params.reference != reference_params) {
        bail!(
            Report,
            "run {} / {:?} uses a reference of {} parameters, others {reference_params}",
            bad.model,
            bad.mode,
            bad.params.reference
        );
    }
    let mut tasks: Vec<String> = Vec::new();
    let mut columns: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut models: Vec<String> = Vec::new();
    let mut groups: BTreeMap<RowKey, Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        let names: Vec<String> = r.metrics.fields().iter().map(|(k, _)| k.to_string()).collect();
        match columns.get(&r.task) {
            Some(existing) if *existing != names => {
                bail!(Report, "task {} reported with inconsistent metrics", r.task)
            }
            Some(_) => {}
            None => {
                tasks.push(r.task.clone());
                columns.insert(r.task.clone(), names);
            }
        }
        let model_idx = match models.iter().position(|m| *m == r.model) {
            Some(i) => i,
            None => {
                models.push(r.model.clone());
                models.len() - 1
            }
        };
        let model_idx = if r.is_reference() { 0 } else { model_idx + 1 };
        groups.entry((model_idx, r.mode, r.window_n)).or_default().push(r);
    }

    let mut rows = Vec::new();
    if !groups.keys().any(|k| k.1.is_none()) {
        rows.push(ReportRow {
            model: "reference".into(),
            mode: None,
            window_n: None,
            metrics: BTreeMap::new(),
            size_percent: 100.0,
            speedup: Some(1.0),
            seeds: Vec::new(),
        });
    }
    for runs in groups.values() {
        let head = runs[0];
        let mut per_task: BTreeMap<String, Vec<&RunReport>> = BTreeMap::new();
        for r in runs {
            per_task.entry(r.task.clone()).or_default().push(r);
        }
        let metrics = per_task
            .into_iter()
            .map(|(task, rs)| {
                let names = &columns[&task];
                let means = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), rs.iter().map(|r| r.metrics.fields()[i].1).sum::<f64>() / rs.len() as f64))
                    .collect();
                (task, means)
            })
            .collect();
        let speeds: Vec<f64> = runs.iter().filter_map(|r| r.speedup).collect();
        let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        rows.push(ReportRow {
            model: head.model.clone(),
            mode: head.mode,
            window_n: head.window_n,
            metrics,
            size_percent: runs.iter().map(|r| r.size_percent).sum::<f64>() / runs.len() as f64,
            speedup: (!speeds.is_empty()).then(|| speeds.iter().sum::<f64>() / speeds.len() as f64),
            seeds,
        });
    }
    Ok(ReportTable {
        tasks,
        columns,
        rows,
        reference_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::tagging_metrics;

    fn run(mode: Option<FinetuneMode>, window: Option<usize>, adapter: usize) -> RunReport {
        let params = ParamBreakdown {
            model: 500,
            adapter,
            head: 10,
            reference: 1000,
        };
        RunReport {
            model: if mode.is_some() { "student-a".into() } else { "teacher".into() },
            mode,
            window_n: window,
            task: "pos".into(),
            seed: 1,
            metrics: tagging_metrics(&[vec![0, 1]], &[vec![0, 0]], 2, None).unwrap(),
            size_percent: params.size_percent().unwrap(),
            params,
            latency_seconds: None,
            speedup: Some(2.0),
            config: serde_json::Value::Null,
        }
    }

    #[test]
    fn single_run_gets_reference_row() {
        let t = build_report(&[run(Some(FinetuneMode::FrozenAdapter), Some(1), 20)]).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert_eq!(t.rows[0].size_percent, 100.0);
        assert!(t.render().contains("POS Acc"));
    }

    #[test]
    fn windows_ordered_and_reference_first() {
        let runs = vec![
            run(Some(FinetuneMode::FrozenAdapter), Some(5), 40),
            run(Some(FinetuneMode::FrozenAdapter), Some(1), 20),
            run(None, None, 0),
            run(Some(FinetuneMode::FrozenAdapter), Some(3), 30),
        ];
        let t = build_report(&runs).unwrap();
        let windows: Vec<Option<usize>> = t.rows.iter().map(|r| r.window_n).collect();
        assert_eq!(windows, vec![None, Some(1), Some(3), Some(5)]);
    }

    #[test]
    fn inconsistent_reference_rejected() {
        let mut b = run(Some(FinetuneMode::FrozenAdapter), Some(3), 30);
        b.params.reference = 999;
        let err = build_report(&[run(Some(FinetuneMode::FrozenAdapter), Some(1), 20), b]);
        assert!(matches!(err, Err(crate::Error::Report(_))));
        assert!(build_report(&[]).is_err());
    }
}
