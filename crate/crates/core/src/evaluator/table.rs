use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::EvalReport;
use crate::attention::AttentionKind;
use crate::taskgen::TaskKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Accuracy,
    EditDistance,
}

impl Metric {
    pub fn of(self, report: &EvalReport) -> f64 {
        match self {
            Metric::Accuracy => report.accuracy,
            Metric::EditDistance => report.mean_edit_distance,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::EditDistance => "mean edit distance",
        }
    }
}

/// Median that takes the lower middle element for even counts.
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultCell {
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub median: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub kind: AttentionKind,
    pub cells: Vec<ResultCell>,
}

/// One row per attention kind, one column per split, medians over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub task: TaskKind,
    pub metric: Metric,
    pub columns: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    /// Groups reports by kind and split; reports without a kind are skipped.
    pub fn from_reports(task: TaskKind, metric: Metric, columns: &[String], reports: &[EvalReport]) -> Self {
        let mut by_kind: BTreeMap<AttentionKind, BTreeMap<&str, Vec<(u64, f64)>>> = BTreeMap::new();
        for r in reports.iter().filter(|r| r.task == task) {
            if let Some(kind) = r.kind {
                by_kind
                    .entry(kind)
                    .or_default()
                    .entry(r.split.as_str())
                    .or_default()
                    .push((r.seed.unwrap_or(0), metric.of(r)));
            }
        }
        let rows = by_kind
            .into_iter()
            .map(|(kind, mut cols)| ResultRow {
                kind,
                cells: columns
                    .iter()
                    .map(|c| {
                        let mut runs = cols.remove(c.as_str()).unwrap_or_default();
                        runs.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
                        let values: Vec<f64> = runs.iter().map(|r| r.1).collect();
                        ResultCell {
                            seeds: runs.iter().map(|r| r.0).collect(),
                            median: lower_median(&values),
                            values,
                        }
                    })
                    .collect(),
            })
            .collect();
        ResultTable {
            task,
            metric,
            columns: columns.to_vec(),
            rows,
        }
    }

    pub fn cell(&self, kind: AttentionKind, column: &str) -> Option<&ResultCell> {
        let col = self.columns.iter().position(|c| c == column)?;
        self.rows.iter().find(|r| r.kind == kind).map(|r| &r.cells[col])
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{} ({}, median over seeds; lower median for even counts)", self.task, self.metric.label());
        let _ = writeln!(out);
        let _ = writeln!(out, "| Model | {} |", self.columns.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(self.columns.len()));
        for row in &self.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| match c.median {
                    Some(m) => format!("{m:.1} (n={})", c.values.len()),
                    None => "n/a".to_string(),
                })
                .collect();
            let _ = writeln!(out, "| {} | {} |", row.kind, cells.join(" | "));
        }
        out
    }

    /// `task,metric,kind,split,median,n_seeds,values` with `;`-joined values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,kind,split,median,n_seeds,values\n");
        for row in &self.rows {
            for (col, c) in self.columns.iter().zip(&row.cells) {
                let median = c.median.map_or_else(String::new, |m| m.to_string());
                let values: Vec<String> = c.values.iter().map(f64::to_string).collect();
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.task,
                    self.metric.label(),
                    row.kind,
                    col,
                    median,
                    c.values.len(),
                    values.join(";")
                );
            }
        }
        out
    }
}
