//! Sequence-level exact match, token edit distance, and per-split reports.

mod table;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionKind;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::taskgen::{DatasetSplit, Sample, TaskKind, Vocabulary};

pub use table::{lower_median, Metric, ResultCell, ResultRow, ResultTable};

/// 1 when the sequences are identical, else 0.
pub fn exact_match<S: PartialEq>(prediction: &[S], target: &[S]) -> u32 {
    u32::from(prediction == target)
}

/// Token-level Levenshtein distance with unit costs.
pub fn edit_distance<S: PartialEq>(a: &[S], b: &[S]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub source: String,
    pub target: String,
    pub prediction: String,
    pub exact_match: bool,
    pub edit_distance: usize,
}

impl SampleRecord {
    pub fn new(sample: &Sample, prediction: &[String]) -> Self {
        SampleRecord {
            source: sample.source.join(" "),
            target: sample.target.join(" "),
            prediction: prediction.join(" "),
            exact_match: exact_match(prediction, &sample.target) == 1,
            edit_distance: edit_distance(prediction, &sample.target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub split: String,
    #[serde(default)]
    pub kind: Option<AttentionKind>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Percentage of exact matches.
    pub accuracy: f64,
    pub mean_edit_distance: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<Vec<SampleRecord>>,
}

impl EvalReport {
    /// Aggregates per-sample records; fails on an empty split.
    pub fn from_records(task: TaskKind, split: &str, records: Vec<SampleRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::contract(format!("split {split} is empty")));
        }
        let n = records.len();
        let matches = records.iter().filter(|r| r.exact_match).count();
        let dist: usize = records.iter().map(|r| r.edit_distance).sum();
        Ok(EvalReport {
            task,
            split: split.to_string(),
            kind: None,
            seed: None,
            accuracy: 100.0 * matches as f64 / n as f64,
            mean_edit_distance: dist as f64 / n as f64,
            n,
            samples: Some(records),
        })
    }

    pub fn with_run(mut self, kind: AttentionKind, seed: u64) -> Self {
        self.kind = Some(kind);
        self.seed = Some(seed);
        self
    }

    pub fn without_samples(&self) -> Self {
        EvalReport {
            samples: None,
            ..self.clone()
        }
    }
}

/// Scores `predict` over a split, `batch_size` samples per call.
pub fn evaluate_split<F>(split: &DatasetSplit, batch_size: usize, mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&[Sample]) -> Result<Vec<Vec<String>>>,
{
    if batch_size == 0 {
        return Err(Error::contract("batch size must be positive"));
    }
    let mut records = Vec::with_capacity(split.len());
    for chunk in split.samples.chunks(batch_size) {
        let predictions = predict(chunk)?;
        if predictions.len() != chunk.len() {
            return Err(Error::contract("predictor returned the wrong number of outputs"));
        }
        records.extend(chunk.iter().zip(&predictions).map(|(s, p)| SampleRecord::new(s, p)));
    }
    EvalReport::from_records(split.provenance.task, &split.name, records)
}

/// Greedy decoding of token samples through a model.
pub fn model_predictor<'a>(
    model: &'a Model<f32>,
    vocab: &'a Vocabulary,
) -> impl FnMut(&[Sample]) -> Result<Vec<Vec<String>>> + 'a {
    move |samples| {
        let sources = samples
            .iter()
            .map(|s| vocab.encode(&s.source))
            .collect::<Result<Vec<_>>>()?;
        let out = model.greedy_decode(&sources)?;
        Ok(out.iter().map(|ids| vocab.decode(ids)).collect())
    }
}

/// `source\ttarget\tprediction` lines.
pub fn write_predictions_tsv<W: Write>(mut w: W, records: &[SampleRecord]) -> Result<()> {
    for r in records {
        writeln!(w, "{}\t{}\t{}", r.source, r.target, r.prediction)?;
    }
    Ok(())
}
