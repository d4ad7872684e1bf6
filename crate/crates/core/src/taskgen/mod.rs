//! Synthetic probing tasks: the copy family (copy, reverse copy, the four
//! ReCopy variants and DeDupe), PosRetrieve, and forward/reverse lookup.
//!
//! Generation is a pure function of `(task, seed)`. Every sample draws from
//! its own stream addressed by split name and index.

mod io;
mod lookup;
mod vocab;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::RngStream;
use crate::error::{Error, Result};

pub use io::{read_dataset, write_dataset};
pub use lookup::{apply_lookup_chain, bits, parse_bits, LookupTable, LookupTableSet, TABLE_COUNT};
pub use vocab::{Vocabulary, EOS, GO, PAD, RESERVED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    ReverseCopy,
    Lookup,
    ReverseLookup,
    Recopy,
    ReverseRecopy,
    InvRecopy,
    InvReverseRecopy,
    Dedupe,
    Posretrieve,
}

impl TaskKind {
    pub const ALL: [TaskKind; 10] = [
        TaskKind::Copy,
        TaskKind::ReverseCopy,
        TaskKind::Lookup,
        TaskKind::ReverseLookup,
        TaskKind::Recopy,
        TaskKind::ReverseRecopy,
        TaskKind::InvRecopy,
        TaskKind::InvReverseRecopy,
        TaskKind::Dedupe,
        TaskKind::Posretrieve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::ReverseCopy => "reverse-copy",
            TaskKind::Lookup => "lookup",
            TaskKind::ReverseLookup => "reverse-lookup",
            TaskKind::Recopy => "recopy",
            TaskKind::ReverseRecopy => "reverse-recopy",
            TaskKind::InvRecopy => "inv-recopy",
            TaskKind::InvReverseRecopy => "inv-reverse-recopy",
            TaskKind::Dedupe => "dedupe",
            TaskKind::Posretrieve => "posretrieve",
        }
    }

    pub fn is_lookup(self) -> bool {
        matches!(self, TaskKind::Lookup | TaskKind::ReverseLookup)
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Task(format!("unknown task {s:?}")))
    }
}

/// A source/target pair. The target excludes eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub source: Vec<String>,
    pub target: Vec<String>,
}

impl Sample {
    pub fn new(source: Vec<String>, target: Vec<String>) -> Self {
        Sample { source, target }
    }

    /// Builds a sample from two space-separated token strings.
    pub fn parse(source: &str, target: &str) -> Self {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect();
        Sample {
            source: split(source),
            target: split(target),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub task: TaskKind,
    pub seed: u64,
    /// Inclusive bounds on the generating length: base digits for the copy
    /// family, table tokens for lookup.
    pub min_len: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub name: String,
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The first `n` samples, keeping provenance.
    pub fn truncated(&self, n: usize) -> DatasetSplit {
        DatasetSplit {
            name: self.name.clone(),
            samples: self.samples.iter().take(n).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub tables: Option<LookupTableSet>,
    pub splits: Vec<DatasetSplit>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn split_names(&self) -> Vec<&str> {
        self.splits.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn test_split_names(&self) -> Vec<&str> {
        self.splits
            .iter()
            .map(|s| s.name.as_str())
            .filter(|n| n.starts_with("test-"))
            .collect()
    }

    /// Largest target/source length ratio over every sample.
    pub fn max_target_ratio(&self) -> f64 {
        self.splits
            .iter()
            .flat_map(|s| &s.samples)
            .map(|s| s.target.len() as f64 / s.source.len().max(1) as f64)
            .fold(0.0, f64::max)
    }
}

fn digit(d: usize) -> String {
    char::from(b'0' + d as u8).to_string()
}

fn digit_value(tok: &str) -> Result<usize> {
    match tok.as_bytes() {
        [b @ b'0'..=b'9'] => Ok((b - b'0') as usize),
        _ => Err(Error::Task(format!("{tok:?} is not a digit"))),
    }
}

/// Repetition count of a digit under the ReCopy rule.
pub fn recopy_reps(d: usize) -> usize {
    match d {
        0..=3 => 1,
        4..=6 => 3,
        _ => 5,
    }
}

pub fn recopy_expand<S: AsRef<str>>(tokens: &[S]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for t in tokens {
        let d = digit_value(t.as_ref())?;
        out.extend(std::iter::repeat_n(digit(d), recopy_reps(d)));
    }
    Ok(out)
}

/// Collapses contiguous runs of equal tokens.
pub fn collapse_runs<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for t in tokens {
        if out.last().map(String::as_str) != Some(t.as_ref()) {
            out.push(t.as_ref().to_string());
        }
    }
    out
}

/// PosRetrieve target: for each source digit `i`, `i : x[i] ;` or `i : n/a ;`.
pub fn posretrieve_target<S: AsRef<str>>(source: &[S]) -> Result<Vec<String>> {
    let mut out = Vec::with_capacity(source.len() * 4);
    for t in source {
        let i = digit_value(t.as_ref())?;
        out.push(digit(i));
        out.push(":".into());
        out.push(match source.get(i) {
            Some(v) => v.as_ref().to_string(),
            None => "n/a".into(),
        });
        out.push(";".into());
    }
    Ok(out)
}

pub fn vocabulary_for(task: TaskKind) -> Vocabulary {
    let digits: Vec<String> = (0..10).map(digit).collect();
    let tokens = match task {
        TaskKind::Lookup | TaskKind::ReverseLookup => (0..8u8)
            .map(bits)
            .chain((1..=TABLE_COUNT).map(|i| format!("t{i}")))
            .chain(std::iter::once(".".to_string()))
            .collect(),
        TaskKind::Posretrieve => {
            let mut t = digits;
            t.extend([":", ";", "n/a"].map(String::from));
            t
        }
        _ => digits,
    };
    Vocabulary::new(tokens).expect("task tokens are distinct")
}

/// (split name, segments of (count, min length, max length)).
type SplitPlan = (&'static str, &'static [(usize, usize, usize)]);

const COPY_PLAN: [SplitPlan; 5] = [
    ("train", &[(10_000, 5, 10)]),
    ("dev", &[(2_000, 10, 15)]),
    ("test-15", &[(2_000, 15, 15)]),
    ("test-30", &[(2_000, 30, 30)]),
    ("test-100", &[(2_000, 100, 100)]),
];

const LOOKUP_PLAN: [SplitPlan; 5] = [
    ("train", &[(9_000, 2, 6)]),
    ("dev", &[(500, 2, 6), (500, 7, 7)]),
    ("test-7", &[(4_500, 7, 7)]),
    ("test-9", &[(5_000, 9, 9)]),
    ("test-11", &[(5_000, 11, 11)]),
];

fn copy_family_sample(task: TaskKind, base: Vec<String>, rng: &mut RngStream) -> Result<Sample> {
    let rev = || base.iter().rev().cloned().collect::<Vec<_>>();
    let (source, target) = match task {
        TaskKind::Copy => (base.clone(), base),
        TaskKind::ReverseCopy => {
            let r = rev();
            (base, r)
        }
        TaskKind::Recopy => {
            let t = recopy_expand(&base)?;
            (base, t)
        }
        TaskKind::ReverseRecopy => {
            let t = recopy_expand(&rev())?;
            (base, t)
        }
        TaskKind::InvRecopy => (recopy_expand(&base)?, base),
        TaskKind::InvReverseRecopy => (recopy_expand(&rev())?, base),
        TaskKind::Dedupe => {
            let mut source = Vec::new();
            for d in &base {
                let reps = rng.range(1, 5);
                source.extend(std::iter::repeat_n(d.clone(), reps));
            }
            let target = collapse_runs(&base);
            (source, target)
        }
        TaskKind::Posretrieve => {
            let t = posretrieve_target(&base)?;
            (base, t)
        }
        TaskKind::Lookup | TaskKind::ReverseLookup => unreachable!("lookup tasks use their own generator"),
    };
    Ok(Sample { source, target })
}

fn lookup_sample(task: TaskKind, tables: &LookupTableSet, len: usize, rng: &mut RngStream) -> Result<Sample> {
    let start = bits(rng.range(0, 7) as u8);
    let names: Vec<String> = (0..len)
        .map(|_| tables.names()[rng.range(0, tables.len() - 1)].clone())
        .collect();
    let mut source = Vec::with_capacity(len + 2);
    let target = if task == TaskKind::Lookup {
        source.push(start.clone());
        source.extend(names.iter().cloned());
        apply_lookup_chain(tables, &start, &names)?
    } else {
        source.extend(names.iter().cloned());
        source.push(start.clone());
        let reversed: Vec<&String> = names.iter().rev().collect();
        apply_lookup_chain(tables, &start, &reversed)?
    };
    source.push(".".into());
    Ok(Sample { source, target })
}

/// Generates every split of `task` from `seed`.
pub fn generate(task: TaskKind, seed: u64) -> Result<Dataset> {
    let root = RngStream::new(seed).split("data").split(task.name());
    let tables = task
        .is_lookup()
        .then(|| LookupTableSet::random(TABLE_COUNT, &mut root.split("tables")));
    let plan: &[SplitPlan] = if task.is_lookup() { &LOOKUP_PLAN } else { &COPY_PLAN };

    let mut splits = Vec::with_capacity(plan.len());
    for &(name, segments) in plan {
        let split_rng = root.split(name);
        let mut samples = Vec::new();
        for &(count, lo, hi) in segments {
            for _ in 0..count {
                let mut rng = split_rng.split_index(samples.len() as u64);
                let len = rng.range(lo, hi);
                let sample = match &tables {
                    Some(t) => lookup_sample(task, t, len, &mut rng)?,
                    None => {
                        let base = (0..len).map(|_| digit(rng.range(0, 9))).collect();
                        copy_family_sample(task, base, &mut rng)?
                    }
                };
                samples.push(sample);
            }
        }
        splits.push(DatasetSplit {
            name: name.to_string(),
            samples,
            provenance: Provenance {
                task,
                seed,
                min_len: segments.iter().map(|s| s.1).min().unwrap_or(0),
                max_len: segments.iter().map(|s| s.2).max().unwrap_or(0),
            },
        });
    }
    Ok(Dataset {
        task,
        seed,
        vocab: vocabulary_for(task),
        tables,
        splits,
    })
}
