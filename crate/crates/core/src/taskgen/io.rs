//! Dataset directories: one `<split>.tsv` per split plus `meta.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetSplit, LookupTableSet, Provenance, Sample, TaskKind, Vocabulary};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SplitMeta {
    name: String,
    n_samples: usize,
    provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    task: TaskKind,
    seed: u64,
    vocab: Vocabulary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tables: Option<LookupTableSet>,
    max_target_ratio: f64,
    splits: Vec<SplitMeta>,
}

pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for split in &dataset.splits {
        let file = fs::File::create(dir.join(format!("{}.tsv", split.name)))?;
        let mut w = BufWriter::new(file);
        for s in &split.samples {
            writeln!(w, "{}\t{}", s.source.join(" "), s.target.join(" "))?;
        }
        w.flush()?;
    }
    let meta = Meta {
        format_version: FORMAT_VERSION,
        task: dataset.task,
        seed: dataset.seed,
        vocab: dataset.vocab.clone(),
        tables: dataset.tables.clone(),
        max_target_ratio: dataset.max_target_ratio(),
        splits: dataset
            .splits
            .iter()
            .map(|s| SplitMeta {
                name: s.name.clone(),
                n_samples: s.len(),
                provenance: s.provenance.clone(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

/// Parses one TSV body; `path` only labels errors.
pub(crate) fn parse_split(text: &str, path: &str, vocab: &Vocabulary) -> Result<Vec<Sample>> {
    let err = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split('\t').collect();
        if fields.len() != 2 {
            return Err(err(line, format!("expected 2 tab-separated fields, found {}", fields.len())));
        }
        let sample = Sample::parse(fields[0], fields[1]);
        if sample.source.is_empty() || sample.target.is_empty() {
            return Err(err(line, "empty source or target".into()));
        }
        for tok in sample.source.iter().chain(&sample.target) {
            match vocab.index(tok) {
                Ok(ix) if !Vocabulary::is_reserved(ix) => {}
                _ => return Err(err(line, format!("token {tok:?} not in vocabulary"))),
            }
        }
        samples.push(sample);
    }
    Ok(samples)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            path: meta_path.display().to_string(),
            line: 1,
            msg: format!("unsupported format version {}", meta.format_version),
        });
    }
    let mut splits = Vec::with_capacity(meta.splits.len());
    for sm in meta.splits {
        let path = dir.join(format!("{}.tsv", sm.name));
        let label = path.display().to_string();
        let samples = parse_split(&fs::read_to_string(&path)?, &label, &meta.vocab)?;
        if samples.len() != sm.n_samples {
            return Err(Error::Parse {
                path: label,
                line: samples.len(),
                msg: format!("expected {} samples, found {}", sm.n_samples, samples.len()),
            });
        }
        splits.push(DatasetSplit {
            name: sm.name,
            samples,
            provenance: sm.provenance,
        });
    }
    Ok(Dataset {
        task: meta.task,
        seed: meta.seed,
        vocab: meta.vocab,
        tables: meta.tables,
        splits,
    })
}
