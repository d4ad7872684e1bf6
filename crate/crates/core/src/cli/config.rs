//! Flat `key = value` experiment configs.

use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::AttentionKind;
use crate::model::ModelConfig;
use crate::taskgen::TaskKind;
use crate::trainer::TrainConfig;

/// Everything needed to rerun one training job.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub attention: AttentionKind,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_root: PathBuf,
    pub d_e: usize,
    pub d: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub train: TrainConfig,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    pub dev_limit: Option<usize>,
}

impl ExperimentConfig {
    pub fn new(task: TaskKind, attention: AttentionKind) -> Self {
        let m = ModelConfig::new(0, attention);
        ExperimentConfig {
            task,
            attention,
            seed: 0,
            data_dir: PathBuf::from("data").join(task.name()),
            run_root: PathBuf::from("runs"),
            d_e: m.d_e,
            d: m.d,
            encoder_layers: m.encoder_layers,
            decoder_layers: m.decoder_layers,
            dropout: m.dropout,
            train: TrainConfig::default(),
            train_limit: None,
            dev_limit: None,
        }
    }

    /// `runs/<task>/<attn>/<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        run_dir(&self.run_root, self.task, self.attention, self.seed)
    }

    pub fn model_config(&self, vocab_size: usize, decode_factor: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_e: self.d_e,
            d: self.d,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            dropout: self.dropout,
            max_decode_factor: decode_factor,
            ..ModelConfig::new(vocab_size, self.attention)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
            value.parse().map_err(|_| format!("bad value {value:?} for {key}"))
        }
        fn limit(key: &str, value: &str) -> Result<Option<usize>, String> {
            if value == "none" {
                Ok(None)
            } else {
                num(key, value).map(Some)
            }
        }
        let t = &mut self.train;
        match key {
            "task" => self.task = value.parse().map_err(|e| format!("{e}"))?,
            "attn" => self.attention = value.parse().map_err(|e| format!("{e}"))?,
            "seed" => self.seed = num(key, value)?,
            "data_dir" => self.data_dir = PathBuf::from(value),
            "run_root" => self.run_root = PathBuf::from(value),
            "d_e" => self.d_e = num(key, value)?,
            "d" => self.d = num(key, value)?,
            "encoder_layers" => self.encoder_layers = num(key, value)?,
            "decoder_layers" => self.decoder_layers = num(key, value)?,
            "dropout" => self.dropout = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "lr" => t.lr = num(key, value)?,
            "beta1" => t.beta1 = num(key, value)?,
            "beta2" => t.beta2 = num(key, value)?,
            "adam_eps" => t.adam_eps = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "early_stop_patience" => t.early_stop_patience = num(key, value)?,
            "plateau_epochs" => t.plateau_epochs = num(key, value)?,
            "lr_decay" => t.lr_decay = num(key, value)?,
            "clip_norm" => t.clip_norm = num(key, value)?,
            "eval_batch_size" => t.eval_batch_size = num(key, value)?,
            "train_limit" => self.train_limit = limit(key, value)?,
            "dev_limit" => self.dev_limit = limit(key, value)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Builds a config from ordered pairs; later pairs win and `task` and `attn` are required.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, String> {
        let last = |k: &str| pairs.iter().rev().find(|p| p.0 == k).map(|p| p.1.as_str());
        let task = last("task").ok_or("missing task")?.parse().map_err(|e| format!("{e}"))?;
        let attn = last("attn").ok_or("missing attn")?.parse().map_err(|e| format!("{e}"))?;
        let mut c = ExperimentConfig::new(task, attn);
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Every key, one per line, in a form `parse` reads back unchanged.
    pub fn echo(&self) -> String {
        let t = &self.train;
        let limit = |l: Option<usize>| l.map_or_else(|| "none".to_string(), |n| n.to_string());
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("task", self.task.to_string());
        kv("attn", self.attention.to_string());
        kv("seed", self.seed.to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("run_root", self.run_root.display().to_string());
        kv("d_e", self.d_e.to_string());
        kv("d", self.d.to_string());
        kv("encoder_layers", self.encoder_layers.to_string());
        kv("decoder_layers", self.decoder_layers.to_string());
        kv("dropout", self.dropout.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr", t.lr.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("max_epochs", t.max_epochs.to_string());
        kv("early_stop_patience", t.early_stop_patience.to_string());
        kv("plateau_epochs", t.plateau_epochs.to_string());
        kv("lr_decay", t.lr_decay.to_string());
        kv("clip_norm", t.clip_norm.to_string());
        kv("eval_batch_size", t.eval_batch_size.to_string());
        kv("train_limit", limit(self.train_limit));
        kv("dev_limit", limit(self.dev_limit));
        out
    }
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", i + 1))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

pub fn run_dir(root: &Path, task: TaskKind, kind: AttentionKind, seed: u64) -> PathBuf {
    root.join(task.name()).join(kind.to_string()).join(seed.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trip() {
        let mut c = ExperimentConfig::new(TaskKind::InvRecopy, "onestep+mix+pr".parse().unwrap());
        c.seed = 7;
        c.train.lr = 3e-4;
        c.train_limit = Some(100);
        c.dropout = 0.1;
        let text = c.echo();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
        assert!(text.contains("attn = onestep+mix+pr\n"));
    }

    #[test]
    fn comments_and_errors() {
        let c = ExperimentConfig::parse("# run\ntask = lookup  # inline\n\nattn=bi-relative\nlr = 0.01\n").unwrap();
        assert_eq!(c.task, TaskKind::Lookup);
        assert_eq!(c.attention.to_string(), "bi-relative");
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.data_dir, PathBuf::from("data/lookup"));
        let base = "task = copy\nattn = content\n";
        assert!(ExperimentConfig::parse(&format!("{base}lr = fast")).unwrap_err().contains("lr"));
        assert!(ExperimentConfig::parse(&format!("{base}nope = 1")).is_err());
        assert!(ExperimentConfig::parse("seed").unwrap_err().contains("line 1"));
        assert!(ExperimentConfig::parse("task = copy").unwrap_err().contains("attn"));
        assert_eq!(parse_assignment("lr=0.5").unwrap(), ("lr".into(), "0.5".into()));
    }

    #[test]
    fn layout() {
        let mut c = ExperimentConfig::new(TaskKind::Copy, "relative".parse().unwrap());
        c.seed = 3;
        assert_eq!(c.run_dir(), PathBuf::from("runs/copy/relative/3"));
        assert_eq!(c.model_config(13, 5).max_decode_factor, 5);
        assert_eq!(c.train_config().seed, 3);
    }
}
