//! The `locattn` command line: gen, train, eval, table and sweep.

mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::attention::{write_attention_csv, AttentionBase, AttentionKind};
use crate::error::Error;
use crate::evaluator::{evaluate_split, model_predictor, write_predictions_tsv, EvalReport, Metric, ResultTable};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::taskgen::{generate, read_dataset, write_dataset, Dataset, TaskKind};
use crate::trainer::{encode_split, fit, init_model};

pub use config::{parse_assignment, parse_pairs, run_dir, ExperimentConfig};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Failure(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Failure(_) => 1,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            Error::Contract(_) | Error::Task(_) | Error::Vocabulary(_) => CliError::Usage(e.to_string()),
            _ => CliError::Failure(e.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Failure(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Failure(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "locattn", version, about = "Position-based attention experiments on synthetic seq2seq tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset directory.
    Gen(GenArgs),
    /// Train one model and write its run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on dataset splits.
    Eval(EvalArgs),
    /// Build median results tables from evaluated runs.
    Table(TableArgs),
    /// Generate, train and evaluate over a grid of kinds and seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    pub task: TaskKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: data/<task>].
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<TaskKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset directory [default: data/<task>].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Root of the run directories [default: runs].
    #[arg(long)]
    pub runs: Option<PathBuf>,
    /// Any config key, as KEY=VALUE.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_assignment)]
    pub set: Vec<(String, String)>,
    /// Replace an existing run.
    #[arg(long)]
    pub overwrite: bool,
}

impl ExperimentArgs {
    fn pairs(&self, attn: Option<AttentionKind>) -> CliResult<Vec<(String, String)>> {
        let mut pairs = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                parse_pairs(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
            }
            None => Vec::new(),
        };
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("task", self.task.map(|t| t.to_string()));
        push("attn", attn.map(|a| a.to_string()));
        push("seed", self.seed.map(|s| s.to_string()));
        push("data_dir", self.data.as_ref().map(|p| p.display().to_string()));
        push("run_root", self.runs.as_ref().map(|p| p.display().to_string()));
        pairs.extend(self.set.iter().cloned());
        Ok(pairs)
    }

    pub fn resolve(&self, attn: Option<AttentionKind>) -> CliResult<ExperimentConfig> {
        ExperimentConfig::from_pairs(&self.pairs(attn)?).map_err(usage)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Attention kind, `<base>[+mix][+pr]`.
    #[arg(long)]
    pub attn: Option<AttentionKind>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory holding checkpoint.bin and config.echo.
    #[arg(long)]
    pub run: PathBuf,
    /// Splits to evaluate [default: every test split].
    #[arg(long = "split")]
    pub splits: Vec<String>,
    /// Dataset directory [default: the one the run was trained on].
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Also write predictions_<split>.tsv.
    #[arg(long)]
    pub predictions: bool,
    /// Write per-timestep attention CSVs into this directory.
    #[arg(long)]
    pub dump_attn: Option<PathBuf>,
    /// Samples per split to dump.
    #[arg(long, default_value_t = 10)]
    pub dump_limit: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TableFormat {
    Markdown,
    Csv,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Expected kinds [default: those found].
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<AttentionKind>,
    /// Expected seeds [default: those found].
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Columns [default: every test split found].
    #[arg(long, value_delimiter = ',')]
    pub splits: Vec<String>,
    /// Tabulate whatever exists instead of failing on missing runs.
    #[arg(long)]
    pub partial: bool,
    #[arg(long, value_enum, default_value_t = TableFormat::Markdown)]
    pub format: TableFormat,
    /// Write here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Kinds to train [default: every base kind].
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<AttentionKind>,
    #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
    pub seeds: Vec<u64>,
    /// Seed for generating the dataset when it is missing.
    #[arg(long, default_value_t = 0)]
    pub data_seed: u64,
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(a.task, a.seed, &a.out.unwrap_or_else(|| default_data_dir(a.task)), a.overwrite, out),
        Command::Train(a) => {
            let cfg = a.exp.resolve(a.attn)?;
            cmd_train(&cfg, a.exp.overwrite, out).map(|_| ())
        }
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Table(a) => cmd_table(&a, out),
        Command::Sweep(a) => cmd_sweep(&a, out),
    }
}

fn default_data_dir(task: TaskKind) -> PathBuf {
    PathBuf::from("data").join(task.name())
}

pub fn cmd_gen(task: TaskKind, seed: u64, dir: &Path, overwrite: bool, out: &mut dyn Write) -> CliResult<()> {
    if dir.join("meta.json").exists() && !overwrite {
        return Err(usage(format!("{} already holds a dataset; pass --overwrite", dir.display())));
    }
    let dataset = generate(task, seed)?;
    write_dataset(&dataset, dir)?;
    writeln!(out, "{task} seed {seed} -> {}", dir.display())?;
    for s in &dataset.splits {
        writeln!(out, "  {:<8} {}", s.name, s.len())?;
    }
    Ok(())
}

fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    if !dir.join("meta.json").exists() {
        return Err(usage(format!("no dataset at {}; run `locattn gen` first", dir.display())));
    }
    Ok(read_dataset(dir)?)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Output lengths may reach this multiple of the source length.
pub fn decode_factor(dataset: &Dataset) -> usize {
    (dataset.max_target_ratio().ceil() as usize).max(2)
}

/// Trains one configuration and returns its run directory.
pub fn cmd_train(cfg: &ExperimentConfig, overwrite: bool, out: &mut dyn Write) -> CliResult<PathBuf> {
    let dir = cfg.run_dir();
    if dir.join("train_report.json").exists() && !overwrite {
        return Err(usage(format!("{} already holds a finished run; pass --overwrite", dir.display())));
    }
    let dataset = load_dataset(&cfg.data_dir)?;
    if dataset.task != cfg.task {
        return Err(usage(format!(
            "{} holds {} data, not {}",
            cfg.data_dir.display(),
            dataset.task,
            cfg.task
        )));
    }
    let split = |name: &str, limit: Option<usize>| -> CliResult<_> {
        let s = dataset
            .split(name)
            .ok_or_else(|| usage(format!("dataset has no {name} split")))?;
        let s = limit.map_or_else(|| s.clone(), |n| s.truncated(n));
        Ok(encode_split(&dataset.vocab, &s)?)
    };
    let train = split("train", cfg.train_limit)?;
    let dev = split("dev", cfg.dev_limit)?;
    let model_config = cfg.model_config(dataset.vocab.len(), decode_factor(&dataset));
    let model = init_model(model_config, cfg.seed)?;

    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.echo"), cfg.echo())?;
    let label = format!("{}/{}/{}", cfg.task, cfg.attention, cfg.seed);
    let fitted = fit(model, &train, &dev, &cfg.train_config(), &mut |r| {
        eprintln!(
            "[{label}] epoch {:>3}  loss {:.4}  dev {:6.2}%  lr {:.2e}",
            r.epoch, r.train_loss, r.dev_accuracy, r.lr
        );
    })?;
    save_checkpoint(&fitted.best, &dir.join("checkpoint.bin"))?;
    write_json(&dir.join("train_report.json"), &fitted.report)?;
    write_json(&dir.join("timing.json"), &fitted.timing)?;
    writeln!(
        out,
        "{label}: best dev {:.2}% at epoch {} ({} epochs) -> {}",
        fitted.report.best_dev_acc,
        fitted.report.best_epoch,
        fitted.report.epochs.len(),
        dir.display()
    )?;
    Ok(dir)
}

fn read_run_config(run: &Path) -> CliResult<ExperimentConfig> {
    let path = run.join("config.echo");
    let text = fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    ExperimentConfig::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let cfg = read_run_config(&args.run)?;
    let model = load_checkpoint(&args.run.join("checkpoint.bin"))?;
    if model.config.attention != cfg.attention {
        return Err(CliError::Failure(anyhow::anyhow!(
            "checkpoint holds a {} model but the run config says {}",
            model.config.attention,
            cfg.attention
        )));
    }
    let dataset = load_dataset(args.data.as_deref().unwrap_or(&cfg.data_dir))?;
    if model.config.vocab_size != dataset.vocab.len() {
        return Err(CliError::Failure(anyhow::anyhow!(
            "checkpoint vocabulary has {} entries, dataset has {}",
            model.config.vocab_size,
            dataset.vocab.len()
        )));
    }
    let names: Vec<String> = if args.splits.is_empty() {
        dataset.test_split_names().into_iter().map(str::to_string).collect()
    } else {
        args.splits.clone()
    };
    for name in &names {
        let split = dataset
            .split(name)
            .ok_or_else(|| usage(format!("dataset has no {name} split")))?;
        let predict = model_predictor(&model, &dataset.vocab);
        let report = evaluate_split(split, cfg.train.eval_batch_size, predict)?.with_run(cfg.attention, cfg.seed);
        if args.predictions {
            let file = fs::File::create(args.run.join(format!("predictions_{name}.tsv")))?;
            let mut w = BufWriter::new(file);
            write_predictions_tsv(&mut w, report.samples.as_deref().unwrap_or_default())?;
            w.flush()?;
        }
        write_json(&args.run.join(format!("eval_{name}.json")), &report.without_samples())?;
        writeln!(
            out,
            "{} {name}: accuracy {:.2}%  mean edit distance {:.3}  (n={})",
            cfg.attention, report.accuracy, report.mean_edit_distance, report.n
        )?;
        if let Some(dir) = &args.dump_attn {
            dump_attention(&model, &dataset, name, args.dump_limit, dir)?;
        }
    }
    Ok(())
}

fn dump_attention(model: &Model<f32>, dataset: &Dataset, split: &str, limit: usize, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let Some(s) = dataset.split(split) else {
        return Ok(());
    };
    for (i, sample) in s.samples.iter().take(limit).enumerate() {
        let source = dataset.vocab.encode(&sample.source)?;
        let decoded = model.decode(&[source], true)?;
        let file = fs::File::create(dir.join(format!("{split}_{i}.csv")))?;
        let mut w = BufWriter::new(file);
        write_attention_csv(&mut w, &decoded.traces[0])?;
        w.flush()?;
    }
    Ok(())
}

/// Every `eval_*.json` under `runs/<task>/<kind>/<seed>/`.
pub fn scan_reports(root: &Path, task: TaskKind) -> CliResult<Vec<EvalReport>> {
    let base = root.join(task.name());
    let mut reports = Vec::new();
    if !base.is_dir() {
        return Ok(reports);
    }
    let mut files = Vec::new();
    for kind_dir in fs::read_dir(&base)? {
        let kind_dir = kind_dir?.path();
        if !kind_dir.is_dir() {
            continue;
        }
        for seed_dir in fs::read_dir(&kind_dir)? {
            let seed_dir = seed_dir?.path();
            if !seed_dir.is_dir() {
                continue;
            }
            for f in fs::read_dir(&seed_dir)? {
                let f = f?.path();
                let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
                if name.starts_with("eval_") && name.ends_with(".json") {
                    files.push(f);
                }
            }
        }
    }
    files.sort();
    for f in files {
        let report: EvalReport = serde_json::from_str(&fs::read_to_string(&f)?)
            .map_err(|e| CliError::Failure(anyhow::anyhow!("{}: {e}", f.display())))?;
        if report.task == task && report.kind.is_some() {
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Orders split names by their length suffix.
fn split_order(name: &str) -> (usize, String) {
    let n = name.rsplit('-').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
    (n, name.to_string())
}

pub fn cmd_table(args: &TableArgs, out: &mut dyn Write) -> CliResult<()> {
    let mut reports = scan_reports(&args.runs, args.task)?;
    if !args.kinds.is_empty() {
        reports.retain(|r| r.kind.is_some_and(|k| args.kinds.contains(&k)));
    }
    if !args.seeds.is_empty() {
        reports.retain(|r| r.seed.is_some_and(|s| args.seeds.contains(&s)));
    }
    if reports.is_empty() {
        return Err(usage(format!("no evaluated {} runs under {}", args.task, args.runs.display())));
    }
    let mut columns: Vec<String> = if args.splits.is_empty() {
        let found: BTreeSet<&str> = reports
            .iter()
            .map(|r| r.split.as_str())
            .filter(|s| s.starts_with("test-"))
            .collect();
        found.into_iter().map(str::to_string).collect()
    } else {
        args.splits.clone()
    };
    columns.sort_by_key(|c| split_order(c));
    let kinds: BTreeSet<AttentionKind> = if args.kinds.is_empty() {
        reports.iter().filter_map(|r| r.kind).collect()
    } else {
        args.kinds.iter().copied().collect()
    };
    let seeds: BTreeSet<u64> = if args.seeds.is_empty() {
        reports.iter().filter_map(|r| r.seed).collect()
    } else {
        args.seeds.iter().copied().collect()
    };
    let have: BTreeMap<(AttentionKind, u64, &str), ()> = reports
        .iter()
        .filter_map(|r| Some(((r.kind?, r.seed?, r.split.as_str()), ())))
        .collect();
    let mut missing = Vec::new();
    for &k in &kinds {
        for &s in &seeds {
            for c in &columns {
                if !have.contains_key(&(k, s, c.as_str())) {
                    missing.push(format!("{k}/{s}/{c}"));
                }
            }
        }
    }
    if !missing.is_empty() && !args.partial {
        return Err(usage(format!("missing runs (use --partial): {}", missing.join(", "))));
    }
    let mut text = String::new();
    for metric in [Metric::Accuracy, Metric::EditDistance] {
        let table = ResultTable::from_reports(args.task, metric, &columns, &reports);
        match args.format {
            TableFormat::Markdown => {
                if !text.is_empty() {
                    text.push('\n');
                }
                text.push_str(&table.to_markdown());
            }
            TableFormat::Csv => {
                let csv = table.to_csv();
                let body = if text.is_empty() { &csv[..] } else { csv.split_once('\n').map_or("", |p| p.1) };
                text.push_str(body);
            }
        }
    }
    match &args.out {
        Some(path) => fs::write(path, &text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

pub fn cmd_sweep(args: &SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let kinds: Vec<AttentionKind> = if args.kinds.is_empty() {
        AttentionBase::ALL.into_iter().map(AttentionKind::plain).collect()
    } else {
        args.kinds.clone()
    };
    if args.seeds.is_empty() {
        return Err(usage("no seeds given"));
    }
    let mut finished = Vec::new();
    for &kind in &kinds {
        for &seed in &args.seeds {
            let mut cfg = args.exp.resolve(Some(kind))?;
            cfg.seed = seed;
            if !cfg.data_dir.join("meta.json").exists() {
                cmd_gen(cfg.task, args.data_seed, &cfg.data_dir, false, out)?;
            }
            let dir = cfg.run_dir();
            if dir.join("train_report.json").exists() && !args.exp.overwrite {
                writeln!(out, "{}/{kind}/{seed}: already trained, skipping", cfg.task)?;
            } else {
                cmd_train(&cfg, args.exp.overwrite, out)?;
            }
            let eval = EvalArgs {
                run: dir,
                splits: Vec::new(),
                data: None,
                predictions: false,
                dump_attn: None,
                dump_limit: 0,
            };
            cmd_eval(&eval, out)?;
            finished.push(cfg);
        }
    }
    let cfg = &finished[0];
    let table = TableArgs {
        task: cfg.task,
        runs: cfg.run_root.clone(),
        kinds,
        seeds: args.seeds.clone(),
        splits: Vec::new(),
        partial: false,
        format: TableFormat::Markdown,
        out: Some(cfg.run_root.join(cfg.task.name()).join("table.md")),
    };
    cmd_table(&table, out)?;
    writeln!(out, "tables -> {}", table.out.as_ref().map(|p| p.display().to_string()).unwrap_or_default())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_grammar() {
        let cli = Cli::try_parse_from([
            "locattn", "train", "--task", "copy", "--attn", "onestep+mix+pr", "--seed", "4", "--set", "lr=0.01",
        ])
        .unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        let kind = a.attn.unwrap();
        assert_eq!(kind.base, AttentionBase::Onestep);
        assert!(kind.mix_content && kind.pr_reference);
        let cfg = a.exp.resolve(a.attn).unwrap();
        assert_eq!((cfg.seed, cfg.train.lr), (4, 0.01));
        assert_eq!(cfg.run_dir(), PathBuf::from("runs/copy/onestep+mix+pr/4"));
    }

    #[test]
    fn bad_invocations_are_usage_errors() {
        assert!(Cli::try_parse_from(["locattn", "gen", "sorting"]).is_err());
        assert!(Cli::try_parse_from(["locattn", "train", "--attn", "onestep+pr+mix"]).is_err());
        let cli = Cli::try_parse_from(["locattn", "train", "--attn", "content"]).unwrap();
        let Command::Train(a) = cli.command else { panic!() };
        assert_eq!(a.exp.resolve(a.attn).unwrap_err().exit_code(), EXIT_USAGE);
    }

    #[test]
    fn error_classes() {
        let numeric = CliError::from(Error::Training {
            epoch: 2,
            step: 9,
            msg: "nan".into(),
        });
        assert_eq!(numeric.exit_code(), EXIT_NUMERIC);
        assert!(numeric.to_string().contains("epoch 2, step 9"));
        assert_eq!(CliError::from(Error::Task("x".into())).exit_code(), EXIT_USAGE);
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).exit_code(), 1);
    }

    #[test]
    fn split_columns_sort_by_length() {
        let mut v = vec!["test-100", "test-15", "test-30"];
        v.sort_by_key(|c| split_order(c));
        assert_eq!(v, ["test-15", "test-30", "test-100"]);
    }
}
