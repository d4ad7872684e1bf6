use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use locattn::evaluator::EvalReport;
use locattn::taskgen::{generate, read_dataset, write_dataset, TaskKind};

fn locattn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locattn"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const SMALL: [&str; 10] = [
    "--set",
    "d=16",
    "--set",
    "d_e=8",
    "--set",
    "max_epochs=2",
    "--set",
    "train_limit=120",
    "--set",
    "dev_limit=40",
];

fn train(dir: &Path, task: &str, attn: &str, seed: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--task", task, "--attn", attn, "--seed", seed];
    args.extend(SMALL);
    args.extend(extra);
    locattn(dir, &args)
}

#[test]
fn gen_reports_split_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&locattn(tmp.path(), &["gen", "copy", "--seed", "1"]));
    for (name, n) in [("train", 10000), ("dev", 2000), ("test-15", 2000), ("test-30", 2000), ("test-100", 2000)] {
        assert!(out.lines().any(|l| l.split_whitespace().eq([name, &n.to_string()])), "{out}");
    }
    let out = ok(&locattn(tmp.path(), &["gen", "lookup", "--seed", "1"]));
    assert!(out.contains("train    9000"), "{out}");
    for name in ["test-7", "test-9", "test-11"] {
        assert!(out.contains(name));
    }
    let ds = read_dataset(&tmp.path().join("data/lookup")).unwrap();
    assert_eq!(ds.split("test-7").unwrap().len(), 4500);
}

#[test]
fn gen_is_byte_reproducible_and_guards_existing_data() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&locattn(tmp.path(), &["gen", "dedupe", "--seed", "3", "--out", "a"]));
    ok(&locattn(tmp.path(), &["gen", "dedupe", "--seed", "3", "--out", "b"]));
    for f in ["train.tsv", "dev.tsv", "test-15.tsv", "test-30.tsv", "test-100.tsv", "meta.json"] {
        assert_eq!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(tmp.path().join("b").join(f)).unwrap());
    }
    let again = locattn(tmp.path(), &["gen", "dedupe", "--seed", "3", "--out", "a"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&locattn(tmp.path(), &["gen", "dedupe", "--seed", "3", "--out", "a", "--overwrite"]));
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(locattn(tmp.path(), &["gen", "sorting"]).status.code(), Some(2));
    assert_eq!(train(tmp.path(), "copy", "relative", "0", &[]).status.code(), Some(2));
    assert_eq!(
        locattn(tmp.path(), &["train", "--task", "copy", "--attn", "relative+mix"]).status.code(),
        Some(2)
    );
    assert_eq!(locattn(tmp.path(), &["train", "--task", "copy"]).status.code(), Some(2));
    assert_eq!(locattn(tmp.path(), &["table", "--task", "copy"]).status.code(), Some(2));
}

#[test]
fn numeric_blow_up_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&locattn(tmp.path(), &["gen", "copy"]));
    let out = train(tmp.path(), "copy", "content", "0", &["--set", "lr=1e38", "--set", "clip_norm=0"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("epoch 1, step"), "{err}");
}

#[test]
fn train_eval_and_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&locattn(dir, &["gen", "recopy"]));
    ok(&train(dir, "recopy", "onestep+mix+pr", "2", &[]));
    let run = dir.join("runs/recopy/onestep+mix+pr/2");
    for f in ["checkpoint.bin", "train_report.json", "config.echo", "timing.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echo = fs::read_to_string(run.join("config.echo")).unwrap();
    assert!(echo.contains("attn = onestep+mix+pr\n") && echo.contains("seed = 2\n"));
    assert_eq!(train(dir, "recopy", "onestep+mix+pr", "2", &[]).status.code(), Some(2));

    let out = ok(&locattn(
        dir,
        &["eval", "--run", "runs/recopy/onestep+mix+pr/2", "--split", "test-15", "--predictions", "--dump-attn", "attn", "--dump-limit", "3"],
    ));
    assert!(out.contains("test-15: accuracy"));
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(run.join("eval_test-15.json")).unwrap()).unwrap();
    assert_eq!((report.n, report.seed), (2000, Some(2)));
    assert_eq!(report.kind.unwrap().to_string(), "onestep+mix+pr");
    let tsv = fs::read_to_string(run.join("predictions_test-15.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 2000);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3));

    let ds = read_dataset(&dir.join("data/recopy")).unwrap();
    for i in 0..3 {
        let s = ds.split("test-15").unwrap().samples[i].source.len();
        let csv = fs::read_to_string(dir.join(format!("attn/test-15_{i}.csv"))).unwrap();
        assert!(csv.lines().count() >= 2);
        assert!(csv.lines().all(|l| l.split(',').count() == 7 + s), "{csv}");
    }
}

#[test]
fn eval_rejects_empty_split_and_mismatched_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut ds = generate(TaskKind::Copy, 0).unwrap();
    let mut empty = ds.split("test-15").unwrap().truncated(0);
    empty.name = "test-empty".into();
    ds.splits.push(empty);
    write_dataset(&ds, &dir.join("data/copy")).unwrap();
    ok(&train(dir, "copy", "relative", "0", &[]));
    let run = "runs/copy/relative/0";
    assert_eq!(locattn(dir, &["eval", "--run", run, "--split", "test-empty"]).status.code(), Some(2));
    assert_eq!(locattn(dir, &["eval", "--run", run, "--split", "test-1000"]).status.code(), Some(2));

    let echo = dir.join(run).join("config.echo");
    let text = fs::read_to_string(&echo).unwrap().replace("attn = relative", "attn = content");
    fs::write(&echo, text).unwrap();
    let out = locattn(dir, &["eval", "--run", run, "--split", "test-15"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
}

#[test]
fn config_file_with_flag_overrides_and_echo_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&locattn(dir, &["gen", "reverse-copy"]));
    fs::write(
        dir.join("exp.conf"),
        "# small run\ntask = reverse-copy\nattn = bi-relative\nseed = 5\nd = 16\nd_e = 8\nmax_epochs = 3\ntrain_limit = 100\ndev_limit = 30\n",
    )
    .unwrap();
    ok(&locattn(dir, &["train", "--config", "exp.conf", "--seed", "6", "--set", "max_epochs=2"]));
    let run = dir.join("runs/reverse-copy/bi-relative/6");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("train_report.json")).unwrap()).unwrap();
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["model"]["d"], 16);

    ok(&locattn(dir, &["train", "--config", "runs/reverse-copy/bi-relative/6/config.echo", "--runs", "rerun"]));
    assert_eq!(
        fs::read(run.join("train_report.json")).unwrap(),
        fs::read(dir.join("rerun/reverse-copy/bi-relative/6/train_report.json")).unwrap()
    );
}

fn fake_report(dir: &Path, kind: &str, seed: u64, split: &str, accuracy: f64) {
    let run = dir.join("runs/copy").join(kind).join(seed.to_string());
    fs::create_dir_all(&run).unwrap();
    let r = EvalReport {
        task: TaskKind::Copy,
        split: split.into(),
        kind: Some(kind.parse().unwrap()),
        seed: Some(seed),
        accuracy,
        mean_edit_distance: (100.0 - accuracy) / 10.0,
        n: 10,
        samples: None,
    };
    fs::write(run.join(format!("eval_{split}.json")), serde_json::to_string(&r).unwrap()).unwrap();
}

#[test]
fn table_medians_and_missing_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    fake_report(dir, "relative", 0, "test-15", 0.0);
    fake_report(dir, "relative", 1, "test-15", 50.0);
    fake_report(dir, "relative", 2, "test-15", 100.0);
    fake_report(dir, "onestep", 0, "test-15", 97.5);
    fake_report(dir, "onestep", 0, "test-100", 91.0);

    let out = ok(&locattn(dir, &["table", "--task", "copy", "--kinds", "relative", "--seeds", "0,1,2", "--splits", "test-15"]));
    assert!(out.contains("| relative | 50.0 (n=3) |"), "{out}");
    assert!(out.contains("| relative | 5.0 (n=3) |"), "{out}");

    let out = ok(&locattn(dir, &["table", "--task", "copy", "--kinds", "onestep", "--seeds", "0"]));
    assert!(out.contains("| Model | test-15 | test-100 |"), "{out}");
    assert!(out.contains("| onestep | 97.5 (n=1) | 91.0 (n=1) |"), "{out}");

    let missing = locattn(dir, &["table", "--task", "copy"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("onestep/1/test-15"));
    let out = ok(&locattn(dir, &["table", "--task", "copy", "--partial", "--format", "csv", "--out", "t.csv"]));
    assert!(out.is_empty());
    let csv = fs::read_to_string(dir.join("t.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "task,metric,kind,split,median,n_seeds,values");
    assert!(csv.contains("copy,accuracy,relative,test-100,,0,"));
}

#[test]
fn sweep_trains_evaluates_and_tabulates() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut args = vec!["sweep", "--task", "copy", "--kinds", "content,monotonic", "--seeds", "0,1"];
    args.extend(SMALL);
    let out = ok(&locattn(dir, &args));
    assert!(out.contains("tables -> runs/copy/table.md"), "{out}");
    let table = fs::read_to_string(dir.join("runs/copy/table.md")).unwrap();
    assert!(table.contains("| Model | test-15 | test-30 | test-100 |"), "{table}");
    assert!(table.contains("| content |") && table.contains("| monotonic |"));
    let out = ok(&locattn(dir, &args));
    assert_eq!(out.matches("already trained").count(), 4, "{out}");
}
