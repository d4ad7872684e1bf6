use super::*;
use crate::attention::AttentionBase;
use crate::taskgen::{vocabulary_for, Provenance, Sample, TaskKind};

fn copy_split(name: &str, n: usize, lens: (usize, usize), seed: u64) -> DatasetSplit {
    let mut rng = RngStream::new(seed);
    let samples = (0..n)
        .map(|_| {
            let len = rng.range(lens.0, lens.1);
            let toks: Vec<String> = (0..len).map(|_| rng.range(0, 3).to_string()).collect();
            Sample::new(toks.clone(), toks)
        })
        .collect();
    DatasetSplit {
        name: name.into(),
        samples,
        provenance: Provenance {
            task: TaskKind::Copy,
            seed,
            min_len: lens.0,
            max_len: lens.1,
        },
    }
}

fn tiny_dataset() -> Dataset {
    Dataset {
        task: TaskKind::Copy,
        seed: 0,
        vocab: vocabulary_for(TaskKind::Copy),
        tables: None,
        splits: vec![
            copy_split("train", 48, (1, 3), 1),
            copy_split("dev", 16, (1, 3), 2),
            copy_split("test-4", 8, (4, 4), 3),
        ],
    }
}

fn small_model(vocab: usize, kind: AttentionKind) -> ModelConfig {
    ModelConfig {
        d: 16,
        d_e: 8,
        dropout: 0.1,
        ..ModelConfig::new(vocab, kind)
    }
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        lr: 1e-2,
        max_epochs: epochs,
        early_stop_patience: 50,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn default_recipe() {
    let c = TrainConfig::default();
    assert_eq!((c.batch_size, c.lr, c.max_epochs, c.early_stop_patience, c.plateau_epochs), (32, 1e-3, 100, 50, 4));
    assert_eq!((c.beta1, c.beta2, c.adam_eps, c.lr_decay, c.clip_norm), (0.9, 0.999, 1e-8, 0.5, 1.0));
    assert!(c.validate().is_ok());
    let bad = TrainConfig {
        plateau_epochs: 50,
        ..c
    };
    assert!(bad.validate().is_err());
}

#[test]
fn training_reduces_loss_and_is_reproducible() {
    let ds = tiny_dataset();
    let train = encode_split(&ds.vocab, ds.split("train").unwrap()).unwrap();
    let dev = encode_split(&ds.vocab, ds.split("dev").unwrap()).unwrap();
    let run = || {
        let kind = AttentionKind::plain(AttentionBase::Relative);
        let model = init_model(small_model(ds.vocab.len(), kind), 3).unwrap();
        fit(model, &train, &dev, &quick(8, 3), &mut |_| {}).unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    for ((_, p), (_, q)) in a.best.store.iter().zip(b.best.store.iter()) {
        assert_eq!(p.value().data(), q.value().data());
    }
    let losses: Vec<f64> = a.report.epochs.iter().map(|e| e.train_loss).collect();
    assert!(losses.last().unwrap() < &(0.7 * losses[0]), "{losses:?}");
    let max = a.report.epochs.iter().map(|e| e.dev_accuracy).fold(0.0, f64::max);
    assert_eq!(a.report.best_dev_acc, max);
    let first_best = a.report.epochs.iter().find(|e| e.dev_accuracy == max).unwrap().epoch;
    assert_eq!(a.report.best_epoch, first_best);
    assert!(a.report.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert_eq!(a.timing.epoch_seconds.len(), a.report.epochs.len());
}

#[test]
fn best_parameters_reproduce_best_accuracy() {
    let ds = tiny_dataset();
    let train = encode_split(&ds.vocab, ds.split("train").unwrap()).unwrap();
    let dev = encode_split(&ds.vocab, ds.split("dev").unwrap()).unwrap();
    let kind = AttentionKind::plain(AttentionBase::Content);
    let model = init_model(small_model(ds.vocab.len(), kind), 5).unwrap();
    let out = fit(model, &train, &dev, &quick(6, 5), &mut |_| {}).unwrap();
    assert_eq!(accuracy(&out.best, &dev, 7).unwrap(), out.report.best_dev_acc);
}

#[test]
fn non_finite_parameters_abort_with_context() {
    let ds = tiny_dataset();
    let train = encode_split(&ds.vocab, ds.split("train").unwrap()).unwrap();
    let kind = AttentionKind::plain(AttentionBase::Content);
    let mut model = init_model(small_model(ds.vocab.len(), kind), 1).unwrap();
    let id = model.params.embedding;
    model.store.get_mut(id).value_mut()[8 * 3] = f32::NAN;
    let err = fit(model, &train, &train, &quick(2, 1), &mut |_| {}).unwrap_err();
    assert!(matches!(err, Error::Training { epoch: 1, step: 1, .. }), "{err}");
    assert!(err.is_numeric());
}

#[test]
fn empty_train_split_is_rejected() {
    let ds = tiny_dataset();
    let dev = encode_split(&ds.vocab, ds.split("dev").unwrap()).unwrap();
    let model = init_model(small_model(ds.vocab.len(), AttentionKind::plain(AttentionBase::Content)), 1).unwrap();
    assert!(fit(model, &[], &dev, &quick(1, 1), &mut |_| {}).is_err());
}

#[test]
fn multiseed_tables_cover_every_kind_and_split() {
    let ds = tiny_dataset();
    let kinds = [
        AttentionKind::plain(AttentionBase::Onestep),
        AttentionKind::plain(AttentionBase::Content),
    ];
    let mut seen = Vec::new();
    let out = run_multiseed(
        &ds,
        &kinds,
        &[2, 1],
        &small_model(ds.vocab.len(), kinds[0]),
        &quick(2, 0),
        &mut |k, s, r| seen.push((k, s, r.epoch)),
    )
    .unwrap();
    assert_eq!(out.reports.len(), 4);
    let order: Vec<(AttentionKind, u64)> = out.reports.iter().map(|r| (r.kind.unwrap(), r.seed.unwrap())).collect();
    assert_eq!(order, vec![(kinds[1], 1), (kinds[1], 2), (kinds[0], 1), (kinds[0], 2)]);
    for kind in kinds {
        let cell = out.accuracy.cell(kind, "test-4").unwrap();
        assert_eq!(cell.values.len(), 2);
        assert_eq!(cell.median, crate::evaluator::lower_median(&cell.values));
    }
    assert_eq!(seen.len(), 8);
}
