use std::path::Path;

use tsfuse::cells::ModelKind;
use tsfuse::events::{write_dataset, Dataset};
use tsfuse::harness::{evaluate, generate_splits, train, train_on, RunConfig};
use tsfuse::synth::SynthSpec;
use tsfuse::Error;

fn data_spec(n: usize) -> SynthSpec {
    SynthSpec {
        n_sequences: n,
        seq_len_range: [8, 16],
        positive_rate: 0.3,
        margin: 0.5,
        ..SynthSpec::default()
    }
}

fn tiny_cfg(dir: &Path, model: ModelKind, epochs: usize) -> RunConfig {
    RunConfig {
        model,
        d_model: 8,
        hidden: 8,
        head_hidden: 4,
        lr: 0.01,
        batch_size: 16,
        epochs,
        train: Some(dir.join("train.jsonl")),
        valid: Some(dir.join("valid.jsonl")),
        eval: Some(dir.join("eval.jsonl")),
        checkpoint: dir.join("model.tsf"),
        ..RunConfig::default()
    }
}

fn prefix(dir: &Path) -> String {
    format!("{}/", dir.display())
}

#[test]
fn untrained_model_is_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    generate_splits(&data_spec(1500), &prefix(dir.path()), Some(3)).unwrap();
    for model in [ModelKind::Lstm, ModelKind::Fglstm] {
        let cfg = tiny_cfg(dir.path(), model, 0);
        let out = train(&cfg, |_| {}).unwrap();
        assert_eq!(out.log.len(), 1);
        let auc = out.log[0].valid.unwrap().auc;
        assert!((0.35..=0.65).contains(&auc), "{model:?}: {auc}");
        assert!(cfg.checkpoint.exists());
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_reload() {
    let dir = tempfile::tempdir().unwrap();
    generate_splits(&data_spec(300), &prefix(dir.path()), None).unwrap();
    let cfg = tiny_cfg(dir.path(), ModelKind::Fglstm, 3);
    let a = train(&cfg, |_| {}).unwrap();
    let log_a = std::fs::read_to_string(dir.path().join("model.tsf.log")).unwrap();
    let row_a = evaluate(&cfg.checkpoint, dir.path().join("eval.jsonl")).unwrap();
    let b = train(&cfg, |_| {}).unwrap();
    let log_b = std::fs::read_to_string(dir.path().join("model.tsf.log")).unwrap();
    let row_b = evaluate(&cfg.checkpoint, dir.path().join("eval.jsonl")).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(log_a, log_b);
    assert_eq!(row_a, row_b);
    assert_eq!(evaluate(&cfg.checkpoint, dir.path().join("eval.jsonl")).unwrap(), row_a);

    // the reloaded model scores the validation split exactly as during training
    let reloaded = evaluate(&cfg.checkpoint, dir.path().join("valid.jsonl")).unwrap();
    assert_eq!(reloaded.outcome.unwrap(), a.best_valid().unwrap());
}

#[test]
fn separable_task_fits_training_split() {
    let dir = tempfile::tempdir().unwrap();
    generate_splits(&data_spec(600), &prefix(dir.path()), Some(5)).unwrap();
    let cfg = tiny_cfg(dir.path(), ModelKind::Lstm, 12);
    let out = train(&cfg, |_| {}).unwrap();
    let valid = out.best_valid().unwrap().auc;
    let on_train = evaluate(&cfg.checkpoint, dir.path().join("train.jsonl")).unwrap().outcome.unwrap().auc;
    assert!(on_train >= valid - 0.05, "train {on_train} vs valid {valid}");
}

#[test]
fn evaluation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let [train_path, _, eval_path] = generate_splits(&data_spec(200), &prefix(dir.path()), None).unwrap();
    let cfg = tiny_cfg(dir.path(), ModelKind::Phased, 0);
    train(&cfg, |_| {}).unwrap();

    let mut one_class = tsfuse::events::parse_dataset(&eval_path).unwrap();
    one_class.sequences.retain(|s| s.label == 0);
    let p = dir.path().join("neg.jsonl");
    write_dataset(&p, &one_class).unwrap();
    let err = evaluate(&cfg.checkpoint, &p).unwrap_err();
    assert!(matches!(err, Error::UndefinedMetric(_)), "{err}");
    assert!(err.to_string().contains("both classes"));

    let mut foreign = tsfuse::events::parse_dataset(&train_path).unwrap();
    for s in &mut foreign.sequences {
        for e in &mut s.events {
            e.event_type = format!("other_{}", e.event_type);
        }
    }
    let p = dir.path().join("foreign.jsonl");
    write_dataset(&p, &foreign).unwrap();
    assert!(matches!(evaluate(&cfg.checkpoint, &p), Err(Error::Compatibility(_))));

    std::fs::write(&cfg.checkpoint, b"not a checkpoint").unwrap();
    assert!(matches!(evaluate(&cfg.checkpoint, &eval_path), Err(Error::Checkpoint(_))));
}

#[test]
fn divergence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    generate_splits(&data_spec(100), &prefix(dir.path()), None).unwrap();
    let ds = tsfuse::events::parse_dataset(dir.path().join("train.jsonl")).unwrap();
    // one Adam step moves every weight by about lr, so the next forward overflows
    let cfg = RunConfig {
        lr: 1e300,
        ..tiny_cfg(dir.path(), ModelKind::Lstm, 2)
    };
    let valid = tsfuse::events::parse_dataset(dir.path().join("valid.jsonl")).unwrap();
    match train_on(&cfg, &ds, &valid, |_| {}) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("expected divergence"),
    }
    assert!(train_on(&cfg, &Dataset::default(), &valid, |_| {}).is_err());
}

#[test]
fn tape_memory_grows_linearly_with_length() {
    use tsfuse::harness::{Batch, Model};
    use tsfuse::numerics::Tape;

    let stored = |len: usize, d_model: usize| {
        let spec = SynthSpec {
            n_sequences: 4,
            seq_len_range: [len, len],
            ..SynthSpec::default()
        };
        let ds = tsfuse::synth::generate_dataset(&spec).unwrap();
        let vocab = tsfuse::events::build_vocab(&ds);
        let enc: Vec<_> = ds.sequences.iter().map(|s| vocab.encode(s)).collect();
        let batch = Batch::new(&enc.iter().collect::<Vec<_>>()).unwrap();
        let cfg = RunConfig {
            model: ModelKind::Fglstm,
            d_model,
            hidden: 8,
            head_hidden: 4,
            ..RunConfig::default()
        };
        let model = Model::new(&cfg, &vocab, ds.max_time()).unwrap();
        let mut tape = Tape::new();
        model.loss(&mut tape, &batch).unwrap();
        tape.stored_scalars() as f64
    };
    let s: Vec<f64> = [25, 50, 100, 200].iter().map(|&l| stored(l, 16)).collect();
    let per_step = (s[1] - s[0]) / 25.0;
    for (w, span) in s.windows(2).zip([25.0, 50.0, 100.0]) {
        let rate = (w[1] - w[0]) / span;
        assert!((rate / per_step - 1.0).abs() < 0.02, "{s:?}");
    }
    // doubling the width at most doubles the per-step footprint
    let wide = (stored(50, 32) - stored(25, 32)) / 25.0;
    assert!(wide > per_step && wide <= 2.0 * per_step, "{wide} vs {per_step}");
}
