use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{build_vocab, parse_dataset, Dataset, EncodedSequence, Vocab};
use crate::metrics::{auc, average_precision, ScoredLabels};
use crate::numerics::{Adam, AdamConfig, Rng, Tape};

use super::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use super::config::RunConfig;
use super::model::{length_batches, Batch, Model};

const SHUFFLE_STREAM: u64 = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub auc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// `None` for epoch 0, the untrained model.
    pub train_loss: Option<f64>,
    /// `None` when the validation split has a single class.
    pub valid: Option<Scores>,
}

impl EpochLog {
    pub fn line(&self) -> String {
        let mut s = format!("epoch {:>3}", self.epoch);
        match self.train_loss {
            Some(l) => write!(s, "  train_loss {l:.6}").unwrap(),
            None => s.push_str("  train_loss        -"),
        }
        match self.valid {
            Some(v) => write!(s, "  valid_auc {:.6}  valid_ap {:.6}", v.auc, v.ap).unwrap(),
            None => s.push_str("  valid_auc undefined"),
        }
        s
    }
}

pub struct TrainOutcome {
    pub vocab: Vocab,
    /// Parameters from the epoch with the best validation AUC.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_valid(&self) -> Option<Scores> {
        self.log[self.best_epoch].valid
    }
}

/// Encodes a dataset, truncating to the most recent `max_len` events.
pub fn prepare(ds: &Dataset, vocab: &Vocab, max_len: Option<usize>) -> Vec<EncodedSequence> {
    ds.sequences
        .iter()
        .map(|s| match max_len {
            Some(m) if s.len() > m => vocab.encode(&s.truncated(m)),
            _ => vocab.encode(s),
        })
        .collect()
}

fn max_time(seqs: &[EncodedSequence]) -> f64 {
    seqs.iter().filter_map(|s| s.times.last()).fold(0.0, |a, &b| a.max(b))
}

/// Final-step class-1 probabilities, in input order.
pub fn predict_all(model: &Model, seqs: &[EncodedSequence], batch_size: usize) -> Result<Vec<f64>> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let mut out = vec![0.0; seqs.len()];
    for idx in length_batches(&lengths, batch_size, None) {
        let members: Vec<&EncodedSequence> = idx.iter().map(|&i| &seqs[i]).collect();
        let p = model.predict(&Batch::new(&members)?)?;
        for (&i, v) in idx.iter().zip(p) {
            out[i] = v;
        }
    }
    Ok(out)
}

pub fn score(model: &Model, seqs: &[EncodedSequence], batch_size: usize) -> Result<Scores> {
    let preds = predict_all(model, seqs, batch_size)?;
    let data = ScoredLabels::new(preds, seqs.iter().map(|s| s.label).collect())?;
    Ok(Scores {
        auc: auc(&data)?,
        ap: average_precision(&data)?,
    })
}

fn check_nonempty(ds: &Dataset, what: &str) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::Validation(format!("{what} split is empty")));
    }
    Ok(())
}

/// Minibatch Adam on in-memory splits. Deterministic given `cfg.seed`.
/// `on_epoch` sees each log entry as soon as it is known.
pub fn train_on(cfg: &RunConfig, train: &Dataset, valid: &Dataset, mut on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_nonempty(train, "training")?;
    check_nonempty(valid, "validation")?;
    let vocab = build_vocab(train);
    let train_seqs = prepare(train, &vocab, cfg.max_seq_len);
    let valid_seqs = prepare(valid, &vocab, cfg.max_seq_len);
    let mut model = Model::new(cfg, &vocab, max_time(&train_seqs))?;
    let mut adam = Adam::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = Rng::new(cfg.seed).split(SHUFFLE_STREAM);
    let lengths: Vec<usize> = train_seqs.iter().map(|s| s.len()).collect();

    let valid_scores = |m: &Model| match score(m, &valid_seqs, cfg.batch_size) {
        Ok(s) => Ok(Some(s)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };

    let first = EpochLog {
        epoch: 0,
        train_loss: None,
        valid: valid_scores(&model)?,
    };
    on_epoch(&first);
    let mut log = vec![first];
    let mut best = (0, model.params.clone());
    let key = |v: Option<Scores>| v.map_or(f64::NEG_INFINITY, |s| s.auc);

    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for (bi, idx) in length_batches(&lengths, cfg.batch_size, Some(&mut rng)).into_iter().enumerate() {
            let members: Vec<&EncodedSequence> = idx.iter().map(|&i| &train_seqs[i]).collect();
            let batch = Batch::new(&members)?;
            let mut tape = Tape::new();
            let loss = model.loss(&mut tape, &batch)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training loss diverged at epoch {epoch}, batch {bi} (loss {value}); try a smaller lr"
                )));
            }
            total += value * batch.size as f64;
            let grads = tape.backward(loss)?;
            grads
                .accumulate_into(&tape, &mut model.params)
                .map_err(|e| Error::Numeric(format!("{e} at epoch {epoch}, batch {bi}")))?;
            adam.step(&mut model.params)?;
            model.project();
        }
        let entry = EpochLog {
            epoch,
            train_loss: Some(total / train_seqs.len() as f64),
            valid: valid_scores(&model)?,
        };
        on_epoch(&entry);
        if key(entry.valid) > key(log[best.0].valid) {
            best = (epoch, model.params.clone());
        }
        log.push(entry);
    }
    model.params = best.1;
    Ok(TrainOutcome {
        vocab,
        model,
        best_epoch: best.0,
        log,
    })
}

fn required<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("no {what} dataset path configured")))
}

/// Trains from the configured files, writing the best checkpoint and a
/// per-epoch log next to it (or to `cfg.log`).
pub fn train(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
    let train_ds = parse_dataset(required(&cfg.train, "train")?)?;
    let valid_ds = parse_dataset(required(&cfg.valid, "valid")?)?;
    let out = train_on(cfg, &train_ds, &valid_ds, on_epoch)?;
    save_checkpoint(&cfg.checkpoint, &Checkpoint::from_model(cfg, &out.vocab, &out.model))?;
    let log_path = cfg.log.clone().unwrap_or_else(|| {
        let mut p = cfg.checkpoint.clone().into_os_string();
        p.push(".log");
        p.into()
    });
    let mut text = String::new();
    for e in &out.log {
        text.push_str(&e.line());
        text.push('\n');
    }
    writeln!(text, "best epoch {}", out.best_epoch).unwrap();
    std::fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    Ok(out)
}

/// Scores a trained model on a dataset that must share its vocabulary.
pub fn evaluate_model(cfg: &RunConfig, vocab: &Vocab, model: &Model, ds: &Dataset) -> Result<Scores> {
    check_nonempty(ds, "evaluation")?;
    let known = ds
        .sequences
        .iter()
        .flat_map(|s| &s.events)
        .any(|e| vocab.event_types.contains(&e.event_type));
    if !known {
        return Err(Error::Compatibility(
            "dataset shares no event types with the checkpoint vocabulary".into(),
        ));
    }
    let seqs = prepare(ds, vocab, cfg.max_seq_len);
    score(model, &seqs, cfg.batch_size)
}

/// Loads a checkpoint and scores it on a dataset file.
pub fn evaluate(checkpoint: impl AsRef<Path>, data: impl AsRef<Path>) -> Result<EvalRow> {
    let (cfg, vocab, model) = load_checkpoint(checkpoint)?.into_model()?;
    let ds = parse_dataset(data)?;
    let scores = evaluate_model(&cfg, &vocab, &model, &ds)?;
    Ok(EvalRow::new(&cfg, Ok(scores)))
}

/// One line of a comparison report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub time_enc: String,
    pub temporal_fusion: String,
    pub nontemporal_fusion: String,
    pub outcome: std::result::Result<Scores, String>,
}

impl EvalRow {
    pub fn new(cfg: &RunConfig, outcome: std::result::Result<Scores, String>) -> Self {
        Self {
            model: cfg.model.as_str().into(),
            time_enc: cfg.time_encoding.as_str().into(),
            temporal_fusion: cfg.temporal_fusion.as_str().into(),
            nontemporal_fusion: cfg.nontemporal_fusion.as_str().into(),
            outcome,
        }
    }
}

pub const CSV_HEADER: &str = "model,time_enc,temporal_fusion,nontemporal_fusion,auc,ap";

/// Rows sorted by AUC, best first; failed runs go last.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn new(mut rows: Vec<EvalRow>) -> Self {
        let key = |r: &EvalRow| r.outcome.as_ref().map_or(f64::NEG_INFINITY, |s| s.auc);
        rows.sort_by(|a, b| key(b).total_cmp(&key(a)));
        Self { rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let (a, p) = match &r.outcome {
                Ok(sc) => (pct(sc.auc), pct(sc.ap)),
                Err(_) => ("failed".into(), "failed".into()),
            };
            writeln!(s, "{},{},{},{},{a},{p}", r.model, r.time_enc, r.temporal_fusion, r.nontemporal_fusion).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>4}  {:<7} {:<8} {:<15} {:<18} {:>7} {:>7}\n",
            "rank", "model", "time_enc", "temporal", "nontemporal", "AUC%", "AP%"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let (rank, a, p) = match &r.outcome {
                Ok(sc) => ((i + 1).to_string(), pct(sc.auc), pct(sc.ap)),
                Err(_) => ("-".into(), "failed".into(), "failed".into()),
            };
            writeln!(
                s,
                "{rank:>4}  {:<7} {:<8} {:<15} {:<18} {a:>7} {p:>7}",
                r.model, r.time_enc, r.temporal_fusion, r.nontemporal_fusion
            )
            .unwrap();
            if let Err(msg) = &r.outcome {
                writeln!(s, "      error: {msg}").unwrap();
            }
        }
        s
    }
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Trains on the train split, keeps the best-validation parameters and
/// scores them on the eval split. Nothing is written to disk.
pub fn run_experiment(cfg: &RunConfig, on_epoch: impl FnMut(&EpochLog)) -> Result<Scores> {
    let train_ds = parse_dataset(required(&cfg.train, "train")?)?;
    let valid_ds = parse_dataset(required(&cfg.valid, "valid")?)?;
    let eval_ds = parse_dataset(required(&cfg.eval, "eval")?)?;
    let out = train_on(cfg, &train_ds, &valid_ds, on_epoch)?;
    evaluate_model(cfg, &out.vocab, &out.model, &eval_ds)
}

/// Runs every config in turn. A failing run is recorded in its row and
/// the rest continue.
pub fn compare(cfgs: &[RunConfig], mut on_epoch: impl FnMut(usize, &EpochLog)) -> Result<EvalReport> {
    if cfgs.is_empty() {
        return Err(Error::Contract("compare needs at least one config".into()));
    }
    let rows = cfgs
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let outcome = run_experiment(cfg, |e| on_epoch(i, e)).map_err(|e| e.to_string());
            EvalRow::new(cfg, outcome)
        })
        .collect();
    Ok(EvalReport::new(rows))
}
