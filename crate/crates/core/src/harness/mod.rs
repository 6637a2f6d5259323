//! Experiment orchestration: configs, model assembly, training,
//! evaluation, comparison reports and checkpoints.

mod checkpoint;
mod config;
mod model;
mod train;

use std::path::{Path, PathBuf};

pub use checkpoint::{decode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use config::{load_config, RunConfig};
pub use model::{length_batches, Batch, Model};
pub use train::{
    compare, evaluate, evaluate_model, predict_all, prepare, run_experiment, score, train, train_on, EpochLog,
    EvalReport, EvalRow, Scores, TrainOutcome, CSV_HEADER,
};

use crate::error::{Error, Result};
use crate::events::write_dataset;
use crate::synth::{generate_dataset, split_dataset, SynthSpec};

/// Generates a synthetic dataset and writes `{prefix}train.jsonl`,
/// `{prefix}valid.jsonl` and `{prefix}eval.jsonl`. `seed` overrides the
/// spec's seed when given.
pub fn generate_splits(spec: &SynthSpec, prefix: &str, seed: Option<u64>) -> Result<[PathBuf; 3]> {
    let mut spec = spec.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec)?;
    let parts = split_dataset(&ds, spec.split);
    let paths = ["train", "valid", "eval"].map(|n| PathBuf::from(format!("{prefix}{n}.jsonl")));
    if let Some(dir) = paths[0].parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (p, d) in paths.iter().zip(&parts) {
        write_dataset(p, d)?;
    }
    Ok(paths)
}

pub fn load_synth_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    SynthSpec::from_json(&text)
}
