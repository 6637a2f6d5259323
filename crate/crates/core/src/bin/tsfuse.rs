use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tsfuse::harness::{compare, evaluate, generate_splits, load_config, load_synth_spec, train};
use tsfuse::synth::SynthSpec;
use tsfuse::Result;

#[derive(Parser)]
#[command(name = "tsfuse", version, about = "Feature-fusion models for irregular multimodal event sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/valid/eval JSONL files.
    Generate {
        /// Generator spec (JSON). Defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output prefix, e.g. `data/` or `data/run1-`.
        #[arg(long)]
        out_prefix: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train and evaluate several configs and write a CSV report.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out_prefix, seed } => {
            let spec = match spec {
                Some(p) => load_synth_spec(p)?,
                None => SynthSpec::default(),
            };
            for p in generate_splits(&spec, &out_prefix, seed)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let out = train(&cfg, |e| println!("{}", e.line()))?;
            println!("best epoch {}; checkpoint {}", out.best_epoch, cfg.checkpoint.display());
        }
        Command::Eval { checkpoint, data } => {
            let row = evaluate(checkpoint, data)?;
            let s = row.outcome.expect("evaluate returns scores");
            println!("model {} time_enc {} temporal_fusion {} nontemporal_fusion {}", row.model, row.time_enc, row.temporal_fusion, row.nontemporal_fusion);
            println!("AUC {:.2}%  AP {:.2}%", 100.0 * s.auc, 100.0 * s.ap);
        }
        Command::Compare { configs, out } => {
            let cfgs = configs.iter().map(load_config).collect::<Result<Vec<_>>>()?;
            let report = compare(&cfgs, |i, e| eprintln!("[{}] {}", configs[i].display(), e.line()))?;
            print!("{}", report.to_table());
            std::fs::write(&out, report.to_csv()).map_err(|e| tsfuse::Error::Io { path: out.clone(), source: e })?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
