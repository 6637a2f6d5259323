use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cells::ModelKind;
use crate::encoders::TimeEncoding;
use crate::error::{Error, Result};
use crate::fusion::{NonTemporalFusion, TemporalFusion};

/// One experiment. Relative paths are resolved against the working
/// directory of the process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub time_encoding: TimeEncoding,
    pub temporal_fusion: TemporalFusion,
    pub nontemporal_fusion: NonTemporalFusion,
    pub d_model: usize,
    pub hidden: usize,
    /// Width of the classifier's middle layer.
    pub head_hidden: usize,
    /// Width of the feature-gate filter; defaults to `hidden`.
    pub feature_width: Option<usize>,
    pub attr_channels: usize,
    pub stack_channels: usize,
    pub temporal_channels: usize,
    pub r_on: f64,
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Keep only the last `max_seq_len` events of longer sequences.
    pub max_seq_len: Option<usize>,
    pub seed: u64,
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub log: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Fglstm,
            time_encoding: TimeEncoding::Convolution,
            temporal_fusion: TemporalFusion::ConvAdd,
            nontemporal_fusion: NonTemporalFusion::Paper,
            d_model: 256,
            hidden: 128,
            head_hidden: 64,
            feature_width: None,
            attr_channels: 6,
            stack_channels: 4,
            temporal_channels: 4,
            r_on: 0.05,
            alpha: 0.001,
            lr: 1e-4,
            batch_size: 128,
            epochs: 20,
            max_seq_len: None,
            seed: 1,
            train: None,
            valid: None,
            eval: None,
            checkpoint: PathBuf::from("checkpoint.tsf"),
            log: None,
        }
    }
}

impl RunConfig {
    /// Parses a JSON object; blank text gives the defaults.
    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("hidden", self.hidden),
            ("head_hidden", self.head_hidden),
            ("attr_channels", self.attr_channels),
            ("stack_channels", self.stack_channels),
            ("temporal_channels", self.temporal_channels),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.feature_width == Some(0) {
            return Err(Error::Config("feature_width must be positive".into()));
        }
        if self.max_seq_len == Some(0) {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if self.time_encoding == TimeEncoding::Function && !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "function time encoding needs an even d_model, got {}",
                self.d_model
            )));
        }
        if self.time_encoding == TimeEncoding::Convolution && self.d_model < 2 {
            return Err(Error::Config("convolution time encoding needs d_model >= 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.r_on > 0.0 && self.r_on < 1.0) {
            return Err(Error::Config(format!("r_on must lie in (0, 1), got {}", self.r_on)));
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width.unwrap_or(self.hidden)
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}
