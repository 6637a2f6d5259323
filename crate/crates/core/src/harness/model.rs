use crate::cells::{GateConfig, HeadParams, RecurrentModel};
use crate::encoders::{EmbeddingTable, TimeEncoder};
use crate::error::{Error, Result};
use crate::events::{EncodedSequence, Vocab, ATTR_SLOTS, PAD_ID};
use crate::fusion::{
    fuse_additive_batch, fuse_nontemporal_batch, AttributeEncoders, NonTemporalFusion, NonTemporalFusionParams,
    TemporalFusionParams,
};
use crate::numerics::{ParamSet, Rng, Tape, Var};

use super::config::RunConfig;

/// Full pipeline: encoders, both fusion stages, recurrent cell and head.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: ParamSet,
    pub event_emb: EmbeddingTable,
    pub attrs: AttributeEncoders,
    pub nontemporal: Option<NonTemporalFusionParams>,
    pub time_enc: TimeEncoder,
    pub temporal: TemporalFusionParams,
    pub cell: RecurrentModel,
    pub head: HeadParams,
}

const INIT_STREAM: u64 = 10;

impl Model {
    /// Builds and initializes from `cfg.seed`. `max_time` only shapes the
    /// initial time-gate periods.
    pub fn new(cfg: &RunConfig, vocab: &Vocab, max_time: f64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed).split(INIT_STREAM);
        let mut params = ParamSet::new();
        let d = cfg.d_model;
        let event_emb = EmbeddingTable::new(&mut params, "event_emb", vocab.event_types.len(), d, &mut rng);
        let attrs = AttributeEncoders::new(&mut params, vocab.attr_types.len(), d, &mut rng);
        let nontemporal = match cfg.nontemporal_fusion {
            NonTemporalFusion::Paper => Some(NonTemporalFusionParams::new(
                &mut params,
                cfg.attr_channels,
                cfg.stack_channels,
                &mut rng,
            )),
            NonTemporalFusion::Additive => None,
        };
        let time_enc = TimeEncoder::new(cfg.time_encoding, &mut params, d, &mut rng)?;
        let temporal = TemporalFusionParams::new(&mut params, cfg.temporal_fusion, cfg.temporal_channels, &mut rng);
        let gate = GateConfig {
            max_time,
            r_on: cfg.r_on,
            alpha: cfg.alpha,
            feature_width: cfg.feature_width(),
        };
        let cell = RecurrentModel::new(cfg.model, &mut params, d, cfg.hidden, &gate, &mut rng);
        let head = HeadParams::new(&mut params, cell.output_width(), cfg.head_hidden, &mut rng);
        Ok(Self {
            params,
            event_emb,
            attrs,
            nontemporal,
            time_enc,
            temporal,
            cell,
            head,
        })
    }

    /// Recurrent outputs for a padded batch.
    fn encode(&self, tape: &mut Tape, batch: &Batch) -> Result<crate::cells::RunOutput> {
        let p = &self.params;
        let ev = self.event_emb.embed(tape, p, &batch.event_ids)?;
        let x = match &self.nontemporal {
            Some(nt) => fuse_nontemporal_batch(tape, p, nt, &self.attrs, ev, &batch.attr_ids, &batch.attr_values)?,
            None => fuse_additive_batch(tape, p, &self.attrs, ev, &batch.attr_ids, &batch.attr_values)?,
        };
        let te = self.time_enc.encode(tape, p, &batch.times)?;
        let fused = self.temporal.apply(tape, p, x, te)?;
        self.cell.run(tape, p, fused, &batch.times, &batch.mask, batch.size)
    }

    /// Training loss: per-step cross-entropy against the sequence label,
    /// averaged over each sequence's real steps, then over the batch.
    pub fn loss(&self, tape: &mut Tape, batch: &Batch) -> Result<Var> {
        let out = self.encode(tape, batch)?;
        let probs = self.head.apply(tape, &self.params, out.per_step)?;
        let p1 = tape.slice_cols(probs, 1, 1)?;
        let b = batch.size;
        let mut targets = Vec::with_capacity(batch.mask.len());
        let mut weights = Vec::with_capacity(batch.mask.len());
        for (row, &m) in batch.mask.iter().enumerate() {
            let s = row % b;
            targets.push(f64::from(batch.labels[s]));
            weights.push(m / (batch.lengths[s] * b) as f64);
        }
        tape.weighted_bce(p1, &targets, &weights)
    }

    /// Class-1 probability after each sequence's final event.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, batch)?;
        let probs = self.head.apply(&mut tape, &self.params, out.last)?;
        let v = tape.value(probs);
        let p: Vec<f64> = (0..batch.size).map(|s| v.at(s, 1)).collect();
        if p.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("model prediction".into()));
        }
        Ok(p)
    }

    /// Keeps learned gate periods and open ratios inside their domains.
    pub fn project(&mut self) {
        if let Some(tg) = self.cell.time_gate().cloned() {
            tg.project(&mut self.params);
        }
    }
}

/// Sequences padded to a common length, stored time-major: row `t·B + b`
/// is step `t` of sequence `b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub steps: usize,
    pub event_ids: Vec<usize>,
    pub attr_ids: Vec<[usize; ATTR_SLOTS]>,
    pub attr_values: Vec<[f64; ATTR_SLOTS]>,
    pub times: Vec<f64>,
    pub mask: Vec<f64>,
    pub lengths: Vec<usize>,
    pub labels: Vec<u8>,
}

impl Batch {
    pub fn new(seqs: &[&EncodedSequence]) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("a batch needs non-empty sequences".into()));
        }
        let b = seqs.len();
        let steps = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let n = b * steps;
        let mut out = Batch {
            size: b,
            steps,
            event_ids: Vec::with_capacity(n),
            attr_ids: Vec::with_capacity(n),
            attr_values: Vec::with_capacity(n),
            times: Vec::with_capacity(n),
            mask: Vec::with_capacity(n),
            lengths: seqs.iter().map(|s| s.len()).collect(),
            labels: seqs.iter().map(|s| s.label).collect(),
        };
        for t in 0..steps {
            for s in seqs {
                if t < s.len() {
                    out.event_ids.push(s.event_ids[t]);
                    out.attr_ids.push(s.attr_ids[t]);
                    out.attr_values.push(s.attr_values[t]);
                    out.times.push(s.times[t]);
                    out.mask.push(1.0);
                } else {
                    out.event_ids.push(PAD_ID);
                    out.attr_ids.push([PAD_ID; ATTR_SLOTS]);
                    out.attr_values.push([0.0; ATTR_SLOTS]);
                    out.times.push(s.times[s.len() - 1]);
                    out.mask.push(0.0);
                }
            }
        }
        Ok(out)
    }
}

/// Splits indices into batches of sequences with similar length. Ties in
/// length are ordered by `rng` when given, else by index.
pub fn length_batches(lengths: &[usize], batch_size: usize, rng: Option<&mut Rng>) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lengths.len()).collect();
    if let Some(r) = rng {
        r.shuffle(&mut idx);
        idx.sort_by_key(|&i| lengths[i]);
        let mut batches: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        r.shuffle(&mut batches);
        batches
    } else {
        idx.sort_by_key(|&i| lengths[i]);
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
