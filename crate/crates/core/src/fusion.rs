//! Fusion of event, attribute and time features into one `d_model` vector
//! per position.
//!
//! Feature maps are stacked as channels, `[C × (N·d)]`, so a 1×1
//! convolution over channels is a single `[C_out × C_in]` matmul plus a
//! per-channel bias. Every stage is position-wise: output row `i` depends
//! on input row `i` only.

use serde::{Deserialize, Serialize};

use crate::encoders::{EmbeddingTable, ValueEncoder};
use crate::error::{Error, Result};
use crate::events::ATTR_SLOTS;
use crate::numerics::{init_uniform, ParamId, ParamSet, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NonTemporalFusion {
    Paper,
    Additive,
}

impl NonTemporalFusion {
    pub fn as_str(self) -> &'static str {
        match self {
            NonTemporalFusion::Paper => "paper",
            NonTemporalFusion::Additive => "additive",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TemporalFusion {
    #[serde(rename = "add")]
    Add,
    #[serde(rename = "conv-add")]
    ConvAdd,
    #[serde(rename = "conv-add-flat")]
    ConvAddFlat,
}

impl TemporalFusion {
    pub fn as_str(self) -> &'static str {
        match self {
            TemporalFusion::Add => "add",
            TemporalFusion::ConvAdd => "conv-add",
            TemporalFusion::ConvAddFlat => "conv-add-flat",
        }
    }
}

/// 1×1 convolution across channels: `W[out × in] · X[in × M] + b[out]`.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ChannelMix {
    pub fn new(params: &mut ParamSet, name: &str, in_channels: usize, out_channels: usize, rng: &mut Rng) -> Self {
        Self {
            weight: params.add(
                format!("{name}.weight"),
                init_uniform(&[out_channels, in_channels], in_channels, rng),
            ),
            bias: params.add(format!("{name}.bias"), Tensor::zeros(&[out_channels])),
            in_channels,
            out_channels,
        }
    }

    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let y = tape.matmul(w, x)?;
        tape.add_col(y, b)
    }
}

/// Attribute-side encoders: `V_t` embeds the attribute type, `V_u`
/// encodes the reading conditioned on that type.
#[derive(Clone, Debug)]
pub struct AttributeEncoders {
    pub types: EmbeddingTable,
    pub values: ValueEncoder,
}

impl AttributeEncoders {
    pub fn new(params: &mut ParamSet, n_attr_types: usize, d_model: usize, rng: &mut Rng) -> Self {
        Self {
            types: EmbeddingTable::new(params, "attr_type_emb", n_attr_types, d_model, rng),
            values: ValueEncoder::new(params, "attr_value_enc", n_attr_types, d_model, rng),
        }
    }

    /// `V_t ⊙ V_u` for each slot, each `[N × d]`.
    pub fn slot_features(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        attr_ids: &[[usize; ATTR_SLOTS]],
        attr_values: &[[f64; ATTR_SLOTS]],
    ) -> Result<[Var; ATTR_SLOTS]> {
        if attr_ids.len() != attr_values.len() {
            return Err(Error::Shape {
                op: "slot_features",
                lhs: vec![attr_ids.len()],
                rhs: vec![attr_values.len()],
            });
        }
        let mut out = Vec::with_capacity(ATTR_SLOTS);
        for j in 0..ATTR_SLOTS {
            let ids: Vec<usize> = attr_ids.iter().map(|a| a[j]).collect();
            let vals: Vec<f64> = attr_values.iter().map(|a| a[j]).collect();
            let vt = self.types.embed(tape, params, &ids)?;
            let vu = self.values.encode(tape, params, &ids, &vals)?;
            out.push(tape.mul(vt, vu)?);
        }
        Ok(out.try_into().expect("three slots"))
    }
}

#[derive(Clone, Debug)]
pub struct NonTemporalFusionParams {
    pub attr_up: ChannelMix,
    pub attr_down: ChannelMix,
    pub stack_up: ChannelMix,
    pub stack_down: ChannelMix,
}

impl NonTemporalFusionParams {
    pub fn new(params: &mut ParamSet, attr_channels: usize, stack_channels: usize, rng: &mut Rng) -> Self {
        Self {
            attr_up: ChannelMix::new(params, "fuse.attr_up", ATTR_SLOTS, attr_channels, rng),
            attr_down: ChannelMix::new(params, "fuse.attr_down", attr_channels, 1, rng),
            stack_up: ChannelMix::new(params, "fuse.stack_up", 2, stack_channels, rng),
            stack_down: ChannelMix::new(params, "fuse.stack_down", stack_channels, 1, rng),
        }
    }
}

fn as_channel(tape: &mut Tape, x: Var) -> Result<Var> {
    let n = tape.value(x).len();
    tape.reshape(x, &[1, n])
}

fn up_tanh_down(tape: &mut Tape, params: &ParamSet, up: &ChannelMix, down: &ChannelMix, x: Var) -> Result<Var> {
    let h = up.apply(tape, params, x)?;
    let h = tape.tanh(h);
    down.apply(tape, params, h)
}

/// Batched non-temporal fusion over `N` positions; `event_emb` is `[N × d]`.
///
/// 1. per slot `V_t ⊙ V_u`, stacked as 3 channels;
/// 2. mix 3 → `C_a`, tanh, mix `C_a` → 1;
/// 3. stack `[event; attributes]`, mix 2 → `C_s`, tanh, mix `C_s` → 1.
pub fn fuse_nontemporal_batch(
    tape: &mut Tape,
    params: &ParamSet,
    fusion: &NonTemporalFusionParams,
    enc: &AttributeEncoders,
    event_emb: Var,
    attr_ids: &[[usize; ATTR_SLOTS]],
    attr_values: &[[f64; ATTR_SLOTS]],
) -> Result<Var> {
    let shape = tape.value(event_emb).shape().to_vec();
    let slots = enc.slot_features(tape, params, attr_ids, attr_values)?;
    let mut channels = Vec::with_capacity(ATTR_SLOTS);
    for s in slots {
        channels.push(as_channel(tape, s)?);
    }
    let stacked = tape.concat_rows(&channels)?;
    let attr = up_tanh_down(tape, params, &fusion.attr_up, &fusion.attr_down, stacked)?;
    let ev = as_channel(tape, event_emb)?;
    let pair = tape.concat_rows(&[ev, attr])?;
    let fused = up_tanh_down(tape, params, &fusion.stack_up, &fusion.stack_down, pair)?;
    tape.reshape(fused, &shape)
}

/// Batched additive baseline: `V_e + Σ_slots V_t ⊙ V_u`.
pub fn fuse_additive_batch(
    tape: &mut Tape,
    params: &ParamSet,
    enc: &AttributeEncoders,
    event_emb: Var,
    attr_ids: &[[usize; ATTR_SLOTS]],
    attr_values: &[[f64; ATTR_SLOTS]],
) -> Result<Var> {
    let slots = enc.slot_features(tape, params, attr_ids, attr_values)?;
    let mut acc = event_emb;
    for s in slots {
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

fn single_event_slots(attr_types: &[usize], attr_values: &[f64]) -> Result<([usize; ATTR_SLOTS], [f64; ATTR_SLOTS])> {
    if attr_types.len() != ATTR_SLOTS || attr_values.len() != ATTR_SLOTS {
        return Err(Error::Contract(format!(
            "expected {ATTR_SLOTS} attribute slots, got {} types and {} values",
            attr_types.len(),
            attr_values.len()
        )));
    }
    Ok((
        attr_types.try_into().expect("checked length"),
        attr_values.try_into().expect("checked length"),
    ))
}

/// Non-temporal fusion of one event. `event_emb` has `d_model` entries.
pub fn fuse_nontemporal(
    params: &ParamSet,
    fusion: &NonTemporalFusionParams,
    enc: &AttributeEncoders,
    event_emb: &Tensor,
    attr_types: &[usize],
    attr_values: &[f64],
) -> Result<Tensor> {
    let (ids, vals) = single_event_slots(attr_types, attr_values)?;
    let mut tape = Tape::new();
    let e = tape.constant(event_emb.reshape(&[1, event_emb.len()])?);
    let out = fuse_nontemporal_batch(&mut tape, params, fusion, enc, e, &[ids], &[vals])?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

pub fn fuse_additive_baseline(
    params: &ParamSet,
    enc: &AttributeEncoders,
    event_emb: &Tensor,
    attr_types: &[usize],
    attr_values: &[f64],
) -> Result<Tensor> {
    let (ids, vals) = single_event_slots(attr_types, attr_values)?;
    let mut tape = Tape::new();
    let e = tape.constant(event_emb.reshape(&[1, event_emb.len()])?);
    let out = fuse_additive_batch(&mut tape, params, enc, e, &[ids], &[vals])?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

/// Fusion of non-temporal features with the time encoding.
#[derive(Clone, Debug)]
pub struct TemporalFusionParams {
    pub mode: TemporalFusion,
    pub up: Option<ChannelMix>,
    pub down: Option<ChannelMix>,
}

impl TemporalFusionParams {
    pub fn new(params: &mut ParamSet, mode: TemporalFusion, channels: usize, rng: &mut Rng) -> Self {
        let (up, down) = match mode {
            TemporalFusion::Add => (None, None),
            TemporalFusion::ConvAdd => (
                Some(ChannelMix::new(params, "temporal.up", 2, channels, rng)),
                Some(ChannelMix::new(params, "temporal.down", channels, 1, rng)),
            ),
            TemporalFusion::ConvAddFlat => (None, Some(ChannelMix::new(params, "temporal.down", 2, 1, rng))),
        };
        Self { mode, up, down }
    }

    /// `x` and `t_enc` are both `[L × d]`; so is the result.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, x: Var, t_enc: Var) -> Result<Var> {
        let (sx, st) = (tape.value(x).shape().to_vec(), tape.value(t_enc).shape().to_vec());
        if sx != st {
            return Err(Error::Shape {
                op: "fuse_temporal",
                lhs: sx,
                rhs: st,
            });
        }
        if self.mode == TemporalFusion::Add {
            return tape.add(x, t_enc);
        }
        let cx = as_channel(tape, x)?;
        let ct = as_channel(tape, t_enc)?;
        let pair = tape.concat_rows(&[cx, ct])?;
        let down = self.down.as_ref().expect("conv modes have a down projection");
        let fused = match &self.up {
            Some(up) => up_tanh_down(tape, params, up, down, pair)?,
            None => {
                let y = down.apply(tape, params, pair)?;
                tape.tanh(y)
            }
        };
        tape.reshape(fused, &sx)
    }
}

pub fn fuse_temporal(params: &ParamSet, fusion: &TemporalFusionParams, x: &Tensor, t_enc: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let vx = tape.constant(x.clone());
    let vt = tape.constant(t_enc.clone());
    let out = fusion.apply(&mut tape, params, vx, vt)?;
    Ok(tape.value(out).clone())
}
