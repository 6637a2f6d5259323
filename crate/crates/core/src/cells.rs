//! Recurrent cells, the classifier head and the sequence loss.
//!
//! All cells share one peephole LSTM core. Given the previous state
//! `(c, h)` and an input row `x`:
//!
//! ```text
//! i  = σ(x·W_xi + h·W_hi + w_ci ⊙ c + b_i)
//! f  = σ(x·W_xf + h·W_hf + w_cf ⊙ c + b_f)
//! c̃  = f ⊙ c + i ⊙ tanh(x·W_xc + h·W_hc + b_c)
//! c' = g ⊙ c̃ + (1 − g) ⊙ c
//! o  = σ(x·W_xo + h·W_ho + w_co ⊙ c' + b_o)
//! h̃  = o ⊙ tanh(c̃)
//! h' = g ⊙ h̃ + (1 − g) ⊙ h
//! ```
//!
//! The cells differ only in the interpolation coefficient `g`: none for
//! the plain LSTM, the time gate `k` for Phased LSTM, and the feature gate
//! `s = ReLU(tanh(x·W_xh + b_h)·W_hs + b_s) ⊙ k` for FG-LSTM. Where `g`
//! is exactly zero the state is carried over bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gate_openness, gate_phase, init_uniform, ParamId, ParamSet, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lstm,
    Bilstm,
    Phased,
    Fglstm,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::Bilstm => "bilstm",
            ModelKind::Phased => "phased",
            ModelKind::Fglstm => "fglstm",
        }
    }
}

/// Weights of the shared LSTM core. Column blocks of `w_x`, `w_h` and
/// `bias` are ordered input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    pub peep_i: ParamId,
    pub peep_f: ParamId,
    pub peep_o: ParamId,
    pub input: usize,
    pub hidden: usize,
}

pub const FORGET_BIAS_INIT: f64 = 1.0;

impl LstmParams {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].iter_mut().for_each(|b| *b = FORGET_BIAS_INIT);
        Self {
            w_x: params.add(format!("{name}.w_x"), init_uniform(&[input, 4 * hidden], input, rng)),
            w_h: params.add(format!("{name}.w_h"), init_uniform(&[hidden, 4 * hidden], hidden, rng)),
            bias: params.add(format!("{name}.bias"), bias),
            peep_i: params.add(format!("{name}.w_ci"), init_uniform(&[hidden], hidden, rng)),
            peep_f: params.add(format!("{name}.w_cf"), init_uniform(&[hidden], hidden, rng)),
            peep_o: params.add(format!("{name}.w_co"), init_uniform(&[hidden], hidden, rng)),
            input,
            hidden,
        }
    }

    /// `x·W_x + bias` for every row of `x` at once.
    pub fn project_inputs(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let w = tape.param(params, self.w_x);
        let b = tape.param(params, self.bias);
        let z = tape.matmul(x, w)?;
        tape.add_row(z, b)
    }

    /// One step from projected inputs `x_proj: [B × 4h]`. With `gate` of
    /// `None` the candidate state is returned directly.
    pub fn step(&self, tape: &mut Tape, params: &ParamSet, state: CellVars, x_proj: Var, gate: Option<Var>) -> Result<CellVars> {
        let h = self.hidden;
        let w_h = tape.param(params, self.w_h);
        let (pi, pf, po) = (
            tape.param(params, self.peep_i),
            tape.param(params, self.peep_f),
            tape.param(params, self.peep_o),
        );
        let rec = tape.matmul(state.h, w_h)?;
        let z = tape.add(x_proj, rec)?;
        let zi = tape.slice_cols(z, 0, h)?;
        let zf = tape.slice_cols(z, h, h)?;
        let zc = tape.slice_cols(z, 2 * h, h)?;
        let zo = tape.slice_cols(z, 3 * h, h)?;

        let ci = tape.mul_row(state.c, pi)?;
        let i_pre = tape.add(zi, ci)?;
        let i = tape.sigmoid(i_pre);
        let cf = tape.mul_row(state.c, pf)?;
        let f_pre = tape.add(zf, cf)?;
        let f = tape.sigmoid(f_pre);
        let cand = tape.tanh(zc);
        let keep = tape.mul(f, state.c)?;
        let write = tape.mul(i, cand)?;
        let c_tilde = tape.add(keep, write)?;

        let c_new = match gate {
            Some(g) => tape.gate_mix(g, c_tilde, state.c)?,
            None => c_tilde,
        };
        let co = tape.mul_row(c_new, po)?;
        let o_pre = tape.add(zo, co)?;
        let o = tape.sigmoid(o_pre);
        let squashed = tape.tanh(c_tilde);
        let h_tilde = tape.mul(o, squashed)?;
        let h_new = match gate {
            Some(g) => tape.gate_mix(g, h_tilde, state.h)?,
            None => h_tilde,
        };
        Ok(CellVars { c: c_new, h: h_new })
    }
}

/// Phased-LSTM openness per hidden unit.
#[derive(Clone, Debug)]
pub struct TimeGateParams {
    pub tau: ParamId,
    pub shift: ParamId,
    pub r_on: ParamId,
    pub alpha: f64,
    pub hidden: usize,
}

pub const TAU_MIN: f64 = 1e-3;
pub const R_ON_MIN: f64 = 1e-3;
pub const R_ON_MAX: f64 = 0.999;

impl TimeGateParams {
    /// `tau` log-uniform in `[1, max(max_time, 1)]`, `shift` uniform in `[0, tau]`.
    pub fn new(params: &mut ParamSet, name: &str, hidden: usize, max_time: f64, r_on: f64, alpha: f64, rng: &mut Rng) -> Self {
        let hi = max_time.max(1.0).ln();
        let tau: Vec<f64> = (0..hidden).map(|_| rng.uniform(0.0, hi).exp()).collect();
        let shift: Vec<f64> = tau.iter().map(|&t| rng.uniform(0.0, t)).collect();
        Self {
            tau: params.add(format!("{name}.tau"), Tensor::vector(tau)),
            shift: params.add(format!("{name}.shift"), Tensor::vector(shift)),
            r_on: params.add(format!("{name}.r_on"), Tensor::filled(&[hidden], r_on)),
            alpha,
            hidden,
        }
    }

    /// Openness for each time, `[times.len() × hidden]`.
    pub fn gate(&self, tape: &mut Tape, params: &ParamSet, times: &[f64]) -> Result<Var> {
        let tau = tape.param(params, self.tau);
        let shift = tape.param(params, self.shift);
        let r_on = tape.param(params, self.r_on);
        tape.time_gate(tau, shift, r_on, times, self.alpha)
    }

    /// Keeps `tau` positive and `r_on` inside `(0, 1)` after an update.
    pub fn project(&self, params: &mut ParamSet) {
        params.get_mut(self.tau).data_mut().iter_mut().for_each(|t| *t = t.max(TAU_MIN));
        params
            .get_mut(self.r_on)
            .data_mut()
            .iter_mut()
            .for_each(|r| *r = r.clamp(R_ON_MIN, R_ON_MAX));
    }
}

/// Openness of every unit at time `t`.
pub fn time_gate(params: &ParamSet, p: &TimeGateParams, t: f64) -> Result<Tensor> {
    if !t.is_finite() {
        return Err(Error::Numeric("time gate input".into()));
    }
    let (tau, shift, r_on) = (params.get(p.tau).data(), params.get(p.shift).data(), params.get(p.r_on).data());
    let k = (0..p.hidden)
        .map(|j| gate_openness(gate_phase(t, tau[j], shift[j]), r_on[j], p.alpha))
        .collect();
    Ok(Tensor::vector(k))
}

#[derive(Clone, Debug)]
pub struct FeatureGateParams {
    pub w_xh: ParamId,
    pub b_h: ParamId,
    pub w_hs: ParamId,
    pub b_s: ParamId,
    pub width: usize,
    pub hidden: usize,
}

impl FeatureGateParams {
    pub fn new(params: &mut ParamSet, name: &str, input: usize, width: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w_xh: params.add(format!("{name}.w_xh"), init_uniform(&[input, width], input, rng)),
            b_h: params.add(format!("{name}.b_h"), Tensor::zeros(&[width])),
            w_hs: params.add(format!("{name}.w_hs"), init_uniform(&[width, hidden], width, rng)),
            b_s: params.add(format!("{name}.b_s"), Tensor::zeros(&[hidden])),
            width,
            hidden,
        }
    }

    /// `ReLU(tanh(x·W_xh + b_h)·W_hs + b_s)` for every row of `x`.
    pub fn filter(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Result<Var> {
        let (w_xh, b_h, w_hs, b_s) = (
            tape.param(params, self.w_xh),
            tape.param(params, self.b_h),
            tape.param(params, self.w_hs),
            tape.param(params, self.b_s),
        );
        let a = tape.matmul(x, w_xh)?;
        let a = tape.add_row(a, b_h)?;
        let a = tape.tanh(a);
        let s = tape.matmul(a, w_hs)?;
        let s = tape.add_row(s, b_s)?;
        Ok(tape.relu(s))
    }
}

/// Feature gate `s = filter(x) ⊙ k`.
pub fn feature_gate(params: &ParamSet, p: &FeatureGateParams, x_t: &Tensor, k_t: &Tensor) -> Result<Tensor> {
    if k_t.len() != p.hidden {
        return Err(Error::Shape {
            op: "feature_gate",
            lhs: k_t.shape().to_vec(),
            rhs: vec![p.hidden],
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(x_t.reshape(&[1, x_t.len()])?);
    let f = p.filter(&mut tape, params, x)?;
    let k = tape.constant(k_t.reshape(&[1, p.hidden])?);
    let s = tape.mul(f, k)?;
    Ok(Tensor::vector(tape.value(s).data().to_vec()))
}

#[derive(Clone, Debug)]
pub struct PhasedParams {
    pub lstm: LstmParams,
    pub time: TimeGateParams,
}

#[derive(Clone, Debug)]
pub struct FgLstmParams {
    pub lstm: LstmParams,
    pub feature: FeatureGateParams,
    pub time: TimeGateParams,
}

/// Cell state held on a tape, `[B × hidden]` each.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub c: Var,
    pub h: Var,
}

impl CellVars {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Self {
        Self {
            c: tape.constant(Tensor::zeros(&[batch, hidden])),
            h: tape.constant(Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// Cell state of a single sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub c: Tensor,
    pub h: Tensor,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            c: Tensor::zeros(&[hidden]),
            h: Tensor::zeros(&[hidden]),
        }
    }
}

fn eager_step(params: &ParamSet, lstm: &LstmParams, state: &CellState, x_t: &Tensor, gate: Option<&Tensor>) -> Result<CellState> {
    if x_t.len() != lstm.input {
        return Err(Error::Shape {
            op: "cell step",
            lhs: x_t.shape().to_vec(),
            rhs: vec![lstm.input],
        });
    }
    let h = lstm.hidden;
    if state.c.len() != h || state.h.len() != h || gate.is_some_and(|g| g.len() != h) {
        return Err(Error::Shape {
            op: "cell state",
            lhs: state.c.shape().to_vec(),
            rhs: vec![h],
        });
    }
    let mut tape = Tape::new();
    let c = tape.constant(state.c.reshape(&[1, h])?);
    let hv = tape.constant(state.h.reshape(&[1, h])?);
    let x = tape.constant(x_t.reshape(&[1, x_t.len()])?);
    let xp = lstm.project_inputs(&mut tape, params, x)?;
    let g = match gate {
        Some(g) => Some(tape.constant(g.reshape(&[1, h])?)),
        None => None,
    };
    let next = lstm.step(&mut tape, params, CellVars { c, h: hv }, xp, g)?;
    Ok(CellState {
        c: Tensor::vector(tape.value(next.c).data().to_vec()),
        h: Tensor::vector(tape.value(next.h).data().to_vec()),
    })
}

/// Peephole LSTM step (no interpolation).
pub fn lstm_step(params: &ParamSet, p: &LstmParams, state: &CellState, x_t: &Tensor) -> Result<CellState> {
    eager_step(params, p, state, x_t, None)
}

/// Core step with an explicit interpolation coefficient per unit.
pub fn gated_lstm_step(params: &ParamSet, p: &LstmParams, state: &CellState, x_t: &Tensor, gate: &Tensor) -> Result<CellState> {
    eager_step(params, p, state, x_t, Some(gate))
}

pub fn phased_lstm_step(params: &ParamSet, p: &PhasedParams, state: &CellState, x_t: &Tensor, t: f64) -> Result<CellState> {
    let k = time_gate(params, &p.time, t)?;
    eager_step(params, &p.lstm, state, x_t, Some(&k))
}

/// FG-LSTM step with the time gate evaluated at `t`.
pub fn fg_lstm_step(params: &ParamSet, p: &FgLstmParams, state: &CellState, x_t: &Tensor, t: f64) -> Result<CellState> {
    let k = time_gate(params, &p.time, t)?;
    fg_lstm_step_with_time_gate(params, p, state, x_t, &k)
}

/// FG-LSTM step with a caller-supplied time gate `k_t`.
pub fn fg_lstm_step_with_time_gate(params: &ParamSet, p: &FgLstmParams, state: &CellState, x_t: &Tensor, k_t: &Tensor) -> Result<CellState> {
    let s = feature_gate(params, &p.feature, x_t, k_t)?;
    eager_step(params, &p.lstm, state, x_t, Some(&s))
}

/// Any of the four recurrent variants.
#[derive(Clone, Debug)]
pub enum RecurrentModel {
    Lstm(LstmParams),
    BiLstm { forward: LstmParams, backward: LstmParams },
    Phased(PhasedParams),
    FgLstm(FgLstmParams),
}

/// Hidden states of a batched unroll.
#[derive(Clone, Copy, Debug)]
pub struct RunOutput {
    /// `[steps·B × width]`, time-major like the inputs.
    pub per_step: Var,
    /// `[B × width]`, the state after each sequence's last event.
    pub last: Var,
}

impl RecurrentModel {
    pub fn new(kind: ModelKind, params: &mut ParamSet, input: usize, hidden: usize, gate: &GateConfig, rng: &mut Rng) -> Self {
        match kind {
            ModelKind::Lstm => RecurrentModel::Lstm(LstmParams::new(params, "lstm", input, hidden, rng)),
            ModelKind::Bilstm => RecurrentModel::BiLstm {
                forward: LstmParams::new(params, "lstm_fwd", input, hidden, rng),
                backward: LstmParams::new(params, "lstm_bwd", input, hidden, rng),
            },
            ModelKind::Phased => RecurrentModel::Phased(PhasedParams {
                lstm: LstmParams::new(params, "lstm", input, hidden, rng),
                time: TimeGateParams::new(params, "time_gate", hidden, gate.max_time, gate.r_on, gate.alpha, rng),
            }),
            ModelKind::Fglstm => RecurrentModel::FgLstm(FgLstmParams {
                lstm: LstmParams::new(params, "lstm", input, hidden, rng),
                feature: FeatureGateParams::new(params, "feature_gate", input, gate.feature_width, hidden, rng),
                time: TimeGateParams::new(params, "time_gate", hidden, gate.max_time, gate.r_on, gate.alpha, rng),
            }),
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            RecurrentModel::Lstm(p) => p.hidden,
            RecurrentModel::BiLstm { forward, .. } => forward.hidden,
            RecurrentModel::Phased(p) => p.lstm.hidden,
            RecurrentModel::FgLstm(p) => p.lstm.hidden,
        }
    }

    /// Width of the per-step output (doubled for the bidirectional model).
    pub fn output_width(&self) -> usize {
        match self {
            RecurrentModel::BiLstm { .. } => 2 * self.hidden(),
            _ => self.hidden(),
        }
    }

    pub fn time_gate(&self) -> Option<&TimeGateParams> {
        match self {
            RecurrentModel::Phased(p) => Some(&p.time),
            RecurrentModel::FgLstm(p) => Some(&p.time),
            _ => None,
        }
    }

    /// Unrolls over a padded batch. Inputs are `[steps·B × d]` with row
    /// `t·B + b` holding step `t` of sequence `b`; `mask` is 1 for real
    /// events and 0 for padding, which leaves the state untouched.
    pub fn run(&self, tape: &mut Tape, params: &ParamSet, inputs: Var, times: &[f64], mask: &[f64], batch: usize) -> Result<RunOutput> {
        let n = tape.value(inputs).rows();
        if batch == 0 || !n.is_multiple_of(batch) || times.len() != n || mask.len() != n {
            return Err(Error::Contract(format!(
                "batched run needs rows divisible by batch with one time and mask per row ({n} rows, batch {batch})"
            )));
        }
        let steps = n / batch;
        let hidden = self.hidden();
        let all_real = mask.iter().all(|&m| m == 1.0);
        let mask_var = tape.constant(Tensor::vector(mask.to_vec()));

        let gates = match self {
            RecurrentModel::Lstm(_) | RecurrentModel::BiLstm { .. } => {
                if all_real {
                    None
                } else {
                    let ones = tape.constant(Tensor::filled(&[n, hidden], 1.0));
                    Some(tape.mul_col(ones, mask_var)?)
                }
            }
            RecurrentModel::Phased(p) => {
                let k = p.time.gate(tape, params, times)?;
                Some(tape.mul_col(k, mask_var)?)
            }
            RecurrentModel::FgLstm(p) => {
                let k = p.time.gate(tape, params, times)?;
                let f = p.feature.filter(tape, params, inputs)?;
                let s = tape.mul(f, k)?;
                Some(tape.mul_col(s, mask_var)?)
            }
        };

        let unroll = |tape: &mut Tape, lstm: &LstmParams, reverse: bool| -> Result<(Vec<Var>, CellVars)> {
            let proj = lstm.project_inputs(tape, params, inputs)?;
            let mut state = CellVars::zeros(tape, batch, hidden);
            let mut outs = vec![state.h; steps];
            let order: Box<dyn Iterator<Item = usize>> = if reverse {
                Box::new((0..steps).rev())
            } else {
                Box::new(0..steps)
            };
            for t in order {
                let x_t = tape.slice_rows(proj, t * batch, batch)?;
                let g_t = match gates {
                    Some(g) => Some(tape.slice_rows(g, t * batch, batch)?),
                    None => None,
                };
                state = lstm.step(tape, params, state, x_t, g_t)?;
                outs[t] = state.h;
            }
            Ok((outs, state))
        };

        match self {
            RecurrentModel::BiLstm { forward, backward } => {
                let (fwd, f_last) = unroll(tape, forward, false)?;
                let (bwd, b_last) = unroll(tape, backward, true)?;
                let mut rows = Vec::with_capacity(steps);
                for (a, b) in fwd.into_iter().zip(bwd) {
                    rows.push(tape.concat_cols(&[a, b])?);
                }
                Ok(RunOutput {
                    per_step: tape.concat_rows(&rows)?,
                    last: tape.concat_cols(&[f_last.h, b_last.h])?,
                })
            }
            RecurrentModel::Lstm(lstm) => {
                let (outs, last) = unroll(tape, lstm, false)?;
                Ok(RunOutput {
                    per_step: tape.concat_rows(&outs)?,
                    last: last.h,
                })
            }
            RecurrentModel::Phased(PhasedParams { lstm, .. }) | RecurrentModel::FgLstm(FgLstmParams { lstm, .. }) => {
                let (outs, last) = unroll(tape, lstm, false)?;
                Ok(RunOutput {
                    per_step: tape.concat_rows(&outs)?,
                    last: last.h,
                })
            }
        }
    }
}

/// Time- and feature-gate settings used when building gated cells.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateConfig {
    pub max_time: f64,
    pub r_on: f64,
    pub alpha: f64,
    pub feature_width: usize,
}

/// Hidden states `h_1..h_L` of one sequence, `[L × width]`.
pub fn run_sequence(params: &ParamSet, model: &RecurrentModel, inputs: &Tensor, times: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(inputs.clone());
    let mask = vec![1.0; times.len()];
    let out = model.run(&mut tape, params, x, times, &mask, 1)?;
    Ok(tape.value(out.per_step).clone())
}

/// Two linear maps with a ReLU between them, then softmax over two classes.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    pub fn new(params: &mut ParamSet, input: usize, width: usize, rng: &mut Rng) -> Self {
        Self {
            w1: params.add("head.w1", init_uniform(&[input, width], input, rng)),
            b1: params.add("head.b1", Tensor::zeros(&[width])),
            w2: params.add("head.w2", init_uniform(&[width, 2], width, rng)),
            b2: params.add("head.b2", Tensor::zeros(&[2])),
        }
    }

    /// Class probabilities `[M × 2]` for hidden rows `[M × input]`.
    pub fn apply(&self, tape: &mut Tape, params: &ParamSet, h: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (
            tape.param(params, self.w1),
            tape.param(params, self.b1),
            tape.param(params, self.w2),
            tape.param(params, self.b2),
        );
        let a = tape.matmul(h, w1)?;
        let a = tape.add_row(a, b1)?;
        let a = tape.relu(a);
        let logits = tape.matmul(a, w2)?;
        let logits = tape.add_row(logits, b2)?;
        Ok(tape.softmax_rows(logits))
    }
}

/// `(P(class 0), P(class 1))` for one hidden vector.
pub fn classify(params: &ParamSet, head: &HeadParams, h: &Tensor) -> Result<(f64, f64)> {
    if !h.is_finite() {
        return Err(Error::Numeric("classifier input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(h.reshape(&[1, h.len()])?);
    let p = head.apply(&mut tape, params, x)?;
    let d = tape.value(p).data();
    Ok((d[0], d[1]))
}

/// Mean binary cross-entropy over the steps of one sequence, with the
/// sequence label as the target of every step.
pub fn sequence_loss(preds: &[f64], label: u8) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Contract("sequence_loss needs at least one prediction".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::vector(preds.to_vec()));
    let loss = sequence_loss_var(&mut tape, p, label)?;
    Ok(tape.value(loss).data()[0])
}

/// Tape form of [`sequence_loss`]; `preds` holds class-1 probabilities.
pub fn sequence_loss_var(tape: &mut Tape, preds: Var, label: u8) -> Result<Var> {
    let n = tape.value(preds).len();
    let y = f64::from(label);
    tape.weighted_bce(preds, &vec![y; n], &vec![1.0 / n as f64; n])
}
