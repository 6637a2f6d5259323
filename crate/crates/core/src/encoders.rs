//! Encoders that lift tokens, attribute readings and times into `d_model`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::PAD_ID;
use crate::numerics::{init_uniform, ParamId, ParamSet, Rng, Tape, Tensor, Var};

/// Token embedding whose PAD row is zero and never updated.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    pub rows: ParamId,
    pub n_tokens: usize,
    pub d_model: usize,
}

impl EmbeddingTable {
    pub fn new(params: &mut ParamSet, name: &str, n_tokens: usize, d_model: usize, rng: &mut Rng) -> Self {
        let init = init_uniform(&[n_tokens, d_model], n_tokens, rng);
        let rows = params.add_pinned(name, init, &[PAD_ID]);
        Self { rows, n_tokens, d_model }
    }

    /// One row per id, shape `[ids.len() × d_model]`.
    pub fn embed(&self, tape: &mut Tape, params: &ParamSet, ids: &[usize]) -> Result<Var> {
        let table = tape.param(params, self.rows);
        tape.gather(table, ids)
    }
}

pub fn embed_type(params: &ParamSet, table: &EmbeddingTable, id: usize) -> Result<Tensor> {
    if id >= table.n_tokens {
        return Err(Error::Index {
            what: "embedding table",
            index: id,
            len: table.n_tokens,
        });
    }
    Ok(Tensor::vector(params.get(table.rows).row(id).to_vec()))
}

/// Type-conditioned affine encoding of a scalar reading:
/// `W[type] · value + B[type]`.
#[derive(Clone, Debug)]
pub struct ValueEncoder {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_types: usize,
    pub d_model: usize,
}

impl ValueEncoder {
    pub fn new(params: &mut ParamSet, name: &str, n_types: usize, d_model: usize, rng: &mut Rng) -> Self {
        let weight = params.add_pinned(
            format!("{name}.weight"),
            init_uniform(&[n_types, d_model], n_types, rng),
            &[PAD_ID],
        );
        let bias = params.add_pinned(format!("{name}.bias"), Tensor::zeros(&[n_types, d_model]), &[PAD_ID]);
        Self {
            weight,
            bias,
            n_types,
            d_model,
        }
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, ids: &[usize], values: &[f64]) -> Result<Var> {
        if ids.len() != values.len() {
            return Err(Error::Shape {
                op: "encode_value",
                lhs: vec![ids.len()],
                rhs: vec![values.len()],
            });
        }
        let w = tape.param(params, self.weight);
        let b = tape.param(params, self.bias);
        let rows_w = tape.gather(w, ids)?;
        let rows_b = tape.gather(b, ids)?;
        let vals = tape.constant(Tensor::vector(values.to_vec()));
        let scaled = tape.mul_col(rows_w, vals)?;
        tape.add(scaled, rows_b)
    }
}

pub fn encode_value(params: &ParamSet, enc: &ValueEncoder, attr_type_id: usize, value: f64) -> Result<Tensor> {
    if !value.is_finite() {
        return Err(Error::Numeric("attribute value".into()));
    }
    let mut tape = Tape::new();
    let out = enc.encode(&mut tape, params, &[attr_type_id], &[value])?;
    Ok(Tensor::vector(tape.value(out).data().to_vec()))
}

/// Sinusoidal encoding: dimension `2i` is `sin(t / 10000^(2i/d))`,
/// dimension `2i + 1` the matching cosine, for `i = 0..d/2`.
pub fn function_encode(time: f64, d_model: usize) -> Result<Tensor> {
    Ok(Tensor::vector(function_encode_row(time, d_model)?))
}

fn function_encode_row(time: f64, d_model: usize) -> Result<Vec<f64>> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Contract(format!("d_model must be even and positive, got {d_model}")));
    }
    let mut row = Vec::with_capacity(d_model);
    for i in 0..d_model / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / d_model as f64);
        let (s, c) = (time * freq).sin_cos();
        row.push(s);
        row.push(c);
    }
    Ok(row)
}

/// [`function_encode`] for many times at once, shape `[times.len() × d_model]`.
pub fn function_encode_rows(times: &[f64], d_model: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(times.len() * d_model);
    for &t in times {
        data.extend(function_encode_row(t, d_model)?);
    }
    Tensor::new(&[times.len(), d_model], data)
}

/// Two position-wise layers over the time column:
/// `tanh(tanh(t·W1 + b1)·W2 + b2)`, widths `d/2` then `d`.
#[derive(Clone, Debug)]
pub struct ConvTimeEncoder {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_model: usize,
}

impl ConvTimeEncoder {
    pub fn new(params: &mut ParamSet, name: &str, d_model: usize, rng: &mut Rng) -> Result<Self> {
        if d_model < 2 || !d_model.is_multiple_of(2) {
            return Err(Error::Contract(format!("d_model must be even, got {d_model}")));
        }
        let half = d_model / 2;
        Ok(Self {
            w1: params.add(format!("{name}.w1"), init_uniform(&[1, half], 1, rng)),
            b1: params.add(format!("{name}.b1"), Tensor::zeros(&[half])),
            w2: params.add(format!("{name}.w2"), init_uniform(&[half, d_model], half, rng)),
            b2: params.add(format!("{name}.b2"), Tensor::zeros(&[d_model])),
            d_model,
        })
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, times: &[f64]) -> Result<Var> {
        if times.is_empty() {
            return Err(Error::Contract("time encoding needs at least one time".into()));
        }
        let t = tape.constant(Tensor::new(&[times.len(), 1], times.to_vec())?);
        let (w1, b1, w2, b2) = (
            tape.param(params, self.w1),
            tape.param(params, self.b1),
            tape.param(params, self.w2),
            tape.param(params, self.b2),
        );
        let h = tape.matmul(t, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        let o = tape.add_row(o, b2)?;
        Ok(tape.tanh(o))
    }
}

/// Eager form: `times` is `[L × 1]`, output `[L × d_model]`.
pub fn conv_time_encode(params: &ParamSet, enc: &ConvTimeEncoder, times: &Tensor) -> Result<Tensor> {
    if times.cols() != 1 {
        return Err(Error::Shape {
            op: "conv_time_encode",
            lhs: times.shape().to_vec(),
            rhs: vec![times.rows(), 1],
        });
    }
    let mut tape = Tape::new();
    let out = enc.encode(&mut tape, params, times.data())?;
    Ok(tape.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeEncoding {
    #[serde(rename = "fe")]
    Function,
    #[serde(rename = "ce")]
    Convolution,
}

impl TimeEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeEncoding::Function => "fe",
            TimeEncoding::Convolution => "ce",
        }
    }
}

#[derive(Clone, Debug)]
pub enum TimeEncoder {
    Function { d_model: usize },
    Convolution(ConvTimeEncoder),
}

impl TimeEncoder {
    pub fn new(kind: TimeEncoding, params: &mut ParamSet, d_model: usize, rng: &mut Rng) -> Result<Self> {
        Ok(match kind {
            TimeEncoding::Function => {
                function_encode_row(0.0, d_model)?;
                TimeEncoder::Function { d_model }
            }
            TimeEncoding::Convolution => TimeEncoder::Convolution(ConvTimeEncoder::new(params, "time_enc", d_model, rng)?),
        })
    }

    pub fn encode(&self, tape: &mut Tape, params: &ParamSet, times: &[f64]) -> Result<Var> {
        match self {
            TimeEncoder::Function { d_model } => Ok(tape.constant(function_encode_rows(times, *d_model)?)),
            TimeEncoder::Convolution(c) => c.encode(tape, params, times),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradients, Adam, AdamConfig};

    #[test]
    fn pad_row_is_zero_and_lookup_is_stable() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(1);
        let t = EmbeddingTable::new(&mut ps, "emb", 5, 4, &mut rng);
        assert!(embed_type(&ps, &t, 0).unwrap().data().iter().all(|&x| x == 0.0));
        assert_eq!(embed_type(&ps, &t, 3).unwrap(), embed_type(&ps, &t, 3).unwrap());
        assert!(matches!(embed_type(&ps, &t, 5), Err(Error::Index { .. })));
    }

    #[test]
    fn adam_step_touches_only_the_row_with_gradient() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(1);
        let t = EmbeddingTable::new(&mut ps, "emb", 5, 4, &mut rng);
        let before = ps.get(t.rows).clone();
        let mut tape = Tape::new();
        let rows = t.embed(&mut tape, &ps, &[3]).unwrap();
        let s = tape.sum(rows);
        tape.backward(s).unwrap().accumulate_into(&tape, &mut ps).unwrap();
        let mut adam = Adam::new(&ps, AdamConfig::default());
        adam.step(&mut ps).unwrap();
        let after = ps.get(t.rows);
        for r in 0..5 {
            let changed = before.row(r) != after.row(r);
            assert_eq!(changed, r == 3, "row {r}");
        }
    }

    #[test]
    fn value_encoding_examples() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(1);
        let enc = ValueEncoder::new(&mut ps, "val", 3, 2, &mut rng);
        ps.get_mut(enc.weight).data_mut()[4..6].copy_from_slice(&[1.0, 2.0]);
        ps.get_mut(enc.bias).data_mut()[4..6].copy_from_slice(&[0.0, -1.0]);
        assert_eq!(encode_value(&ps, &enc, 2, 3.0).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(encode_value(&ps, &enc, 2, 0.0).unwrap().data(), &[0.0, -1.0]);
        assert_eq!(encode_value(&ps, &enc, 0, 42.0).unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(encode_value(&ps, &enc, 3, 1.0), Err(Error::Index { .. })));
    }

    #[test]
    fn function_encoding_examples() {
        let z = function_encode(0.0, 6).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let q = function_encode(std::f64::consts::FRAC_PI_2, 2).unwrap();
        assert!((q.data()[0] - 1.0).abs() <= 1e-12);
        assert!(q.data()[1].abs() <= 1e-12);
        assert!(function_encode(1.0, 3).is_err());
    }

    #[test]
    fn function_encoding_is_bounded() {
        let mut rng = Rng::new(4);
        for _ in 0..100 {
            let t = rng.uniform(0.0, 1e4);
            assert!(function_encode(t, 16).unwrap().data().iter().all(|x| x.abs() <= 1.0));
        }
    }

    #[test]
    fn conv_encoding_shapes_and_zero_params() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(2);
        let enc = ConvTimeEncoder::new(&mut ps, "ce", 8, &mut rng).unwrap();
        let times = Tensor::new(&[7, 1], vec![0.0, 0.5, 1.0, 1.0, 3.0, 9.0, 20.0]).unwrap();
        let out = conv_time_encode(&ps, &enc, &times).unwrap();
        assert_eq!(out.shape(), &[7, 8]);
        assert!(out.data().iter().all(|x| x.abs() < 1.0));
        assert_eq!(out.row(2), out.row(3));

        for id in [enc.w1, enc.b1, enc.w2, enc.b2] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let zero = conv_time_encode(&ps, &enc, &times).unwrap();
        assert!(zero.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn conv_encoding_gradients() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(3);
        let enc = ConvTimeEncoder::new(&mut ps, "ce", 8, &mut rng).unwrap();
        for id in [enc.b1, enc.b2] {
            ps.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.uniform(-0.5, 0.5));
        }
        let times = [0.0, 0.3, 0.7, 1.2, 2.0];
        let err = check_gradients(&mut ps, 1e-5, |t, p| {
            let out = enc.encode(t, p, &times)?;
            let sq = t.mul(out, out)?;
            Ok(t.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
