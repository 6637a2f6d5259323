//! Tape of primitive tensor ops for reverse-mode differentiation.
//!
//! Each forward call appends a node holding its output value and the op
//! that produced it. [`Tape::backward`] walks the nodes in reverse order,
//! accumulating `∂loss/∂node` into the parents of every node reached.
//! Parameters enter the tape through [`Tape::param`]; the gradients that
//! reach them can be pushed into a [`ParamSet`] with
//! [`Gradients::accumulate_into`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_nt_acc, matmul_tn_acc};
use crate::numerics::{ParamId, ParamSet, Tensor};

/// Node handle on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sin(Var),
    Scale(Var, f64),
    GateMix { gate: Var, new: Var, old: Var },
    Gather { table: Var, ids: Vec<usize> },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    SoftmaxRows(Var),
    Bce { probs: Var, targets: Vec<f64>, weights: Vec<f64> },
    Sum(Var),
    TimeGate { tau: Var, shift: Var, r_on: Var, times: Vec<f64>, alpha: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Probability clamp used by the cross-entropy op.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Phase within the period, in `[0, 1)`.
pub(crate) fn gate_phase(t: f64, tau: f64, shift: f64) -> f64 {
    let phi = (t - shift).rem_euclid(tau) / tau;
    if phi >= 1.0 {
        0.0
    } else {
        phi
    }
}

/// Triangular open phase of width `r_on`, linear leak elsewhere.
pub(crate) fn gate_openness(phi: f64, r_on: f64, alpha: f64) -> f64 {
    if phi < 0.5 * r_on {
        2.0 * phi / r_on
    } else if phi < r_on {
        2.0 - 2.0 * phi / r_on
    } else {
        alpha * phi
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Total number of stored scalars across all node values.
    pub fn stored_scalars(&self) -> usize {
        self.nodes.iter().map(|n| n.value.len()).sum()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a parameter; repeated calls return the same node.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut value = params.get(id).clone();
        value.take_grad();
        let v = self.push(value, Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.dims() != tb.dims() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    fn broadcast_row(&mut self, a: Var, row: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tr) = (self.value(a), self.value(row));
        let (r, c) = ta.dims();
        if tr.len() != c {
            return Err(shape_err(name, ta, tr));
        }
        let mut data = ta.data().to_vec();
        for i in 0..r {
            for (x, &y) in data[i * c..(i + 1) * c].iter_mut().zip(tr.data()) {
                *x = f(*x, y);
            }
        }
        Tensor::new(ta.shape(), data)
    }

    fn broadcast_col(&mut self, a: Var, col: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tc) = (self.value(a), self.value(col));
        let (r, c) = ta.dims();
        if tc.len() != r {
            return Err(shape_err(name, ta, tc));
        }
        let mut data = ta.data().to_vec();
        for (i, &y) in tc.data().iter().enumerate() {
            for x in &mut data[i * c..(i + 1) * c] {
                *x = f(*x, y);
            }
        }
        Tensor::new(ta.shape(), data)
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, "add_row", |x, y| x + y)?;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    /// `a[i, j] + col[i]`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast_col(a, col, "add_col", |x, y| x + y)?;
        Ok(self.push(out, Op::AddCol(a, col)))
    }

    /// `a[i, j] · row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.broadcast_row(a, row, "mul_row", |x, y| x * y)?;
        Ok(self.push(out, Op::MulRow(a, row)))
    }

    /// `a[i, j] · col[i]`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let out = self.broadcast_col(a, col, "mul_col", |x, y| x * y)?;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let ta = self.value(a);
        Tensor::new(ta.shape(), ta.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map(a, sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.map(a, f64::sin);
        self.push(out, Op::Sin(a))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.map(a, |x| k * x);
        self.push(out, Op::Scale(a, k))
    }

    /// `gate·new + (1 − gate)·old`, returning `old` (resp. `new`) bit for
    /// bit wherever the gate is exactly 0 (resp. 1).
    pub fn gate_mix(&mut self, gate: Var, new: Var, old: Var) -> Result<Var> {
        let (tg, tn, to) = (self.value(gate), self.value(new), self.value(old));
        if tg.len() != tn.len() || tn.len() != to.len() {
            return Err(shape_err("gate_mix", tg, tn));
        }
        let data = tg
            .data()
            .iter()
            .zip(tn.data().iter().zip(to.data()))
            .map(|(&g, (&n, &o))| {
                if g == 0.0 {
                    o
                } else if g == 1.0 {
                    n
                } else {
                    g * n + (1.0 - g) * o
                }
            })
            .collect();
        let out = Tensor::new(tn.shape(), data)?;
        Ok(self.push(out, Op::GateMix { gate, new, old }))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (n, c) = tt.dims();
        if ids.is_empty() {
            return Err(Error::Contract("gather with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= n {
                return Err(Error::Index {
                    what: "embedding table",
                    index: id,
                    len: n,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(&[ids.len(), c], data)?;
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let ts = self.value(src);
        let (r, c) = ts.dims();
        if len == 0 || start + len > r {
            return Err(Error::Index {
                what: "row slice end",
                index: start + len,
                len: r,
            });
        }
        let out = Tensor::new(&[len, c], ts.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(out, Op::SliceRows { src, start }))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let ts = self.value(src);
        let (r, c) = ts.dims();
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "column slice end",
                index: start + len,
                len: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&ts.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(&[r, len], data)?;
        Ok(self.push(out, Op::SliceCols { src, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let tp = self.value(p);
            if tp.cols() != c {
                return Err(shape_err("concat_rows", self.value(first), tp));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let r = self.value(first).rows();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(shape_err("concat_cols", self.value(first), self.value(p)));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let out = Tensor::new(shape, ts.data().to_vec()).map_err(|_| Error::Shape {
            op: "reshape",
            lhs: ts.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(out, Op::Reshape(src)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = ta.dims();
        let mut data = ta.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            row.iter_mut().for_each(|x| *x /= z);
        }
        let out = Tensor::new(ta.shape(), data).expect("same shape");
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `−Σ wᵢ [yᵢ ln p̂ᵢ + (1 − yᵢ) ln(1 − p̂ᵢ)]` with `p̂` clamped to
    /// `[ε, 1 − ε]`.
    pub fn weighted_bce(&mut self, probs: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let tp = self.value(probs);
        if tp.len() != targets.len() || tp.len() != weights.len() {
            return Err(Error::Shape {
                op: "weighted_bce",
                lhs: tp.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let mut loss = 0.0;
        for ((&p, &y), &w) in tp.data().iter().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            loss -= w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Per-unit periodic openness at each time: rows follow `times`,
    /// columns follow the unit vectors `tau`, `shift`, `r_on`.
    pub fn time_gate(&mut self, tau: Var, shift: Var, r_on: Var, times: &[f64], alpha: f64) -> Result<Var> {
        let (tt, ts, tr) = (self.value(tau), self.value(shift), self.value(r_on));
        let h = tt.len();
        if ts.len() != h || tr.len() != h {
            return Err(shape_err("time_gate", tt, ts));
        }
        if times.is_empty() {
            return Err(Error::Contract("time_gate with no times".into()));
        }
        let mut data = Vec::with_capacity(times.len() * h);
        for &t in times {
            for j in 0..h {
                let phi = gate_phase(t, tt.data()[j], ts.data()[j]);
                data.push(gate_openness(phi, tr.data()[j], alpha));
            }
        }
        let out = Tensor::new(&[times.len(), h], data)?;
        Ok(self.push(
            out,
            Op::TimeGate {
                tau,
                shift,
                r_on,
                times: times.to_vec(),
                alpha,
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        macro_rules! acc {
            ($v:expr) => {
                slot(nodes, grads, $v)
            };
        }
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = ta.dims();
                let n = tb.cols();
                matmul_nt_acc(g, tb.data(), acc!(*a), m, n, k);
                matmul_tn_acc(ta.data(), g, acc!(*b), m, k, n);
            }
            Op::Add(a, b) => {
                add_into(acc!(*a), g);
                add_into(acc!(*b), g);
            }
            Op::Sub(a, b) => {
                add_into(acc!(*a), g);
                acc!(*b).iter_mut().zip(g).for_each(|(x, y)| *x -= y);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc!(*a).iter_mut().zip(g.iter().zip(tb)).for_each(|(x, (gi, bi))| *x += gi * bi);
                acc!(*b).iter_mut().zip(g.iter().zip(ta)).for_each(|(x, (gi, ai))| *x += gi * ai);
            }
            Op::AddRow(a, row) => {
                add_into(acc!(*a), g);
                let c = out.cols();
                let ga = acc!(*row);
                for chunk in g.chunks(c) {
                    add_into(ga, chunk);
                }
            }
            Op::AddCol(a, col) => {
                add_into(acc!(*a), g);
                let c = out.cols();
                let gc = acc!(*col);
                for (x, chunk) in gc.iter_mut().zip(g.chunks(c)) {
                    *x += chunk.iter().sum::<f64>();
                }
            }
            Op::MulRow(a, row) => {
                let c = out.cols();
                let (ta, tr) = (nodes[a.0].value.data(), nodes[row.0].value.data());
                let ga = acc!(*a);
                for (gchunk, xchunk) in g.chunks(c).zip(ga.chunks_mut(c)) {
                    for ((x, gi), ri) in xchunk.iter_mut().zip(gchunk).zip(tr) {
                        *x += gi * ri;
                    }
                }
                let gr = acc!(*row);
                for (gchunk, achunk) in g.chunks(c).zip(ta.chunks(c)) {
                    for ((x, gi), ai) in gr.iter_mut().zip(gchunk).zip(achunk) {
                        *x += gi * ai;
                    }
                }
            }
            Op::MulCol(a, col) => {
                let c = out.cols();
                let (ta, tc) = (nodes[a.0].value.data(), nodes[col.0].value.data());
                let ga = acc!(*a);
                for ((xchunk, gchunk), &ci) in ga.chunks_mut(c).zip(g.chunks(c)).zip(tc) {
                    for (x, gi) in xchunk.iter_mut().zip(gchunk) {
                        *x += gi * ci;
                    }
                }
                let gc = acc!(*col);
                for ((x, gchunk), achunk) in gc.iter_mut().zip(g.chunks(c)).zip(ta.chunks(c)) {
                    *x += gchunk.iter().zip(achunk).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            Op::Tanh(a) => {
                let y = out.data();
                acc!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(x, (gi, yi))| *x += gi * (1.0 - yi * yi));
            }
            Op::Sigmoid(a) => {
                let y = out.data();
                acc!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(x, (gi, yi))| *x += gi * yi * (1.0 - yi));
            }
            Op::Relu(a) => {
                let y = out.data();
                acc!(*a).iter_mut().zip(g.iter().zip(y)).for_each(|(x, (gi, yi))| {
                    if *yi > 0.0 {
                        *x += gi
                    }
                });
            }
            Op::Sin(a) => {
                let xs = nodes[a.0].value.data();
                acc!(*a).iter_mut().zip(g.iter().zip(xs)).for_each(|(x, (gi, xi))| *x += gi * xi.cos());
            }
            Op::Scale(a, k) => {
                acc!(*a).iter_mut().zip(g).for_each(|(x, gi)| *x += k * gi);
            }
            Op::GateMix { gate, new, old } => {
                let (tg, tn, to) = (
                    nodes[gate.0].value.data(),
                    nodes[new.0].value.data(),
                    nodes[old.0].value.data(),
                );
                acc!(*gate)
                    .iter_mut()
                    .zip(g.iter().zip(tn.iter().zip(to)))
                    .for_each(|(x, (gi, (n, o)))| *x += gi * (n - o));
                acc!(*new).iter_mut().zip(g.iter().zip(tg)).for_each(|(x, (gi, s))| *x += gi * s);
                acc!(*old).iter_mut().zip(g.iter().zip(tg)).for_each(|(x, (gi, s))| *x += gi * (1.0 - s));
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                let gt = acc!(*table);
                for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                }
            }
            Op::SliceRows { src, start } => {
                let c = out.cols();
                let gs = acc!(*src);
                add_into(&mut gs[start * c..start * c + g.len()], g);
            }
            Op::SliceCols { src, start } => {
                let (r, len) = out.dims();
                let c = nodes[src.0].value.cols();
                let gs = acc!(*src);
                for i in 0..r {
                    add_into(&mut gs[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    add_into(acc!(p), &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims();
                let mut col = 0;
                for &p in parts {
                    let w = nodes[p.0].value.cols();
                    let gp = acc!(p);
                    for i in 0..r {
                        add_into(&mut gp[i * w..(i + 1) * w], &g[i * total + col..i * total + col + w]);
                    }
                    col += w;
                }
            }
            Op::Reshape(src) => add_into(acc!(*src), g),
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let ga = acc!(*a);
                for ((xchunk, gchunk), ychunk) in ga.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                    let dot: f64 = gchunk.iter().zip(ychunk).map(|(p, q)| p * q).sum();
                    for ((x, gi), yi) in xchunk.iter_mut().zip(gchunk).zip(ychunk) {
                        *x += yi * (gi - dot);
                    }
                }
            }
            Op::Bce { probs, targets, weights } => {
                let tp = nodes[probs.0].value.data();
                let gp = acc!(*probs);
                for (((x, &p), &y), &w) in gp.iter_mut().zip(tp).zip(targets).zip(weights) {
                    if w == 0.0 || p <= PROB_EPS || p >= 1.0 - PROB_EPS {
                        continue;
                    }
                    *x -= g[0] * w * (y / p - (1.0 - y) / (1.0 - p));
                }
            }
            Op::Sum(a) => acc!(*a).iter_mut().for_each(|x| *x += g[0]),
            Op::TimeGate { tau, shift, r_on, times, alpha } => {
                let h = out.cols();
                let (tt, ts, tr) = (
                    nodes[tau.0].value.data().to_vec(),
                    nodes[shift.0].value.data().to_vec(),
                    nodes[r_on.0].value.data().to_vec(),
                );
                let mut d_tau = vec![0.0; h];
                let mut d_shift = vec![0.0; h];
                let mut d_r = vec![0.0; h];
                for (b, &t) in times.iter().enumerate() {
                    for j in 0..h {
                        let gi = g[b * h + j];
                        if gi == 0.0 {
                            continue;
                        }
                        let (tau_j, r) = (tt[j], tr[j]);
                        let phi = gate_phase(t, tau_j, ts[j]);
                        let (dk_dphi, dk_dr) = if phi < 0.5 * r {
                            (2.0 / r, -2.0 * phi / (r * r))
                        } else if phi < r {
                            (-2.0 / r, 2.0 * phi / (r * r))
                        } else {
                            (*alpha, 0.0)
                        };
                        d_tau[j] += gi * dk_dphi * (-(t - ts[j]) / (tau_j * tau_j));
                        d_shift[j] += gi * dk_dphi * (-1.0 / tau_j);
                        d_r[j] += gi * dk_dr;
                    }
                }
                add_into(acc!(*tau), &d_tau);
                add_into(acc!(*shift), &d_shift);
                add_into(acc!(*r_on), &d_r);
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![0.0; n])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Raw gradient for every parameter bound on `tape` that was reached.
    pub fn param_grads<'a>(&'a self, tape: &'a Tape) -> impl Iterator<Item = (ParamId, &'a [f64])> + 'a {
        let mut bound: Vec<_> = tape.bound.iter().map(|(&id, &v)| (id, v)).collect();
        bound.sort_by_key(|(id, _)| *id);
        bound.into_iter().filter_map(move |(id, v)| self.wrt(v).map(|g| (id, g)))
    }

    /// Adds parameter gradients into `params` grad slots (pinned rows dropped).
    pub fn accumulate_into(&self, tape: &Tape, params: &mut ParamSet) -> Result<()> {
        for (id, g) in self.param_grads(tape) {
            if let Some(bad) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "gradient of {} at index {bad}",
                    params.name(id)
                )));
            }
            params.accumulate(id, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    /// Central-difference check of `build` w.r.t. every leaf in `inputs`.
    fn fd_check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
        let eval = |xs: &[Tensor]| {
            let mut tape = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
            let out = build(&mut tape, &vs);
            (tape.value(out).data()[0], tape, vs, out)
        };
        let (_, tape, vs, out) = eval(&inputs);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vs[k]).map(|g| g.to_vec()).unwrap_or(vec![0.0; x.len()]);
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                worst = worst.max((a - fd).abs() / 1f64.max(a.abs()).max(fd.abs()));
            }
        }
        worst
    }

    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = Rng::new(42);
        for _ in 0..5 {
            let (m, k, n) = (1 + rng.below(4), 1 + rng.below(4), 1 + rng.below(4));
            let a = rand_tensor(&mut rng, &[m, k]);
            let b = rand_tensor(&mut rng, &[k, n]);
            let c = rand_tensor(&mut rng, &[m, n]);
            let row = rand_tensor(&mut rng, &[n]);
            let col = rand_tensor(&mut rng, &[m]);
            let err = fd_check(vec![a, b, c, row, col], |t, v| {
                let p = t.matmul(v[0], v[1]).unwrap();
                let q = t.add_row(p, v[3]).unwrap();
                let q = t.mul_col(q, v[4]).unwrap();
                let q = t.tanh(q);
                let r = t.mul(q, v[2]).unwrap();
                let r = t.sub(r, v[2]).unwrap();
                let r = t.mul_row(r, v[3]).unwrap();
                let r = t.add_col(r, v[4]).unwrap();
                let s = t.sigmoid(r);
                let s2 = t.sin(s);
                let s3 = t.add(s, s2).unwrap();
                let s4 = t.scale(s3, 0.7);
                t.sum(s4)
            });
            assert!(err <= 1e-4, "err {err}");
        }
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = Rng::new(9);
        let a = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let table = rand_tensor(&mut rng, &[5, 3]);
        let gate = Tensor::new(&[4, 3], (0..12).map(|_| rng.uniform(0.05, 0.95)).collect()).unwrap();
        let err = fd_check(vec![a, b, table, gate], |t, v| {
            let cat = t.concat_cols(&[v[0], v[1]]).unwrap();
            let s = t.slice_cols(cat, 1, 3).unwrap();
            let gth = t.gather(v[2], &[1, 4, 1, 0]).unwrap();
            let mix = t.gate_mix(v[3], s, gth).unwrap();
            let top = t.slice_rows(mix, 0, 2).unwrap();
            let bot = t.slice_rows(mix, 2, 2).unwrap();
            let stacked = t.concat_rows(&[bot, top]).unwrap();
            let flat = t.reshape(stacked, &[2, 2, 3]).unwrap();
            let back = t.reshape(flat, &[6, 2]).unwrap();
            let sm = t.softmax_rows(back);
            let r = t.relu(sm);
            let p = t.slice_cols(r, 1, 1).unwrap();
            let targets = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
            let weights = [0.5, 0.1, 0.2, 0.3, 0.4, 0.0];
            t.weighted_bce(p, &targets, &weights).unwrap()
        });
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn time_gate_matches_finite_differences() {
        let tau = Tensor::vector(vec![3.0, 5.0, 7.5, 2.2]);
        let shift = Tensor::vector(vec![0.3, 1.1, 2.0, 0.9]);
        let r_on = Tensor::vector(vec![0.3, 0.4, 0.5, 0.6]);
        let times = [0.2, 1.0, 2.7, 4.4, 6.35, 9.45];
        let err = fd_check(vec![tau, shift, r_on], |t, v| {
            let k = t.time_gate(v[0], v[1], v[2], &times, 0.01).unwrap();
            let sq = t.mul(k, k).unwrap();
            t.sum(sq)
        });
        assert!(err <= 1e-4, "err {err}");
    }

    #[test]
    fn gate_mix_endpoints_are_exact() {
        let mut t = Tape::new();
        let g = t.constant(Tensor::vector(vec![0.0, 1.0]));
        let new = t.constant(Tensor::vector(vec![3.0, 0.1 + 0.2]));
        let old = t.constant(Tensor::vector(vec![-0.0, 7.0]));
        let m = t.gate_mix(g, new, old).unwrap();
        let out = t.value(m).data();
        assert_eq!(out[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(out[1].to_bits(), (0.1f64 + 0.2).to_bits());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn param_binding_is_cached_and_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Tensor::vector(vec![2.0, 3.0]));
        let mut t = Tape::new();
        let a = t.param(&ps, id);
        let b = t.param(&ps, id);
        assert_eq!(a, b);
        let sq = t.mul(a, b).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        g.accumulate_into(&t, &mut ps).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[4.0, 6.0]);
    }
}
