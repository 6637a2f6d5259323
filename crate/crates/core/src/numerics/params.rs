use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Handle into a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Rows whose gradient is discarded before every update (PAD rows).
    pub pinned_rows: Vec<usize>,
}

/// Named learnable tensors. Gradients accumulate in each tensor's grad slot.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            pinned_rows: Vec::new(),
        });
        ParamId(self.params.len() - 1)
    }

    /// Adds a table whose listed rows are zeroed now and never updated.
    pub fn add_pinned(&mut self, name: impl Into<String>, mut value: Tensor, rows: &[usize]) -> ParamId {
        let c = value.cols();
        for &r in rows {
            value.data_mut()[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
        let id = self.add(name, value);
        self.params[id.0].pinned_rows = rows.to_vec();
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `grad` into the slot of `id`, dropping pinned rows.
    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.len() != p.value.len() {
            return Err(Error::Shape {
                op: "accumulate",
                lhs: p.value.shape().to_vec(),
                rhs: vec![grad.len()],
            });
        }
        let c = p.value.cols();
        let pinned = p.pinned_rows.clone();
        let slot = p.value.grad_mut();
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
        for r in pinned {
            slot[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Replaces values from `other`, which must hold identically named and shaped tensors.
    pub fn copy_values_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(Error::Contract("parameter count differs".into()));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Shape {
                    op: "copy_values_from",
                    lhs: dst.value.shape().to_vec(),
                    rhs: src.value.shape().to_vec(),
                });
            }
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }
}

/// Uniform in `±1/√fan_in`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinned_rows_start_zero_and_drop_gradient() {
        let mut rng = Rng::new(1);
        let mut ps = ParamSet::new();
        let id = ps.add_pinned("emb", init_uniform(&[3, 2], 3, &mut rng), &[0]);
        assert_eq!(&ps.get(id).data()[..2], &[0.0, 0.0]);
        ps.accumulate(id, &[1.0; 6]).unwrap();
        assert_eq!(ps.get(id).grad().unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn init_respects_bound() {
        let mut rng = Rng::new(2);
        let t = init_uniform(&[16, 4], 16, &mut rng);
        assert!(t.data().iter().all(|x| x.abs() <= 0.25));
    }
}
