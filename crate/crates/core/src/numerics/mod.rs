//! Dense tensors, the differentiation tape, Adam, gradient checking and
//! the seeded generator everything else builds on.

mod adam;
mod gradcheck;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use gradcheck::check_gradients;
pub use params::{init_uniform, Param, ParamId, ParamSet};
pub use rng::Rng;
pub use tape::{sigmoid, Gradients, Tape, Var, PROB_EPS};
pub(crate) use tape::{gate_openness, gate_phase};
pub use tensor::Tensor;
