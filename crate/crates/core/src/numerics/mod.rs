//! Dense-array engine underneath every block: shapes, elementwise ops,
//! matmul, softmax, activations, layer norm, seeded init, tensor files,
//! finite differences and operation counting.

mod array;
mod finite_diff;
pub mod flops;
pub mod io;
pub mod ops;
mod rng;

pub use array::{DenseArray, NumericsError, Result, MAX_RANK};
pub use finite_diff::finite_diff;
pub use ops::LAYERNORM_EPS;
pub use rng::Rng;

/// Fan-in scaled uniform init: `U(−1/√fan_in, 1/√fan_in)`.
pub fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> DenseArray {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DenseArray::uniform(shape, -bound, bound, rng)
}
