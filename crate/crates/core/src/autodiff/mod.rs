//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! sweeps it once in reverse. Model weights live in a [`ParamStore`] and are
//! bound to a tape through a [`Binding`], which marks frozen parameters as
//! not requiring gradients.

mod params;
mod tape;
mod tensor;

pub use params::{accumulate_grads, sgd_step, value_and_grad, Binding, ParamStore};
pub use tape::{concat_rows, Elementwise, Gradients, Tape, Var};
pub use tensor::{matmul, Tensor};

#[cfg(test)]
mod tests;
