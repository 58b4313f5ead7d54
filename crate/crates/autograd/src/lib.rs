//! Numeric substrate for the TEDDN forecaster: dense tensors, tape-based
//! reverse-mode differentiation, a finite-difference oracle and Adam.
//!
//! ```
//! use teddn_autograd::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::new();
//! let w = store.register("w", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
//! let mut tape = Tape::new();
//! let wv = tape.param(&store, w);
//! let sq = tape.mul(wv, wv).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! tape.backward(loss, &mut store).unwrap();
//! assert_eq!(store.get(w).grad.data(), &[2.0, 4.0]);
//! ```

mod adam;
mod error;
pub mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamState};
pub use error::{Result, TensorError};
pub use gradcheck::{finite_difference_grad, max_relative_error, relative_error};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{ElementwiseOp, Gradients, Tape, Var};
pub use tensor::{broadcast_shape, Tensor};

/// Element type of every tensor. `f64` unless the `f32` feature is enabled.
#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Numerically stable logistic function.
pub fn sigmoid(v: Float) -> Float {
    tape::sigmoid(v)
}
