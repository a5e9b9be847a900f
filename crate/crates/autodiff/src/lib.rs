//! Dense tensors on a reverse-mode gradient tape, an Adam optimizer and a
//! finite-difference gradient checker.
//!
//! Values live in a [`ParamStore`] (trainable) or on a [`Tape`] (everything
//! computed during one forward pass). A forward pass binds parameters onto a
//! tape, applies primitives, and a single [`Tape::backward`] call returns
//! [`Gradients`] that are then written back into the store:
//!
//! ```
//! use autodiff::{ParamStore, Tape, Tensor};
//!
//! let mut store = ParamStore::<f64>::new();
//! let w = store.add("w", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap()).unwrap();
//! let grads = {
//!     let mut tape = Tape::new(&store);
//!     let x = tape.param(w).unwrap();
//!     let sq = tape.mul(x, x).unwrap();
//!     let loss = tape.sum(sq).unwrap();
//!     tape.backward(loss).unwrap()
//! };
//! store.set_grads(&grads);
//! assert_eq!(store.grad(w).data(), &[2.0, 4.0]);
//! ```

mod adam;
mod element;
mod error;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState, StepOutcome};
pub use element::{DType, Element};
pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, EXP_CLAMP};
pub use tensor::Tensor;
