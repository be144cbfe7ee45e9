//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records each operation of a forward pass; [`Tape::backward`]
//! then sweeps it in reverse. Parameters live in [`ParamStore`]s, are copied
//! onto a tape with [`Tape::bind`], and are updated by [`Adam`].

mod adam;
mod error;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamState};
pub use error::{Result, TensorError};
pub use kernels::ConvGeom;
pub use params::{Binding, ParamId, ParamStore};
pub use tape::{Tape, Var};
pub use tensor::{numel, Tensor};
