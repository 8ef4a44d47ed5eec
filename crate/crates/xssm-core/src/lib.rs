//! Cross-modal selective state space network for guided depth
//! super-resolution: a from-scratch tensor/autodiff engine, the selective
//! scan recurrence, cross-modal local scanning and matching-transform blocks,
//! the full U-shaped network, and a training/evaluation harness.

pub mod cmls;
pub mod cmmt;
pub mod error;
pub mod gdfn;
pub mod io;
pub mod issm;
pub mod layers;
pub mod net;
pub mod numerics;
pub mod resize;
pub mod s6;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{Scalar, Tape, Tensor, VarId};
