//! Dense-tensor engine: tensors, the differentiation tape, primitive layers,
//! FFT, initialization, Adam, and gradient-check machinery.

pub mod adam;
pub mod fft;
pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use tape::{CustomGrad, Gradients, Tape, VarId};
pub use tensor::{Scalar, Tensor};

pub(crate) use tape::{sigmoid, softplus, softplus_inv};
