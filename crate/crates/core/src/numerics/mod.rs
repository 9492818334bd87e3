//! Numeric substrate: tensors, complex buffers, FFT, RNG and reverse-mode autodiff.

pub mod complex;
pub mod fft;
pub mod graph;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tensor;

pub use complex::ComplexVector;
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use rng::{derive_seed, Rng};
pub use tensor::{matmul, Tensor};
