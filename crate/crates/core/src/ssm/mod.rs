//! Diagonal state-space layers.
//!
//! A layer is a continuous diagonal system `x' = Λx + Bu, y = Re(Cx) + Du` with
//! `Re Λ < 0`. It is discretized with a zero-order hold at step `Δ`, turned into a
//! length-`L` convolution kernel, and applied to every feature column with the
//! same kernel. In conjugate-pair mode only one state of each pair is stored and
//! the kernel takes twice the real part, which keeps all activations real.

mod conv;
mod hippo;
mod kernel;
mod layer;
mod params;

pub use conv::{convolve, convolve_vjp, CausalConv, ConvolveGrads};
pub use hippo::{hippo_matrix, HippoMatrix};
pub use kernel::{
    discretize, discretize_vjp, kernel_vjp, materialize_kernel, scan, DiscreteGrads, DiscreteSsm,
    Kernel, SsmGrads,
};
pub use layer::{ssm_apply, ssm_layer, SsmVars};
pub use params::{init_s4d, SsmParams, DEFAULT_DT_MAX, DEFAULT_DT_MIN};
