//! Minimal tape-based autodiff: just the layers the denoiser and the probe
//! classifier need, generic over `f32` and `f64`.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;

pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use params::{init_normal, ParamId, ParamStore};
