//! Explorable learned tone mapping.
//!
//! An HDR radiance map is split into a base and a detail layer by per-pixel
//! kernels predicted from a latent-conditioned network, the layers are
//! compressed and recombined into an LDR image, and the latent code can be
//! searched by gradient ascent on a differentiable TMQI score.

pub mod error;
pub mod hdrio;
pub mod latentopt;
pub mod networks;
pub mod pipeline;
pub mod synth;
pub mod tensorgrad;
pub mod tmqi;
pub mod training;

pub use error::{Error, Result};
