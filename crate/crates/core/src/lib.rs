//! Budget-constrained latent allocation for hierarchical VAEs, with
//! likelihood-ratio OOD scoring and evaluation.
//!
//! The crate is organised bottom-up: [`numerics`] (tensors, autodiff, RNG),
//! [`likelihoods`], [`hvae`], [`scoring`] and [`metrics`]. [`alloc`] holds the
//! geometric allocation planner and [`datasets`] the data loaders.

pub mod alloc;
pub mod datasets;
pub mod exec;
pub mod hvae;
pub mod likelihoods;
pub mod metrics;
pub mod numerics;
pub mod scoring;

pub use exec::Exec;
