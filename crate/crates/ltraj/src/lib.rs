//! Latent trajectory modeling for grouped image sequences.
//!
//! The pipeline: fixed-length groups of frames are compressed by a two-stage
//! encoder (per-frame spatial stage, then temporal compression) into latent
//! codes, the codes are evolved by a trainable backbone (an augmented
//! neural-ODE vector field, or recurrent baselines), and decoded back to image
//! space. The learned latent space is analyzed with Gaussian-mixture
//! clustering, vector-field equilibrium/flow analysis and linear trait
//! regression.
//!
//! Everything computes on a small deterministic substrate: dense `f64`
//! tensors, a reverse-mode gradient tape, a seeded splittable RNG and Adam.
//!
//! See the crate `examples/` directory for one runnable example per major
//! capability, and the `ltraj` binary for the end-to-end command-line
//! workflow (`generate`, `train`, `predict`, `interpolate`, `cluster`,
//! `flow`, `traits`).

pub mod codec;
pub mod data;
pub mod dynamics;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
