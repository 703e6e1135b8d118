//! Mixture-model clustering for Siamese self-supervised representation learning.
//!
//! The crate is organised bottom-up:
//!
//! - [`vmf`]: the von Mises-Fisher distribution (normalizer, density, estimators, sampler).
//! - [`mixture`]: the vMF mixture engine: seeding, E/M steps, merging, PCA-corrected
//!   concentrations, snapshots.
//! - [`losses`]: soft-assignment, instance and negative-sampling losses with exact gradients.
//! - [`encoder`]: a small Siamese MLP with a momentum branch and hand-written backward pass.
//! - [`trainer`]: the epoch loop tying clustering and representation learning together.
//! - [`evaluate`]: AMI, majority-label accuracy and a linear probe.
//! - [`data`]: synthetic mixtures and dataset files.
//! - [`cli`]: the `siammm` command-line front end.

pub mod cli;
pub mod data;
pub mod encoder;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod mixture;
pub mod trainer;
pub mod vmf;

pub use error::{Error, Result};
