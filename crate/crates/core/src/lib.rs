//! Cauchy–Schwarz divergence toolkit and multi-source domain adaptation
//! pipeline for cross-subject motor-imagery EEG decoding.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: dense matrices, Jacobi eigendecomposition, inverse square
//!   roots and a small tape-based reverse-mode gradient engine.
//! - [`kernels`]: Gaussian Gram matrices and bandwidth selection.
//! - [`divergence`]: empirical CS / conditional CS estimators and the
//!   closed-form Gaussian CS divergence.
//! - [`alignment`]: Euclidean Alignment of per-subject trial sets.
//! - [`selection`]: embedding-level source selection, greedy subset search
//!   and classical MDS.
//! - [`model`]: the compact backbone, cross-entropy and Cohen's kappa.
//! - [`adapt`]: source weighting, alignment losses, the loss schedule and the
//!   training loop.
//! - [`synth`]: synthetic multi-subject datasets and the stub embedder.
//! - [`pipeline`]: alignment, selection and training for one target or
//!   leave-one-subject-out.
//! - [`io`]: dataset directory, CSV and checkpoint formats used by the CLI.

pub mod adapt;
pub mod alignment;
pub mod divergence;
pub mod error;
pub mod io;
pub mod kernels;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod selection;
pub mod synth;

pub use error::{Error, Result};
pub use numerics::Mat;
