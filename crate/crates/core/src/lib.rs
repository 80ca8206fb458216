//! Unsupervised reconstruction of view-shared dynamic MR angiography.
//!
//! Phantom generation, the k-space sampling model, GRAPPA, image metrics,
//! the U-Net generator and patch critic, the cycle-consistent losses and the
//! training loop live here. File formats and the command line live in the
//! experiment crate.

pub mod baselines;
pub mod checkpoint;
pub mod error;
pub mod fft;
pub mod grappa;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod phantom;
pub mod sampling;
pub mod training;

pub use error::{Error, Result};
