//! Determined blind source separation with Bayesian non-parametric NMF
//! source models.
//!
//! The crate provides three separation pipelines sharing one demixing back
//! end: auxiliary-function IVA, ILRMA with a fixed number of NMF bases, and a
//! variational model in which every basis carries a reliability weight with a
//! sparse prior, so each source settles on its own effective basis count.

pub mod audio;
pub mod demix;
pub mod error;
pub mod eval;
pub mod gig;
pub mod mixgen;
pub mod model;
pub mod nmf;
pub mod separator;
pub mod stft;
pub mod vb;

pub use error::{Error, GigError, Result, WavError};
pub use model::{
    power_spectrogram, Algorithm, BetaTightening, DemixingStack, Diagnostics, MultichannelSignal,
    SeparationConfig, Spectrogram,
};
