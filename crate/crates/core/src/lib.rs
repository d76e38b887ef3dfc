//! Multispeaker text-to-mel synthesis with a speaker-verification feedback loss.
//!
//! The crate is organised around the two networks and the loop that couples them:
//!
//! * [`audio`]: resampling, log-mel extraction, Griffin-Lim inversion, WAV and MELS I/O.
//! * [`speaker`]: residual CNN verifier with mean/std statistics pooling.
//! * [`synth`]: character encoder, location-sensitive attention decoder, PostNet.
//! * [`training`]: composite loss, frozen-verifier feedback term, training runs.
//! * [`eval`]: trials, EER, cosine similarity, Dep/Indep protocols, embedding export.
//! * [`data`]: manifests, corpus layouts, and the synthetic toy corpus.
//!
//! Batch loops run through [`exec::Exec`], which uses rayon when the `parallel`
//! feature is enabled and reduces results in a fixed order either way.

pub mod audio;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod speaker;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
pub use tensor::Tensor;
