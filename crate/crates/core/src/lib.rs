//! Generalised mutual-information autoencoder ("Turbo-Sim") training and
//! evaluation over dense stochastic networks, with a toy ttbar event
//! generator standing in for a full simulation chain.
//!
//! Module map:
//! - [`autodiff`]: tape-based reverse-mode differentiation.
//! - [`nnet`]: dense stochastic mappers, initialisation, Adam.
//! - [`turbo`]: the eight-term loss, critics, training loop, MI bound diagnostics.
//! - [`collider`]: paired truth/detector event generation.
//! - [`evalx`]: KS distances, neutrino pz, chi-square mass reconstruction, reports.
//! - [`dataio`]: dataset files, CSV import, standardisation, splitting.

// Range checks are written `!(x > 0.0)` so that NaN fails them too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod binio;
pub mod collider;
pub mod dataio;
pub mod evalx;
pub mod nnet;
pub mod rng;
pub mod turbo;

pub use autodiff::{Shape, Tape, Tensor};

pub use dataio::{Dataset, Standardizer};
pub use nnet::{Mapper, OptimState, ParamSet};
pub use turbo::{Checkpoint, LossBreakdown, TurboModel, TurboWeights};

