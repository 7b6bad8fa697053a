//! Hidden Markov models for multivariate continuous longitudinal data with
//! intermittent missing responses and informative dropout.
//!
//! Dropout is represented by an absorbing latent state `k+1`; intermittent
//! gaps are handled under MAR by marginalizing the Gaussian emissions over
//! the unobserved cells.

pub mod error;
pub mod fmm;
pub mod gaussian;
pub mod glm;
pub mod hmm;
pub mod inference;
pub mod labels;
pub mod panel;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use gaussian::{GaussianParams, ObsPattern};
pub use hmm::{fit_hmm, FitOptions, FitResult, HmmParams, Latent};
pub use panel::{PanelDataset, Schema, SubjectRecord};
