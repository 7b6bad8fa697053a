//! Gaussian-emission hidden Markov model with an absorbing dropout state.
//!
//! States are 0-based in code: `0..k` are the substantive states and `k` is
//! the dropout state.

pub mod complete;
mod em;
mod fit;
mod params;
mod recursion;

pub use em::{e_step, m_step, EStep, MStep, OccasionMoments};
pub use fit::{fit_hmm, hmm_starts, run_em, split_start, EmRun, FitOptions, FitResult};
pub use params::{default_latent_probabilities, HmmParams, Latent, TransitionSeq};
pub use recursion::{emission_logdensity, forward_backward, loglik, posteriors, LatentPosterior, SubjectPosterior};

pub(crate) use em::probability_update;
pub(crate) use recursion::{log_emissions, panel_factors};
