//! Post-fit inference: standard errors, model selection, decoding and
//! imputation.

mod bootstrap;
mod decode;
mod impute;
mod information;
mod select;

use serde::Serialize;

use crate::hmm::{HmmParams, Latent};

pub use bootstrap::{bootstrap_se, BootstrapOptions};
pub use decode::{decode_panel, local_decode, path_log_prob, state_frequencies, viterbi_decode, DecodedPanel};
pub use impute::impute_missing;
pub use information::{info_matrix_se, score, theta_to_params, to_unconstrained, InfoOptions};
pub use select::{select_k, SelectionReport, SelectionRow};

/// How missing responses are predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ImputeMode {
    /// `E(Y | y^o, û)` at the locally decoded state.
    Conditional,
    /// `Σ_u ẑ_u E(Y | y^o, u)`.
    Unconditional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeMethod {
    Bootstrap,
    Information,
}

/// Standard errors in the natural parameter layout (see [`natural_layout`]).
#[derive(Debug, Clone, Serialize)]
pub struct StdErrReport {
    pub method: SeMethod,
    pub names: Vec<String>,
    pub estimates: Vec<f64>,
    pub se: Vec<f64>,
    /// Parameter sits on a boundary (probability 0 or capped logit); its SE
    /// is reported as 0.
    pub boundary: Vec<bool>,
    /// Observed information was not positive definite and was floored.
    pub non_pd: bool,
    /// Bootstrap replicates requested.
    pub replicates: usize,
    /// Per replicate: converged without Newton failures.
    pub replicate_ok: Vec<bool>,
    pub n_failed: usize,
}

/// Parameter names and values in the reporting layout: state means
/// `mu[u,j]`, the upper triangle of Σ `sigma[j,l]`, then either `pi[u]`
/// (u ≤ k) and `Pi[v,u]` (v ≤ k, u ≤ k+1), or `beta[u,c]` (u = 2..k) and
/// `gamma[v,u,c]` (u ≠ v). Indices are 1-based; `c = 0` is the intercept.
pub fn natural_layout(params: &HmmParams) -> (Vec<String>, Vec<f64>) {
    let (k, r) = (params.k, params.r());
    let mut names = Vec::new();
    let mut values = Vec::new();
    for u in 0..k {
        for j in 0..r {
            names.push(format!("mu[{},{}]", u + 1, j + 1));
            values.push(params.means[u][j]);
        }
    }
    for j in 0..r {
        for l in j..r {
            names.push(format!("sigma[{},{}]", j + 1, l + 1));
            values.push(params.cov[(j, l)]);
        }
    }
    match &params.latent {
        Latent::Probabilities { initial, transition } => {
            for u in 0..k {
                names.push(format!("pi[{}]", u + 1));
                values.push(initial[u]);
            }
            for v in 0..k {
                for u in 0..=k {
                    names.push(format!("Pi[{},{}]", v + 1, u + 1));
                    values.push(transition[v][u]);
                }
            }
        }
        Latent::Logit { initial, transition } => {
            for u in 1..k {
                for (c, b) in initial.coef[u - 1].iter().enumerate() {
                    names.push(format!("beta[{},{}]", u + 1, c));
                    values.push(*b);
                }
            }
            for v in 0..k {
                for (j, dest) in crate::glm::destinations(k, v).enumerate() {
                    for (c, g) in transition.coef[v][j].iter().enumerate() {
                        names.push(format!("gamma[{},{},{}]", v + 1, dest + 1, c));
                        values.push(*g);
                    }
                }
            }
        }
    }
    (names, values)
}
