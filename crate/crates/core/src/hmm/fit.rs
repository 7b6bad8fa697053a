use nalgebra::DVector;
use rayon::prelude::*;

use super::em::{e_step, m_step, EStep};
use super::params::{default_latent_probabilities, HmmParams, Latent};
use super::recursion::LatentPosterior;
use crate::error::{Error, Result};
use crate::fmm::{normalized_uniform, quantile_spread, random_means, relative_change};
use crate::gaussian::observed_moments;
use crate::glm::{InitialLogitParams, TransitionLogitParams, LOGIT_CAP};
use crate::labels::order_by_first_mean;
use crate::panel::PanelDataset;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    /// Diagonal weight of the deterministic transition start.
    pub h: f64,
    pub deterministic_start: bool,
    /// Random starts; `None` means `5·k`.
    pub n_random_starts: Option<usize>,
    pub seed: u64,
    /// Model the latent process with the panel's covariates.
    pub covariates: bool,
    /// Additional user-supplied starts, tried after the generated ones.
    pub extra_starts: Vec<HmmParams>,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_iter: 5000,
            h: 9.0,
            deterministic_start: true,
            n_random_starts: None,
            seed: 1,
            covariates: false,
            extra_starts: Vec::new(),
        }
    }
}

impl FitOptions {
    /// A single run from `start`.
    pub fn from_start(start: HmmParams) -> Self {
        FitOptions {
            deterministic_start: false,
            n_random_starts: Some(0),
            covariates: start.has_covariates(),
            extra_starts: vec![start],
            ..Default::default()
        }
    }
}

/// Best-of-starts estimate. States are ordered by their first mean
/// coordinate; the dropout state is last.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: HmmParams,
    pub loglik: f64,
    /// ℓ after each E-step of the winning run (first entry at the start).
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_par: usize,
    pub aic: f64,
    pub bic: f64,
    pub best_start: usize,
    pub n_starts: usize,
    pub failed_starts: usize,
    /// Final log-likelihood per start (`None` when the start failed).
    pub start_logliks: Vec<Option<f64>>,
    /// Failed Newton solves over the winning run.
    pub newton_failures: usize,
    /// Some logit coefficient ended on the ±cap boundary.
    pub separation: bool,
    pub posterior: LatentPosterior,
}

/// One EM run from a single start.
#[derive(Debug, Clone)]
pub struct EmRun {
    pub params: HmmParams,
    pub e: EStep,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub newton_failures: usize,
    pub separation: bool,
}

/// Iterates E- and M-steps from `start` until the relative change in ℓ
/// drops to `tol` or `max_iter` M-steps have run.
pub fn run_em(data: &PanelDataset, start: HmmParams, tol: f64, max_iter: usize) -> Result<EmRun> {
    let mut params = start;
    let mut e = e_step(data, &params)?;
    let mut trace = vec![e.loglik];
    let mut iterations = 0;
    let mut converged = false;
    let mut newton_failures = 0;
    let mut separation = false;
    while iterations < max_iter {
        let m = m_step(data, &e, &params)?;
        newton_failures += m.newton_failures;
        separation = m.separation;
        params = m.params;
        let next = e_step(data, &params)?;
        iterations += 1;
        let change = relative_change(e.loglik, next.loglik);
        trace.push(next.loglik);
        e = next;
        if change <= tol {
            converged = true;
            break;
        }
    }
    Ok(EmRun {
        params,
        e,
        trace,
        iterations,
        converged,
        newton_failures,
        separation,
    })
}

fn response_rows(data: &PanelDataset) -> Vec<&[f64]> {
    data.subjects
        .iter()
        .flat_map(|s| s.responses.iter().zip(&s.dropout).filter(|(_, &d)| !d).map(|(y, _)| y.as_slice()))
        .collect()
}

/// Generated starts: the deterministic one (index 0, if enabled), then the
/// random ones, then `opts.extra_starts`.
pub fn hmm_starts(data: &PanelDataset, k: usize, opts: &FitOptions) -> Result<Vec<HmmParams>> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let mom = observed_moments(response_rows(data), data.r)?;
    let logit = opts.covariates && data.has_covariates();
    let q = 1 + data.p;
    let mut starts = Vec::new();
    if opts.deterministic_start {
        let latent = if logit {
            let mut g = TransitionLogitParams::zeros(k, q);
            let off = (1.0 / (opts.h + 1.0)).ln().clamp(-LOGIT_CAP, LOGIT_CAP);
            for row in g.coef.iter_mut() {
                for c in row.iter_mut() {
                    c[0] = off;
                }
            }
            Latent::Logit {
                initial: InitialLogitParams::zeros(k, q),
                transition: g,
            }
        } else {
            let (initial, transition) = default_latent_probabilities(k, opts.h);
            Latent::Probabilities { initial, transition }
        };
        starts.push(HmmParams {
            k,
            means: quantile_spread(&mom.mean, &mom.sd, k),
            cov: mom.cov.clone(),
            latent,
        });
    }
    for j in 0..opts.n_random_starts.unwrap_or(5 * k) {
        let mut rng = substream(opts.seed, Stream::Starts, j as u64);
        let means = random_means(&mut rng, &mom.mean, &mom.sd, k);
        let mut initial = normalized_uniform(&mut rng, k);
        initial.push(0.0);
        let mut transition: Vec<Vec<f64>> = (0..k).map(|_| normalized_uniform(&mut rng, k + 1)).collect();
        let mut last = vec![0.0; k + 1];
        last[k] = 1.0;
        transition.push(last);
        let latent = if logit {
            Latent::Logit {
                initial: InitialLogitParams::from_probs(&initial[..k], q),
                transition: TransitionLogitParams::from_matrix(&transition, q),
            }
        } else {
            Latent::Probabilities { initial, transition }
        };
        starts.push(HmmParams {
            k,
            means,
            cov: mom.cov.clone(),
            latent,
        });
    }
    for s in &opts.extra_starts {
        if s.k != k {
            return Err(Error::InvalidInput(format!("supplied start has k = {}, expected {k}", s.k)));
        }
        s.validate()?;
        s.check_panel(data)?;
        starts.push(s.clone());
    }
    Ok(starts)
}

/// Multi-start EM for the HMM with k substantive states and a dropout
/// state. Starts run in parallel; the winner is the largest final ℓ, ties to
/// the lowest start index. Starts that fail (degenerate state, impossible
/// observation, …) are logged and skipped.
pub fn fit_hmm(data: &PanelDataset, k: usize, opts: &FitOptions) -> Result<FitResult> {
    let starts = hmm_starts(data, k, opts)?;
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starts requested".into()));
    }
    let n_starts = starts.len();
    let runs: Vec<Result<EmRun>> = starts
        .into_par_iter()
        .map(|s| run_em(data, s, opts.tol, opts.max_iter))
        .collect();
    let start_logliks = runs.iter().map(|r| r.as_ref().ok().map(|r| r.e.loglik)).collect();
    let mut best: Option<(usize, EmRun)> = None;
    let mut failed = 0;
    let mut last_err = None;
    for (j, run) in runs.into_iter().enumerate() {
        match run {
            Ok(run) => {
                if best.as_ref().is_none_or(|(_, b)| run.e.loglik > b.e.loglik) {
                    best = Some((j, run));
                }
            }
            Err(err) => {
                log::debug!("start {j} failed: {err}");
                failed += 1;
                last_err = Some(err);
            }
        }
    }
    let (best_start, run) = best.ok_or_else(|| {
        Error::FitFailed(last_err.map_or_else(|| "no start succeeded".into(), |e| e.to_string()))
    })?;
    let perm = order_by_first_mean(&run.params.means);
    let params = run.params.permuted(&perm);
    let posterior = run.e.posterior.permuted(&perm);
    let loglik = run.e.loglik;
    let n_par = params.n_par();
    Ok(FitResult {
        aic: -2.0 * loglik + 2.0 * n_par as f64,
        bic: -2.0 * loglik + (data.n() as f64).ln() * n_par as f64,
        n_par,
        params,
        loglik,
        trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
        best_start,
        n_starts,
        failed_starts: failed,
        start_logliks,
        newton_failures: run.newton_failures,
        separation: run.separation,
        posterior,
    })
}

/// Start for k+1 states built from a k-state solution by splitting the state
/// with the largest expected occupancy: its mean is duplicated and moved by
/// ∓`shift` standard deviations, its incoming mass halved. With `shift = 0`
/// the start reproduces the k-state likelihood exactly. Logit parameters are
/// split through intercept shifts of log 1/2, which halves the mass for every
/// covariate value.
pub fn split_start(params: &HmmParams, posterior: &LatentPosterior, shift: f64) -> Option<HmmParams> {
    let k = params.k;
    let mut occ = vec![0.0; k];
    for sp in &posterior.subjects {
        for z in &sp.marginals {
            for u in 0..k {
                occ[u] += z[u];
            }
        }
    }
    let s = crate::fmm::argmax(&occ);
    let sd = DVector::from_fn(params.r(), |j, _| params.cov[(j, j)].sqrt());
    let mut means = params.means.clone();
    means[s] = &params.means[s] - &sd * shift;
    means.push(&params.means[s] + &sd * shift);
    // new substantive state k copies s; dropout moves from k to k+1
    let nk = k + 1;
    let old = |u: usize| if u == k { s } else if u == nk { k } else { u };
    let halved = |u: usize| u == s || u == k;
    let latent = match &params.latent {
        Latent::Probabilities { initial, transition } => {
            let mut init = vec![0.0; nk + 1];
            for u in 0..nk {
                init[u] = initial[old(u)] * if halved(u) { 0.5 } else { 1.0 };
            }
            let mut tr = vec![vec![0.0; nk + 1]; nk + 1];
            for a in 0..nk {
                for b in 0..=nk {
                    tr[a][b] = transition[old(a)][old(b)] * if halved(b) { 0.5 } else { 1.0 };
                }
            }
            tr[nk][nk] = 1.0;
            Latent::Probabilities {
                initial: init,
                transition: tr,
            }
        }
        Latent::Logit { initial, transition } => {
            let q = initial.q;
            let c = |u: usize| if halved(u) { 0.5_f64.ln() } else { 0.0 };
            // linear predictor of old state u relative to state 0
            let beta = |u: usize| if u == 0 { vec![0.0; q] } else { initial.coef[u - 1].clone() };
            let mut b = InitialLogitParams::zeros(nk, q);
            for u in 1..nk {
                let mut row = beta(old(u));
                row[0] += c(u) - c(0);
                b.coef[u - 1] = row;
            }
            // predictor of old destination d from old origin o, relative to o
            let gamma = |o: usize, d: usize| -> Vec<f64> {
                if o == d {
                    return vec![0.0; q];
                }
                let j = crate::glm::destinations(k, o).position(|x| x == d).expect("non-self destination");
                transition.coef[o][j].clone()
            };
            let mut g = TransitionLogitParams::zeros(nk, q);
            for a in 0..nk {
                for (j, dest) in crate::glm::destinations(nk, a).enumerate() {
                    let mut row = gamma(old(a), old(dest));
                    row[0] += c(dest) - c(a);
                    g.coef[a][j] = row;
                }
            }
            Latent::Logit {
                initial: b,
                transition: g,
            }
        }
    };
    HmmParams::new(means, params.cov.clone(), latent).ok()
}
