//! Finite mixtures of multivariate Gaussians with MAR responses.
//!
//! Rows are cross-sectional observations; missing cells (NaN) are
//! marginalized in the likelihood and filled by conditional expectations in
//! the M-step.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::{
    check_covariance, factor_table, observed_moments, regularize, symmetrize, ConditionalMoments, ObsPattern,
    PatternFactor,
};
use crate::glm::{design_row, initial_probs_design, maximize_initial, InitialLogitParams};
use crate::inference::ImputeMode;
use crate::labels::order_by_first_mean;
use crate::rng::{substream, Stream};

/// Occupancy below which a component counts as empty.
pub const MIN_OCCUPANCY: f64 = 1e-10;
/// Smallest accepted eigenvalue ratio of a component-specific covariance.
pub const MIN_RCOND: f64 = 1e-12;

/// Cross-sectional observations with optional per-row covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct FmmData {
    pub y: Vec<Vec<f64>>,
    pub patterns: Vec<ObsPattern>,
    pub x: Option<Vec<Vec<f64>>>,
}

impl FmmData {
    pub fn new(y: Vec<Vec<f64>>, x: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let r = y.first().map_or(0, |row| row.len());
        if r == 0 {
            return Err(Error::InvalidInput("need at least one row with one response".into()));
        }
        if y.iter().any(|row| row.len() != r) {
            return Err(Error::InvalidInput("rows differ in length".into()));
        }
        if let Some(x) = &x {
            let p = x.first().map_or(0, |row| row.len());
            if x.len() != y.len() || x.iter().any(|row| row.len() != p || row.iter().any(|v| !v.is_finite())) {
                return Err(Error::InvalidInput("covariates must be complete, one row per observation".into()));
            }
        }
        let patterns = y.iter().map(|row| ObsPattern::from_values(row)).collect();
        Ok(FmmData { y, patterns, x })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn r(&self) -> usize {
        self.y[0].len()
    }

    pub fn p(&self) -> usize {
        self.x.as_ref().map_or(0, |x| x[0].len())
    }

    fn observed(&self, i: usize) -> Vec<f64> {
        self.patterns[i].select(&self.y[i])
    }
}

/// Mixing weights: plain probabilities or a multinomial logit in covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum FmmWeights {
    Probabilities(Vec<f64>),
    Logit(InitialLogitParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FmmParams {
    pub k: usize,
    pub means: Vec<DVector<f64>>,
    /// k matrices, or a single shared one when homoscedastic.
    pub covs: Vec<DMatrix<f64>>,
    pub weights: FmmWeights,
}

impl FmmParams {
    pub fn new(means: Vec<DVector<f64>>, covs: Vec<DMatrix<f64>>, weights: FmmWeights) -> Result<Self> {
        let params = FmmParams {
            k: means.len(),
            means,
            covs,
            weights,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 || self.means.len() != k {
            return Err(Error::InvalidInput("need k ≥ 1 means".into()));
        }
        let r = self.means[0].len();
        if self.means.iter().any(|m| m.len() != r || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("means must be finite with equal length".into()));
        }
        if self.covs.len() != 1 && self.covs.len() != k {
            return Err(Error::InvalidInput("need one covariance or one per component".into()));
        }
        for c in &self.covs {
            if c.nrows() != r || c.ncols() != r {
                return Err(Error::InvalidInput("covariance dimension mismatch".into()));
            }
            check_covariance(c)?;
        }
        match &self.weights {
            FmmWeights::Probabilities(w) => {
                if w.len() != k || w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput("weights must be a probability vector of length k".into()));
                }
            }
            FmmWeights::Logit(b) => {
                if b.k != k {
                    return Err(Error::InvalidInput("logit weights have the wrong component count".into()));
                }
            }
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.means[0].len()
    }

    pub fn homoscedastic(&self) -> bool {
        self.covs.len() == 1
    }

    pub fn cov(&self, u: usize) -> &DMatrix<f64> {
        if self.homoscedastic() {
            &self.covs[0]
        } else {
            &self.covs[u]
        }
    }

    /// Mixing weights for observation `i`.
    pub fn weights_for(&self, data: &FmmData, i: usize) -> Vec<f64> {
        match &self.weights {
            FmmWeights::Probabilities(w) => w.clone(),
            FmmWeights::Logit(b) => {
                let x = data.x.as_ref().map_or(&[][..], |x| &x[i][..]);
                let mut p = initial_probs_design(&design_row(x), b);
                p.truncate(self.k);
                p
            }
        }
    }

    /// Free parameter count used in AIC/BIC.
    pub fn n_par(&self) -> usize {
        let (k, r) = (self.k, self.r());
        let cov = if self.homoscedastic() { r * (r + 1) / 2 } else { k * r * (r + 1) / 2 };
        let w = match &self.weights {
            FmmWeights::Probabilities(_) => k - 1,
            FmmWeights::Logit(b) => (k - 1) * b.q,
        };
        k * r + cov + w
    }

    /// Relabels components: new component `u` is old component `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> FmmParams {
        let means = perm.iter().map(|&o| self.means[o].clone()).collect();
        let covs = if self.homoscedastic() {
            self.covs.clone()
        } else {
            perm.iter().map(|&o| self.covs[o].clone()).collect()
        };
        let weights = match &self.weights {
            FmmWeights::Probabilities(w) => FmmWeights::Probabilities(perm.iter().map(|&o| w[o]).collect()),
            FmmWeights::Logit(b) => {
                // re-reference so the new first component is the baseline
                let full = |u: usize| -> Vec<f64> { if u == 0 { vec![0.0; b.q] } else { b.coef[u - 1].clone() } };
                let base = full(perm[0]);
                let mut nb = b.clone();
                for u in 1..self.k {
                    let c = full(perm[u]);
                    nb.coef[u - 1] = c.iter().zip(&base).map(|(a, z)| a - z).collect();
                }
                FmmWeights::Logit(nb)
            }
        };
        FmmParams {
            k: self.k,
            means,
            covs,
            weights,
        }
    }
}

fn factor_tables(data: &FmmData, params: &FmmParams) -> Result<Vec<HashMap<ObsPattern, PatternFactor>>> {
    params.covs.iter().map(|c| factor_table(c, &data.patterns)).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Per-component `log π_iu + log φ(y_i^o; μ_u^o, Σ_u^oo)`.
fn log_scores(
    data: &FmmData,
    params: &FmmParams,
    tables: &[HashMap<ObsPattern, PatternFactor>],
    i: usize,
) -> Result<Vec<f64>> {
    let w = params.weights_for(data, i);
    let yo = data.observed(i);
    let pat = &data.patterns[i];
    (0..params.k)
        .map(|u| {
            let t = if params.homoscedastic() { &tables[0] } else { &tables[u] };
            Ok(w[u].ln() + t[pat].log_density(&yo, &params.means[u])?)
        })
        .collect()
}

/// Observed-data log-likelihood `Σ_i log Σ_u π_u φ(y_i^o; μ_u^o, Σ_u^oo)`.
pub fn fmm_loglik(data: &FmmData, params: &FmmParams) -> Result<f64> {
    let tables = factor_tables(data, params)?;
    let mut total = 0.0;
    for i in 0..data.n() {
        total += log_sum_exp(&log_scores(data, params, &tables, i)?);
    }
    Ok(total)
}

/// Posteriors, per-(i, u) conditional moments and the log-likelihood at the
/// current parameters.
#[derive(Debug, Clone)]
pub struct FmmEStep {
    /// n × k.
    pub posteriors: Vec<Vec<f64>>,
    /// n × k.
    pub moments: Vec<Vec<ConditionalMoments>>,
    pub loglik: f64,
}

pub fn fmm_e_step(data: &FmmData, params: &FmmParams) -> Result<FmmEStep> {
    let tables = factor_tables(data, params)?;
    let rows: Vec<Result<(Vec<f64>, Vec<ConditionalMoments>, f64)>> = (0..data.n())
        .into_par_iter()
        .map(|i| {
            let mut s = log_scores(data, params, &tables, i)?;
            let ll = log_sum_exp(&s);
            if !ll.is_finite() {
                return Err(Error::ImpossibleObservation { t: 1 });
            }
            for v in s.iter_mut() {
                *v = (*v - ll).exp();
            }
            let tot: f64 = s.iter().sum();
            s.iter_mut().for_each(|v| *v /= tot);
            let yo = data.observed(i);
            let pat = &data.patterns[i];
            let moments = (0..params.k)
                .map(|u| {
                    let t = if params.homoscedastic() { &tables[0] } else { &tables[u] };
                    t[pat].conditional(&yo, &params.means[u])
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((s, moments, ll))
        })
        .collect();
    let mut posteriors = Vec::with_capacity(data.n());
    let mut moments = Vec::with_capacity(data.n());
    let mut loglik = 0.0;
    for row in rows {
        let (z, m, ll) = row?;
        posteriors.push(z);
        moments.push(m);
        loglik += ll;
    }
    Ok(FmmEStep {
        posteriors,
        moments,
        loglik,
    })
}

/// M-step. `prev` supplies the weight parameterization and the Newton start
/// for logit weights; if the Newton solve fails the previous weights are kept.
pub fn fmm_m_step(data: &FmmData, e: &FmmEStep, prev: &FmmParams, homoscedastic: bool) -> Result<FmmParams> {
    let (n, k, r) = (data.n(), prev.k, data.r());
    let mut occ = vec![0.0; k];
    for z in &e.posteriors {
        for u in 0..k {
            occ[u] += z[u];
        }
    }
    if let Some(u) = (0..k).find(|&u| occ[u] < MIN_OCCUPANCY) {
        return Err(Error::DegenerateComponent(u + 1));
    }
    let means: Vec<DVector<f64>> = (0..k)
        .map(|u| {
            let mut s = DVector::zeros(r);
            for i in 0..n {
                s.axpy(e.posteriors[i][u], &e.moments[i][u].expect, 1.0);
            }
            s / occ[u]
        })
        .collect();
    let scatter = |u: usize| -> DMatrix<f64> {
        let mut s = DMatrix::zeros(r, r);
        for i in 0..n {
            let z = e.posteriors[i][u];
            if z == 0.0 {
                continue;
            }
            let d = &e.moments[i][u].expect - &means[u];
            s += z * (&d * d.transpose() + &e.moments[i][u].var_correction);
        }
        s
    };
    let finish = |mut c: DMatrix<f64>| -> Result<DMatrix<f64>> {
        symmetrize(&mut c);
        regularize(&c, 1e-8)
    };
    let covs = if homoscedastic {
        let mut s = DMatrix::zeros(r, r);
        for u in 0..k {
            s += scatter(u);
        }
        vec![finish(s / n as f64)?]
    } else {
        (0..k)
            .map(|u| {
                let c = finish(scatter(u) / occ[u])?;
                // a component shrinking onto a few points drives the
                // likelihood to +∞; stop before rounding takes over
                let ev = c.symmetric_eigenvalues();
                if ev.min() < MIN_RCOND * ev.max() {
                    return Err(Error::DegenerateComponent(u + 1));
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let weights = match &prev.weights {
        FmmWeights::Probabilities(_) => {
            let mut w: Vec<f64> = occ.iter().map(|o| o / n as f64).collect();
            let s: f64 = w.iter().sum();
            w.iter_mut().for_each(|v| *v /= s);
            FmmWeights::Probabilities(w)
        }
        FmmWeights::Logit(b) => {
            let x = data.x.as_ref().ok_or_else(|| Error::InvalidInput("logit weights need covariates".into()))?;
            let design: Vec<Vec<f64>> = x.iter().map(|xi| design_row(xi)).collect();
            match maximize_initial(&design, &e.posteriors, b) {
                Ok(up) => FmmWeights::Logit(up.params),
                Err(Error::NewtonFailed { .. }) => FmmWeights::Logit(b.clone()),
                Err(err) => return Err(err),
            }
        }
    };
    Ok(FmmParams {
        k,
        means,
        covs,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct FmmOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub homoscedastic: bool,
    /// Use logit weights in the covariates carried by the data.
    pub covariates: bool,
    pub deterministic_start: bool,
    /// Random starts; `None` means `5·k`.
    pub n_random_starts: Option<usize>,
    pub seed: u64,
}

impl Default for FmmOptions {
    fn default() -> Self {
        FmmOptions {
            tol: 1e-8,
            max_iter: 5000,
            homoscedastic: false,
            covariates: false,
            deterministic_start: true,
            n_random_starts: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FmmFit {
    pub params: FmmParams,
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub n_par: usize,
    pub aic: f64,
    pub bic: f64,
    pub best_start: usize,
    pub failed_starts: usize,
    /// n × k posteriors at the reported parameters.
    pub posteriors: Vec<Vec<f64>>,
}

fn fmm_starts(data: &FmmData, k: usize, opts: &FmmOptions) -> Result<Vec<FmmParams>> {
    let r = data.r();
    let mom = observed_moments(data.y.iter().map(|v| v.as_slice()), r)?;
    let covs = if opts.homoscedastic { vec![mom.cov.clone()] } else { vec![mom.cov.clone(); k] };
    let logit = opts.covariates && data.x.is_some();
    let q = 1 + data.p();
    let mut starts = Vec::new();
    if opts.deterministic_start {
        let weights = if logit {
            FmmWeights::Logit(InitialLogitParams::zeros(k, q))
        } else {
            FmmWeights::Probabilities(vec![1.0 / k as f64; k])
        };
        starts.push(FmmParams {
            k,
            means: quantile_spread(&mom.mean, &mom.sd, k),
            covs: covs.clone(),
            weights,
        });
    }
    for j in 0..opts.n_random_starts.unwrap_or(5 * k) {
        let mut rng = substream(opts.seed, Stream::Starts, j as u64);
        let means = random_means(&mut rng, &mom.mean, &mom.sd, k);
        let probs = normalized_uniform(&mut rng, k);
        let weights = if logit {
            FmmWeights::Logit(InitialLogitParams::from_probs(&probs, q))
        } else {
            FmmWeights::Probabilities(probs)
        };
        starts.push(FmmParams {
            k,
            means,
            covs: covs.clone(),
            weights,
        });
    }
    Ok(starts)
}

/// `μ_u = m + Φ⁻¹(u/(k+1))·sd`, u = 1..k: means spread over the marginal
/// quantiles of the data.
pub(crate) fn quantile_spread(mean: &DVector<f64>, sd: &DVector<f64>, k: usize) -> Vec<DVector<f64>> {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std = Normal::standard();
    (1..=k)
        .map(|u| {
            let z = std.inverse_cdf(u as f64 / (k as f64 + 1.0));
            mean + sd * z
        })
        .collect()
}

pub(crate) fn random_means<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    sd: &DVector<f64>,
    k: usize,
) -> Vec<DVector<f64>> {
    (0..k)
        .map(|_| DVector::from_fn(mean.len(), |j, _| mean[j] + sd[j] * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

pub(crate) fn normalized_uniform<R: Rng + ?Sized>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + f64::MIN_POSITIVE).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub(crate) fn relative_change(prev: f64, cur: f64) -> f64 {
    if cur == prev {
        0.0
    } else {
        (cur - prev).abs() / cur.abs()
    }
}

struct RunOutcome {
    params: FmmParams,
    e: FmmEStep,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn run_em(data: &FmmData, start: FmmParams, opts: &FmmOptions) -> Result<RunOutcome> {
    let mut params = start;
    let mut e = fmm_e_step(data, &params)?;
    let mut trace = vec![e.loglik];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        params = fmm_m_step(data, &e, &params, opts.homoscedastic)?;
        let next = fmm_e_step(data, &params)?;
        iterations += 1;
        let change = relative_change(e.loglik, next.loglik);
        trace.push(next.loglik);
        e = next;
        if change <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(RunOutcome {
        params,
        e,
        trace,
        iterations,
        converged,
    })
}

/// Multi-start EM for a k-component mixture; keeps the start with the largest
/// final log-likelihood (lowest start index on ties).
pub fn fit_fmm(data: &FmmData, k: usize, opts: &FmmOptions) -> Result<FmmFit> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    if data.n() <= k {
        return Err(Error::InvalidInput(format!("need more than k = {k} observations")));
    }
    let starts = fmm_starts(data, k, opts)?;
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starts requested".into()));
    }
    let outcomes: Vec<Result<RunOutcome>> = starts.into_par_iter().map(|s| run_em(data, s, opts)).collect();
    let mut best: Option<(usize, RunOutcome)> = None;
    let mut failed = 0;
    let mut last_err = None;
    for (j, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                if best.as_ref().is_none_or(|(_, b)| o.e.loglik > b.e.loglik) {
                    best = Some((j, o));
                }
            }
            Err(err) => {
                log::debug!("start {j} failed: {err}");
                failed += 1;
                last_err = Some(err);
            }
        }
    }
    let (best_start, o) = best.ok_or_else(|| {
        Error::FitFailed(last_err.map_or_else(|| "no start succeeded".into(), |e| e.to_string()))
    })?;
    let perm = order_by_first_mean(&o.params.means);
    let params = o.params.permuted(&perm);
    let posteriors = o
        .e
        .posteriors
        .iter()
        .map(|z| perm.iter().map(|&old| z[old]).collect())
        .collect();
    let n_par = params.n_par();
    let loglik = o.e.loglik;
    Ok(FmmFit {
        n_par,
        aic: -2.0 * loglik + 2.0 * n_par as f64,
        bic: -2.0 * loglik + (data.n() as f64).ln() * n_par as f64,
        params,
        loglik,
        trace: o.trace,
        iterations: o.iterations,
        converged: o.converged,
        best_start,
        failed_starts: failed,
        posteriors,
    })
}

/// MAP component per row (lowest index on ties).
pub fn fmm_map(posteriors: &[Vec<f64>]) -> Vec<usize> {
    posteriors.iter().map(|z| argmax(z)).collect()
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (j, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = j;
        }
    }
    best
}

/// Fills missing cells with `E(Y_i | y_i^o, û_i)` (conditional) or
/// `Σ_u ẑ_iu E(Y_i | y_i^o, u)` (unconditional). Observed cells are copied.
pub fn fmm_impute(data: &FmmData, params: &FmmParams, mode: ImputeMode) -> Result<Vec<Vec<f64>>> {
    let e = fmm_e_step(data, params)?;
    let r = data.r();
    Ok((0..data.n())
        .map(|i| {
            let z = &e.posteriors[i];
            let filled = match mode {
                ImputeMode::Conditional => e.moments[i][argmax(z)].expect.clone(),
                ImputeMode::Unconditional => {
                    let mut s = DVector::zeros(r);
                    for u in 0..params.k {
                        s.axpy(z[u], &e.moments[i][u].expect, 1.0);
                    }
                    s
                }
            };
            (0..r)
                .map(|j| if data.patterns[i].is_observed(j) { data.y[i][j] } else { filled[j] })
                .collect()
        })
        .collect())
}

/// Imputation-free EM for fully observed rows: full Gaussian densities and
/// plain weighted moments, no pattern factors or conditional moments.
pub mod complete {
    use super::*;
    use nalgebra::Cholesky;

    fn log_density_full(y: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, nalgebra::Dyn>) -> f64 {
        let r = y.len() as f64;
        let l = chol.l();
        let log_det = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let z = l.solve_lower_triangular(&(y - mean)).expect("factor is nonsingular");
        -0.5 * (r * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
    }

    /// Posteriors (n × k) and log-likelihood.
    pub fn e_step(y: &[DVector<f64>], params: &FmmParams) -> Result<(Vec<Vec<f64>>, f64)> {
        let chols: Vec<_> = params
            .covs
            .iter()
            .map(|c| Cholesky::new(c.clone()).ok_or(Error::SingularCovariance))
            .collect::<Result<_>>()?;
        let FmmWeights::Probabilities(w) = &params.weights else {
            return Err(Error::InvalidInput("complete path supports probability weights only".into()));
        };
        let mut ll = 0.0;
        let mut post = Vec::with_capacity(y.len());
        for yi in y {
            let s: Vec<f64> = (0..params.k)
                .map(|u| {
                    let c = if params.homoscedastic() { &chols[0] } else { &chols[u] };
                    w[u].ln() + log_density_full(yi, &params.means[u], c)
                })
                .collect();
            let l = log_sum_exp(&s);
            ll += l;
            let mut z: Vec<f64> = s.iter().map(|v| (v - l).exp()).collect();
            let tot: f64 = z.iter().sum();
            z.iter_mut().for_each(|v| *v /= tot);
            post.push(z);
        }
        Ok((post, ll))
    }

    pub fn m_step(y: &[DVector<f64>], post: &[Vec<f64>], k: usize, homoscedastic: bool) -> Result<FmmParams> {
        let n = y.len();
        let r = y[0].len();
        let occ: Vec<f64> = (0..k).map(|u| post.iter().map(|z| z[u]).sum()).collect();
        if let Some(u) = (0..k).find(|&u| occ[u] < MIN_OCCUPANCY) {
            return Err(Error::DegenerateComponent(u + 1));
        }
        let means: Vec<DVector<f64>> = (0..k)
            .map(|u| y.iter().zip(post).fold(DVector::zeros(r), |acc, (yi, z)| acc + yi * z[u]) / occ[u])
            .collect();
        let scatter = |u: usize| {
            y.iter().zip(post).fold(DMatrix::zeros(r, r), |acc, (yi, z)| {
                let d = yi - &means[u];
                acc + z[u] * &d * d.transpose()
            })
        };
        let covs = if homoscedastic {
            let s = (0..k).fold(DMatrix::zeros(r, r), |acc, u| acc + scatter(u));
            vec![regularize(&(s / n as f64), 1e-8)?]
        } else {
            (0..k).map(|u| regularize(&(scatter(u) / occ[u]), 1e-8)).collect::<Result<_>>()?
        };
        let w = occ.iter().map(|o| o / n as f64).collect::<Vec<_>>();
        let s: f64 = w.iter().sum();
        Ok(FmmParams {
            k,
            means,
            covs,
            weights: FmmWeights::Probabilities(w.into_iter().map(|v| v / s).collect()),
        })
    }

    /// EM from `start` on complete rows; returns final params, posteriors and
    /// the log-likelihood trace.
    pub fn run(
        y: &[DVector<f64>],
        start: FmmParams,
        tol: f64,
        max_iter: usize,
    ) -> Result<(FmmParams, Vec<Vec<f64>>, Vec<f64>)> {
        let homo = start.homoscedastic();
        let k = start.k;
        let mut params = start;
        let (mut post, mut ll) = e_step(y, &params)?;
        let mut trace = vec![ll];
        for _ in 0..max_iter {
            params = m_step(y, &post, k, homo)?;
            let (p2, l2) = e_step(y, &params)?;
            trace.push(l2);
            let change = relative_change(ll, l2);
            post = p2;
            ll = l2;
            if change <= tol {
                break;
            }
        }
        Ok((params, post, trace))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{log_mvn_density, GaussianParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(x)
    }

    pub(super) fn two_component(r: usize) -> FmmParams {
        FmmParams::new(
            vec![DVector::from_element(r, -1.0), DVector::from_element(r, 1.5)],
            vec![DMatrix::identity(r, r), DMatrix::identity(r, r) * 2.0],
            FmmWeights::Probabilities(vec![0.4, 0.6]),
        )
        .unwrap()
    }

    pub(super) fn simulate(params: &FmmParams, n: usize, miss: f64, seed: u64) -> FmmData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let FmmWeights::Probabilities(w) = &params.weights else { unreachable!() };
        let y = (0..n)
            .map(|_| {
                let mut u = 0;
                let mut acc = w[0];
                let draw: f64 = rng.random();
                while draw > acc && u + 1 < params.k {
                    u += 1;
                    acc += w[u];
                }
                let l = params.cov(u).clone().cholesky().unwrap().l();
                let v = crate::gaussian::draw_mvn(&mut rng, &params.means[u], &l);
                v.iter().map(|&x| if rng.random::<f64>() < miss { f64::NAN } else { x }).collect()
            })
            .collect();
        FmmData::new(y, None).unwrap()
    }

    #[test]
    fn single_component_loglik_is_the_density() {
        let g = GaussianParams::new(dv(&[0.5, -0.2]), DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0])).unwrap();
        let params = FmmParams::new(vec![g.mean.clone()], vec![g.cov.clone()], FmmWeights::Probabilities(vec![1.0])).unwrap();
        let data = FmmData::new(vec![vec![1.0, 1.0]], None).unwrap();
        let expected = log_mvn_density(&[1.0, 1.0], &ObsPattern::all_observed(2), &g).unwrap();
        assert!((fmm_loglik(&data, &params).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn identical_components_collapse() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let m = dv(&[0.1, 0.2]);
        let one = FmmParams::new(vec![m.clone()], vec![c.clone()], FmmWeights::Probabilities(vec![1.0])).unwrap();
        let two = FmmParams::new(vec![m.clone(), m], vec![c.clone(), c], FmmWeights::Probabilities(vec![0.5, 0.5])).unwrap();
        let data = FmmData::new(vec![vec![1.0, f64::NAN], vec![-0.3, 0.7]], None).unwrap();
        assert!((fmm_loglik(&data, &one).unwrap() - fmm_loglik(&data, &two).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_termwise_marginal_oracle() {
        let params = FmmParams::new(
            vec![dv(&[0.0, 1.0]), dv(&[2.0, -1.0])],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]),
                DMatrix::from_row_slice(2, 2, &[3.0, -0.4, -0.4, 1.0]),
            ],
            FmmWeights::Probabilities(vec![0.3, 0.7]),
        )
        .unwrap();
        let data = FmmData::new(vec![vec![0.5, 0.2], vec![f64::NAN, -0.5], vec![1.5, 0.0]], None).unwrap();
        // explicit marginals
        let phi1 = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let phi2 = |y: [f64; 2], m: [f64; 2], s: [f64; 3]| {
            let det = s[0] * s[2] - s[1] * s[1];
            let d = [y[0] - m[0], y[1] - m[1]];
            let q = (s[2] * d[0] * d[0] - 2.0 * s[1] * d[0] * d[1] + s[0] * d[1] * d[1]) / det;
            (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
        };
        let l1 = (0.3 * phi2([0.5, 0.2], [0.0, 1.0], [1.0, 0.5, 2.0]) + 0.7 * phi2([0.5, 0.2], [2.0, -1.0], [3.0, -0.4, 1.0])).ln();
        let l2 = (0.3 * phi1(-0.5, 1.0, 2.0) + 0.7 * phi1(-0.5, -1.0, 1.0)).ln();
        let l3 = (0.3 * phi2([1.5, 0.0], [0.0, 1.0], [1.0, 0.5, 2.0]) + 0.7 * phi2([1.5, 0.0], [2.0, -1.0], [3.0, -0.4, 1.0])).ln();
        assert!((fmm_loglik(&data, &params).unwrap() - (l1 + l2 + l3)).abs() < 1e-12);
    }

    #[test]
    fn single_component_posteriors_are_one() {
        let params = FmmParams::new(vec![dv(&[0.0])], vec![DMatrix::identity(1, 1)], FmmWeights::Probabilities(vec![1.0])).unwrap();
        let data = FmmData::new(vec![vec![3.0], vec![f64::NAN]], None).unwrap();
        let e = fmm_e_step(&data, &params).unwrap();
        assert!(e.posteriors.iter().all(|z| z[0] == 1.0));
    }

    #[test]
    fn symmetric_components_split_evenly_at_zero() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]);
        let params = FmmParams::new(vec![dv(&[1.0, -1.0]), dv(&[-1.0, 1.0])], vec![c], FmmWeights::Probabilities(vec![0.5, 0.5])).unwrap();
        let data = FmmData::new(vec![vec![0.0, 0.0]], None).unwrap();
        let e = fmm_e_step(&data, &params).unwrap();
        assert!((e.posteriors[0][0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posteriors_match_probability_space_oracle() {
        let params = two_component(2);
        let data = simulate(&params, 5, 0.3, 3);
        let e = fmm_e_step(&data, &params).unwrap();
        let FmmWeights::Probabilities(w) = &params.weights else { unreachable!() };
        for i in 0..5 {
            let pat = &data.patterns[i];
            let dens: Vec<f64> = (0..2)
                .map(|u| {
                    if pat.is_all_missing() {
                        return w[u];
                    }
                    let g = GaussianParams::new(params.means[u].clone(), params.cov(u).clone()).unwrap();
                    w[u] * log_mvn_density(&pat.select(&data.y[i]), pat, &g).unwrap().exp()
                })
                .collect();
            let s: f64 = dens.iter().sum();
            assert!((e.posteriors[i].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for u in 0..2 {
                assert!((e.posteriors[i][u] - dens[u] / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_component_m_step_is_gaussian_mle() {
        let y = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![2.0, 1.0], vec![0.0, 0.5]];
        let data = FmmData::new(y.clone(), None).unwrap();
        let start = FmmParams::new(vec![dv(&[0.0, 0.0])], vec![DMatrix::identity(2, 2)], FmmWeights::Probabilities(vec![1.0])).unwrap();
        let e = fmm_e_step(&data, &start).unwrap();
        let m = fmm_m_step(&data, &e, &start, false).unwrap();
        let mean = [1.5, 2.375];
        for j in 0..2 {
            assert!((m.means[0][j] - mean[j]).abs() < 1e-14);
        }
        for a in 0..2 {
            for b in 0..2 {
                let s: f64 = y.iter().map(|v| (v[a] - mean[a]) * (v[b] - mean[b])).sum::<f64>() / 4.0;
                assert!((m.covs[0][(a, b)] - s).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn slot_missing_everywhere_is_a_fixed_point_at_truth() {
        let truth = FmmParams::new(
            vec![dv(&[1.0, -2.0])],
            vec![DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 2.0])],
            FmmWeights::Probabilities(vec![1.0]),
        )
        .unwrap();
        let mut data = simulate(&truth, 100_000, 0.0, 5);
        for row in data.y.iter_mut() {
            row[1] = f64::NAN;
        }
        let data = FmmData::new(data.y, None).unwrap();
        let e = fmm_e_step(&data, &truth).unwrap();
        let m = fmm_m_step(&data, &e, &truth, false).unwrap();
        // slot 1 is pinned by the regression on slot 0; moves only by sampling error
        assert!((m.means[0][0] - 1.0).abs() < 0.02);
        assert!((m.means[0][1] + 2.0).abs() < 0.02);
        assert!((m.covs[0][(1, 1)] - 2.0).abs() < 0.03);
        assert!((m.covs[0][(0, 1)] - 0.6).abs() < 0.02);
    }

    #[test]
    fn separated_components_give_cluster_moments() {
        let truth = FmmParams::new(
            vec![dv(&[-10.0, -10.0]), dv(&[10.0, 10.0])],
            vec![DMatrix::identity(2, 2)],
            FmmWeights::Probabilities(vec![0.5, 0.5]),
        )
        .unwrap();
        let data = simulate(&truth, 400, 0.0, 9);
        let e = fmm_e_step(&data, &truth).unwrap();
        let m = fmm_m_step(&data, &e, &FmmParams { covs: vec![truth.covs[0].clone(); 2], ..truth.clone() }, false).unwrap();
        for u in 0..2 {
            let rows: Vec<&Vec<f64>> = data.y.iter().filter(|v| (v[0] > 0.0) == (u == 1)).collect();
            let nu = rows.len() as f64;
            for j in 0..2 {
                let mj = rows.iter().map(|v| v[j]).sum::<f64>() / nu;
                assert!((m.means[u][j] - mj).abs() < 1e-6);
                let vj = rows.iter().map(|v| (v[j] - mj).powi(2)).sum::<f64>() / nu;
                assert!((m.covs[u][(j, j)] - vj).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn k1_fit_converges_after_one_step() {
        let data = FmmData::new(vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![2.0, 1.0], vec![0.0, 0.5]], None).unwrap();
        let fit = fit_fmm(&data, 1, &FmmOptions::default()).unwrap();
        assert!(fit.converged);
        assert_eq!(fit.iterations, 1);
        assert!((fit.params.means[0][0] - 1.5).abs() < 1e-14);
        assert_eq!(fit.n_par, 2 + 3);
    }

    #[test]
    fn recovers_two_components_and_bic_picks_two() {
        let r = 3;
        let truth = FmmParams::new(
            vec![DVector::from_element(r, -2.0), DVector::from_element(r, 2.0)],
            vec![DMatrix::identity(r, r)],
            FmmWeights::Probabilities(vec![0.5, 0.5]),
        )
        .unwrap();
        let data = simulate(&truth, 2000, 0.1, 13);
        let opts = FmmOptions { homoscedastic: true, ..Default::default() };
        let fits: Vec<FmmFit> = (1..=3).map(|k| fit_fmm(&data, k, &opts).unwrap()).collect();
        let f2 = &fits[1];
        for u in 0..2 {
            for j in 0..r {
                assert!((f2.params.means[u][j] - truth.means[u][j]).abs() < 0.1);
            }
        }
        let best = fits.iter().min_by(|a, b| a.bic.total_cmp(&b.bic)).unwrap();
        assert_eq!(best.params.k, 2);
        assert!(f2.trace.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[1].abs()));
    }

    #[test]
    fn logit_weights_track_a_covariate() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 1500;
        let mut y = Vec::new();
        let mut x = Vec::new();
        for _ in 0..n {
            let xi: f64 = rng.random_range(-2.0..2.0);
            let p2 = 1.0 / (1.0 + (-(1.5 * xi)).exp());
            let u = (rng.random::<f64>() < p2) as usize;
            let m = if u == 0 { -3.0 } else { 3.0 };
            y.push(vec![m + rng.sample::<f64, _>(StandardNormal)]);
            x.push(vec![xi]);
        }
        let data = FmmData::new(y, Some(x)).unwrap();
        let opts = FmmOptions { covariates: true, homoscedastic: true, ..Default::default() };
        let fit = fit_fmm(&data, 2, &opts).unwrap();
        let FmmWeights::Logit(b) = &fit.params.weights else { panic!("expected logit weights") };
        assert!((b.coef[0][1] - 1.5).abs() < 0.4, "slope {}", b.coef[0][1]);
        assert_eq!(fit.n_par, 2 + 1 + 2);
    }

    #[test]
    fn imputation_modes() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let sym = FmmParams::new(vec![dv(&[1.0, 2.0]), dv(&[-1.0, -2.0])], vec![c.clone()], FmmWeights::Probabilities(vec![0.5, 0.5])).unwrap();
        let data = FmmData::new(vec![vec![0.0, f64::NAN], vec![0.3, 0.4]], None).unwrap();
        let unc = fmm_impute(&data, &sym, ImputeMode::Unconditional).unwrap();
        let cond = fmm_impute(&data, &sym, ImputeMode::Conditional).unwrap();
        // ẑ = (0.5, 0.5) at y1 = 0; conditional fills 2 − 0.5 and −2 + 0.5
        assert!((unc[0][1] - 0.5 * (1.5 + -1.5)).abs() < 1e-14);
        assert!((cond[0][1] - 1.5).abs() < 1e-14);
        assert_eq!(unc[1], vec![0.3, 0.4]);
        assert_eq!(cond[1], vec![0.3, 0.4]);
        let one = FmmParams::new(vec![dv(&[1.0, 2.0])], vec![c], FmmWeights::Probabilities(vec![1.0])).unwrap();
        assert_eq!(
            fmm_impute(&data, &one, ImputeMode::Conditional).unwrap(),
            fmm_impute(&data, &one, ImputeMode::Unconditional).unwrap()
        );
    }

    #[test]
    fn complete_path_matches_mar_path_without_missing_cells() {
        let truth = two_component(2);
        let data = simulate(&truth, 300, 0.0, 17);
        let start = fmm_starts(&data, 2, &FmmOptions::default()).unwrap().remove(0);
        let full = run_em(&data, start.clone(), &FmmOptions::default()).unwrap();
        let y: Vec<DVector<f64>> = data.y.iter().map(|v| DVector::from_row_slice(v)).collect();
        let (_, _, trace) = complete::run(&y, start, 1e-8, 5000).unwrap();
        assert_eq!(trace.len(), full.trace.len());
        let last = *trace.last().unwrap();
        assert!((last - full.e.loglik).abs() <= 1e-10 * last.abs());
    }

    #[test]
    fn map_is_invariant_to_monotone_transforms() {
        let z = vec![vec![0.2, 0.5, 0.3], vec![0.4, 0.4, 0.2]];
        let t: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v: &f64| v.ln() * 3.0 + 7.0).collect()).collect();
        assert_eq!(fmm_map(&z), vec![1, 0]);
        assert_eq!(fmm_map(&z), fmm_map(&t));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]
            #[test]
            fn em_is_monotone(seed in 0u64..10_000, k in 1usize..4, homo in any::<bool>()) {
                let truth = two_component(2);
                let data = simulate(&truth, 120, 0.2, seed);
                let opts = FmmOptions {
                    homoscedastic: homo,
                    deterministic_start: false,
                    n_random_starts: Some(1),
                    seed,
                    max_iter: 200,
                    ..Default::default()
                };
                let start = fmm_starts(&data, k, &opts).unwrap().remove(0);
                if let Ok(run) = run_em(&data, start, &opts) {
                    for w in run.trace.windows(2) {
                        prop_assert!(w[1] >= w[0] - 1e-9 * w[1].abs(), "{} -> {}", w[0], w[1]);
                    }
                    for z in &run.e.posteriors {
                        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
