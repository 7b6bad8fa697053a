//! Multinomial-logit parameterizations of initial and transition
//! probabilities, and their weighted maximum-likelihood fit by safeguarded
//! Newton-Raphson.
//!
//! Design vectors always carry a leading intercept: `x̃ = (1, x')'`, so a model
//! with `p` covariates has `q = 1 + p` coefficients per logit.

use std::collections::HashMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coefficients are confined to `[-LOGIT_CAP, LOGIT_CAP]`.
pub const LOGIT_CAP: f64 = 30.0;

/// `(1, x)` design vector.
pub fn design_row(x: &[f64]) -> Vec<f64> {
    let mut d = Vec::with_capacity(x.len() + 1);
    d.push(1.0);
    d.extend_from_slice(x);
    d
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax with max-subtraction, in place.
pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Initial-state logits `log π_iu/π_i1 = x̃'β_u`, `u = 2..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialLogitParams {
    /// `(k−1) × q`, row `u−2` holds `β_u`.
    pub coef: Vec<Vec<f64>>,
    pub k: usize,
    pub q: usize,
}

impl InitialLogitParams {
    pub fn zeros(k: usize, q: usize) -> Self {
        InitialLogitParams {
            coef: vec![vec![0.0; q]; k.saturating_sub(1)],
            k,
            q,
        }
    }

    /// Intercept-only logits reproducing the probabilities `probs` (length k).
    pub fn from_probs(probs: &[f64], q: usize) -> Self {
        let k = probs.len();
        let mut out = Self::zeros(k, q);
        for u in 1..k {
            out.coef[u - 1][0] = capped_log_ratio(probs[u], probs[0]);
        }
        out
    }

    pub(crate) fn coef_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.k.saturating_sub(1), self.q, |a, b| self.coef[a][b])
    }

    pub(crate) fn set_from_matrix(&mut self, m: &DMatrix<f64>) {
        for a in 0..m.nrows() {
            for b in 0..m.ncols() {
                self.coef[a][b] = m[(a, b)];
            }
        }
    }
}

/// Transition logits `log π_{i,u|ū}/π_{i,ū|ū} = x̃'γ_{ūu}` for origins
/// `ū = 1..k` and destinations `u ≠ ū` in `1..k+1`. The absorbing origin
/// `k+1` carries no parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionLogitParams {
    /// `coef[ū][j]`: j-th non-self destination of origin ū (ascending state
    /// order, dropout last), each of length q.
    pub coef: Vec<Vec<Vec<f64>>>,
    pub k: usize,
    pub q: usize,
}

impl TransitionLogitParams {
    pub fn zeros(k: usize, q: usize) -> Self {
        TransitionLogitParams {
            coef: vec![vec![vec![0.0; q]; k]; k],
            k,
            q,
        }
    }

    /// Intercept-only logits reproducing the substantive rows of `matrix`
    /// (at least k rows of length k+1).
    pub fn from_matrix(matrix: &[Vec<f64>], q: usize) -> Self {
        let k = matrix[0].len() - 1;
        let mut out = Self::zeros(k, q);
        for origin in 0..k {
            for (j, dest) in destinations(k, origin).enumerate() {
                out.coef[origin][j][0] = capped_log_ratio(matrix[origin][dest], matrix[origin][origin]);
            }
        }
        out
    }

    pub(crate) fn row_matrix(&self, origin: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.k, self.q, |a, b| self.coef[origin][a][b])
    }

    pub(crate) fn set_row_from_matrix(&mut self, origin: usize, m: &DMatrix<f64>) {
        for a in 0..m.nrows() {
            for b in 0..m.ncols() {
                self.coef[origin][a][b] = m[(a, b)];
            }
        }
    }
}

/// Non-self destinations of `origin` among states `0..=k`.
pub fn destinations(k: usize, origin: usize) -> impl Iterator<Item = usize> {
    (0..=k).filter(move |&d| d != origin)
}

fn capped_log_ratio(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        return -LOGIT_CAP;
    }
    if b <= 0.0 {
        return LOGIT_CAP;
    }
    (a / b).ln().clamp(-LOGIT_CAP, LOGIT_CAP)
}

/// Initial probabilities over `k+1` states; the dropout entry is exactly 0.
pub fn initial_probs(x: &[f64], params: &InitialLogitParams) -> Vec<f64> {
    debug_assert_eq!(x.len() + 1, params.q);
    let d = design_row(x);
    initial_probs_design(&d, params)
}

pub(crate) fn initial_probs_design(d: &[f64], params: &InitialLogitParams) -> Vec<f64> {
    let k = params.k;
    let mut eta = Vec::with_capacity(k);
    eta.push(0.0);
    for row in &params.coef {
        eta.push(dot(row, d));
    }
    softmax_in_place(&mut eta);
    eta.push(0.0);
    eta
}

/// Row `origin` (0-based; `k` is the dropout state) of the transition matrix.
pub fn transition_probs(x: &[f64], origin: usize, params: &TransitionLogitParams) -> Vec<f64> {
    debug_assert_eq!(x.len() + 1, params.q);
    let d = design_row(x);
    transition_probs_design(&d, origin, params)
}

pub(crate) fn transition_probs_design(d: &[f64], origin: usize, params: &TransitionLogitParams) -> Vec<f64> {
    let k = params.k;
    let mut eta = vec![0.0; k + 1];
    if origin == k {
        eta[k] = 1.0;
        return eta;
    }
    for (j, dest) in destinations(k, origin).enumerate() {
        eta[dest] = dot(&params.coef[origin][j], d);
    }
    softmax_in_place(&mut eta);
    eta
}

/// Full `(k+1) × (k+1)` transition matrix at design `d`.
pub(crate) fn transition_matrix_design(d: &[f64], params: &TransitionLogitParams) -> Vec<Vec<f64>> {
    (0..=params.k)
        .map(|o| transition_probs_design(d, o, params))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop when the projected gradient ∞-norm falls below this.
    pub grad_tol: f64,
    pub max_halvings: usize,
    pub cap: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions {
            max_iter: 100,
            grad_tol: 1e-6,
            max_halvings: 30,
            cap: LOGIT_CAP,
        }
    }
}

/// Outcome of one weighted multinomial-logit fit.
#[derive(Debug, Clone)]
pub struct LogitFit {
    /// `(C−1) × q`, non-baseline categories in ascending order.
    pub coef: DMatrix<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// Some coefficient sits on the ±cap boundary with the gradient pushing
    /// outward (quasi-separation).
    pub separation: bool,
}

/// Weighted multinomial log-likelihood `Σ_i Σ_c w_ic log p_ic` and its
/// gradient with respect to the `(C−1) × q` coefficients.
pub fn logit_objective_gradient(
    design: &[Vec<f64>],
    weights: &[Vec<f64>],
    baseline: usize,
    coef: &DMatrix<f64>,
) -> (f64, DMatrix<f64>) {
    let (obj, grad, _) = evaluate(design, weights, baseline, coef, false);
    (obj, grad)
}

fn category_probs(d: &[f64], baseline: usize, coef: &DMatrix<f64>, n_cat: usize) -> Vec<f64> {
    let q = d.len();
    let mut eta = vec![0.0; n_cat];
    let mut row = 0;
    for (c, e) in eta.iter_mut().enumerate() {
        if c == baseline {
            continue;
        }
        let mut s = 0.0;
        for b in 0..q {
            s += coef[(row, b)] * d[b];
        }
        *e = s;
        row += 1;
    }
    softmax_in_place(&mut eta);
    eta
}

fn evaluate(
    design: &[Vec<f64>],
    weights: &[Vec<f64>],
    baseline: usize,
    coef: &DMatrix<f64>,
    with_hessian: bool,
) -> (f64, DMatrix<f64>, Option<DMatrix<f64>>) {
    let m = coef.nrows();
    let q = coef.ncols();
    let n_cat = m + 1;
    let dim = m * q;
    let mut obj = 0.0;
    let mut grad = DMatrix::zeros(m, q);
    let mut neg_hess = with_hessian.then(|| DMatrix::zeros(dim, dim));
    let mut resid = vec![0.0; m];
    let mut pm = vec![0.0; m];

    for (d, w) in design.iter().zip(weights) {
        let total: f64 = w.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let p = category_probs(d, baseline, coef, n_cat);
        for c in 0..n_cat {
            if w[c] > 0.0 {
                obj += w[c] * p[c].max(f64::MIN_POSITIVE).ln();
            }
        }
        let mut row = 0;
        for c in 0..n_cat {
            if c == baseline {
                continue;
            }
            resid[row] = w[c] - total * p[c];
            pm[row] = p[c];
            row += 1;
        }
        for a in 0..m {
            for b in 0..q {
                grad[(a, b)] += resid[a] * d[b];
            }
        }
        if let Some(h) = neg_hess.as_mut() {
            for a in 0..m {
                for c in 0..m {
                    let v = total * (if a == c { pm[a] } else { 0.0 } - pm[a] * pm[c]);
                    if v == 0.0 {
                        continue;
                    }
                    for b1 in 0..q {
                        let vb = v * d[b1];
                        for b2 in 0..q {
                            h[(a * q + b1, c * q + b2)] += vb * d[b2];
                        }
                    }
                }
            }
        }
    }
    (obj, grad, neg_hess)
}

fn objective(design: &[Vec<f64>], weights: &[Vec<f64>], baseline: usize, coef: &DMatrix<f64>) -> f64 {
    let n_cat = coef.nrows() + 1;
    let mut obj = 0.0;
    for (d, w) in design.iter().zip(weights) {
        if w.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let p = category_probs(d, baseline, coef, n_cat);
        for c in 0..n_cat {
            if w[c] > 0.0 {
                obj += w[c] * p[c].max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    obj
}

const STEP_TOL: f64 = 1e-10;
/// Relative predicted gain `g'δ` below which a long Newton step is not worth taking.
const GAIN_TOL: f64 = 1e-12;
/// Steps at least this long (max-norm) count as long.
const LONG_STEP: f64 = 0.5;
/// Undamped short steps taken once the gradient is within tolerance.
const MAX_POLISH: usize = 5;

/// Merges rows with bitwise-equal designs by summing their weights, and drops
/// rows of zero total weight. The weighted log-likelihood is unchanged.
fn pool_designs(design: &[Vec<f64>], weights: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut pooled_d: Vec<Vec<f64>> = Vec::new();
    let mut pooled_w: Vec<Vec<f64>> = Vec::new();
    for (d, w) in design.iter().zip(weights) {
        if w.iter().sum::<f64>() <= 0.0 {
            continue;
        }
        let key: Vec<u64> = d.iter().map(|v| v.to_bits()).collect();
        match index.get(&key) {
            Some(&i) => pooled_w[i].iter_mut().zip(w).for_each(|(a, b)| *a += b),
            None => {
                index.insert(key, pooled_d.len());
                pooled_d.push(d.clone());
                pooled_w.push(w.clone());
            }
        }
    }
    (pooled_d, pooled_w)
}

/// Maximizes `Σ_i Σ_c w_ic log p_c(x̃_i)` over the coefficients of the
/// non-baseline categories, starting from `start`.
///
/// Each iteration takes a Newton step on the free coordinates (those not
/// pinned at the cap by an outward gradient), with step-halving so the
/// objective never decreases and a growing ridge when the Hessian block
/// does not factor.
pub fn fit_weighted_logit(
    design: &[Vec<f64>],
    weights: &[Vec<f64>],
    baseline: usize,
    start: &DMatrix<f64>,
    opts: &NewtonOptions,
) -> Result<LogitFit> {
    let m = start.nrows();
    let q = start.ncols();
    if design.len() != weights.len() {
        return Err(Error::InvalidInput("design and weights differ in length".into()));
    }
    if design.iter().any(|d| d.len() != q) || weights.iter().any(|w| w.len() != m + 1) {
        return Err(Error::InvalidInput("logit design/weight dimensions disagree".into()));
    }
    let (design, weights) = pool_designs(design, weights);
    let (design, weights) = (&design[..], &weights[..]);
    let dim = m * q;
    let total_weight: f64 = weights.iter().flatten().sum();
    let mut theta = start.map(|v| v.clamp(-opts.cap, opts.cap));
    if dim == 0 {
        let obj = objective(design, weights, baseline, &theta);
        return Ok(LogitFit {
            coef: theta,
            objective: obj,
            grad_norm: 0.0,
            iterations: 0,
            separation: false,
        });
    }

    let mut last_pg = f64::INFINITY;
    let mut polish = 0;
    for iter in 0..opts.max_iter {
        let (obj, grad, neg_hess) = evaluate(design, weights, baseline, &theta, true);
        let neg_hess = neg_hess.expect("hessian requested");

        let mut free = Vec::with_capacity(dim);
        let mut pinned = false;
        for j in 0..dim {
            let (a, b) = (j / q, j % q);
            let (t, g) = (theta[(a, b)], grad[(a, b)]);
            if (t >= opts.cap && g > 0.0) || (t <= -opts.cap && g < 0.0) {
                pinned = true;
            } else {
                free.push(j);
            }
        }
        let pg = free
            .iter()
            .map(|&j| grad[(j / q, j % q)].abs())
            .fold(0.0, f64::max);
        last_pg = pg;
        let done = |iterations| LogitFit {
            coef: theta.clone(),
            objective: obj,
            grad_norm: pg,
            iterations,
            separation: pinned,
        };
        if free.is_empty() {
            return Ok(done(iter));
        }

        let nf = free.len();
        let h_ff = DMatrix::from_fn(nf, nf, |a, b| neg_hess[(free[a], free[b])]);
        let g_f = DVector::from_fn(nf, |a, _| grad[(free[a] / q, free[a] % q)]);
        let step = match newton_direction(&h_ff, &g_f) {
            Some(s) => s,
            None if pg <= opts.grad_tol => return Ok(done(iter)),
            None => {
                return Err(Error::NewtonFailed {
                    iterations: iter,
                    grad_norm: pg,
                })
            }
        };
        // a small gradient alone is not enough: under separation it decays
        // geometrically while the Newton step stays of order one
        if pg <= opts.grad_tol {
            let len = step.amax();
            if len <= STEP_TOL {
                return Ok(done(iter));
            }
            if len < LONG_STEP {
                // quadratic region: a few steps reach full precision; beyond
                // that an ill-conditioned Hessian only amplifies rounding
                polish += 1;
                if polish > MAX_POLISH {
                    return Ok(done(iter));
                }
                for (a, &j) in free.iter().enumerate() {
                    let (r, c) = (j / q, j % q);
                    theta[(r, c)] = (theta[(r, c)] + step[a]).clamp(-opts.cap, opts.cap);
                }
                continue;
            } else if g_f.dot(&step) <= GAIN_TOL * obj.abs().max(1.0) {
                // the supremum lies at infinity along a direction that is not
                // a coordinate axis
                return Ok(LogitFit {
                    separation: true,
                    ..done(iter)
                });
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let mut cand = theta.clone();
            for (a, &j) in free.iter().enumerate() {
                let (r, c) = (j / q, j % q);
                cand[(r, c)] = (cand[(r, c)] + t * step[a]).clamp(-opts.cap, opts.cap);
            }
            let cand_obj = objective(design, weights, baseline, &cand);
            if cand_obj >= obj {
                accepted = Some((cand, cand_obj > obj));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            // objective flat to rounding at a small gradient: inside the
            // quadratic region, so take the undamped step
            Some((_, false)) if pg <= opts.grad_tol => {
                for (a, &j) in free.iter().enumerate() {
                    let (r, c) = (j / q, j % q);
                    theta[(r, c)] = (theta[(r, c)] + step[a]).clamp(-opts.cap, opts.cap);
                }
            }
            Some((c, _)) => theta = c,
            None => {
                // no representable ascent left: stationary up to rounding
                if pg <= opts.grad_tol * total_weight.max(1.0) {
                    return Ok(done(iter));
                }
                return Err(Error::NewtonFailed {
                    iterations: iter,
                    grad_norm: pg,
                });
            }
        }
    }
    Err(Error::NewtonFailed {
        iterations: opts.max_iter,
        grad_norm: last_pg,
    })
}

/// Solves `H δ = g`, adding a ridge (starting at 1e-8, growing tenfold)
/// when `H` does not factor.
fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(ch) = Cholesky::new(h.clone()) {
        return Some(ch.solve(g));
    }
    let scale = h.diagonal().iter().cloned().fold(1.0_f64, f64::max);
    let mut ridge = 1e-8;
    for _ in 0..20 {
        let mut hr = h.clone();
        for j in 0..hr.nrows() {
            hr[(j, j)] += ridge * scale;
        }
        if let Some(ch) = Cholesky::new(hr) {
            return Some(ch.solve(g));
        }
        ridge *= 10.0;
    }
    None
}

/// Result of the initial-probability update.
#[derive(Debug, Clone)]
pub struct InitialUpdate {
    pub params: InitialLogitParams,
    pub separation: bool,
}

/// Newton-Raphson update of `B` against posterior weights `ẑ_i1u`
/// (n rows over states 1..k).
pub fn maximize_initial(
    design: &[Vec<f64>],
    weights: &[Vec<f64>],
    start: &InitialLogitParams,
) -> Result<InitialUpdate> {
    let fit = fit_weighted_logit(design, weights, 0, &start.coef_matrix(), &NewtonOptions::default())?;
    let mut params = start.clone();
    params.set_from_matrix(&fit.coef);
    Ok(InitialUpdate {
        params,
        separation: fit.separation,
    })
}

/// Result of the transition update. Rows whose Newton solve failed keep
/// their starting coefficients and are listed in `failed_rows`.
#[derive(Debug, Clone)]
pub struct TransitionUpdate {
    pub params: TransitionLogitParams,
    pub separation_rows: Vec<usize>,
    pub failed_rows: Vec<usize>,
}

/// Newton-Raphson update of `Γ`, one independent weighted multinomial logit
/// per substantive origin. `pair_weights[o]` is the `(k+1) × (k+1)` matrix of
/// `ẑ_{itūu}` for the transition with design `designs[o]`; its dropout row
/// is ignored.
pub fn maximize_transition(
    designs: &[Vec<f64>],
    pair_weights: &[Vec<Vec<f64>>],
    start: &TransitionLogitParams,
) -> Result<TransitionUpdate> {
    if designs.len() != pair_weights.len() {
        return Err(Error::InvalidInput("designs and weights differ in length".into()));
    }
    let k = start.k;
    let flat: Vec<Vec<f64>> = pair_weights.iter().map(|pw| pw.concat()).collect();
    let (designs, flat) = pool_designs(designs, &flat);
    let width = k + 1;
    let rows: Vec<(usize, Result<LogitFit>)> = (0..k)
        .into_par_iter()
        .map(|origin| {
            let w: Vec<Vec<f64>> = flat.iter().map(|f| f[origin * width..(origin + 1) * width].to_vec()).collect();
            let fit = fit_weighted_logit(&designs, &w, origin, &start.row_matrix(origin), &NewtonOptions::default());
            (origin, fit)
        })
        .collect();

    let mut params = start.clone();
    let mut separation_rows = Vec::new();
    let mut failed_rows = Vec::new();
    for (origin, fit) in rows {
        match fit {
            Ok(f) => {
                params.set_row_from_matrix(origin, &f.coef);
                if f.separation {
                    separation_rows.push(origin);
                }
            }
            Err(Error::NewtonFailed { .. }) => failed_rows.push(origin),
            Err(e) => return Err(e),
        }
    }
    Ok(TransitionUpdate {
        params,
        separation_rows,
        failed_rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_softmax(eta: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = eta.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn zero_initial_logits_are_uniform() {
        let p = initial_probs(&[0.3, -1.0], &InitialLogitParams::zeros(4, 3));
        assert_eq!(p.len(), 5);
        for u in 0..4 {
            assert!((p[u] - 0.25).abs() < 1e-15);
        }
        assert_eq!(p[4], 0.0);
    }

    #[test]
    fn initial_logit_arithmetic() {
        let mut b = InitialLogitParams::zeros(2, 1);
        b.coef[0][0] = 3.0_f64.ln();
        let p = initial_probs(&[], &b);
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn initial_probs_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut b = InitialLogitParams::zeros(5, 4);
            for row in b.coef.iter_mut() {
                for v in row.iter_mut() {
                    *v = rng.random_range(-1.5..1.5);
                }
            }
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = initial_probs(&x, &b);
            let d = design_row(&x);
            let mut eta = vec![0.0];
            eta.extend(b.coef.iter().map(|r| dot(r, &d)));
            let oracle = naive_softmax(&eta);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for u in 0..5 {
                assert!((p[u] - oracle[u]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn transition_rows() {
        let g = TransitionLogitParams::zeros(2, 1);
        for origin in 0..2 {
            let p = transition_probs(&[], origin, &g);
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
        assert_eq!(transition_probs(&[], 2, &g), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn transition_probs_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = TransitionLogitParams::zeros(3, 3);
        for row in g.coef.iter_mut().flatten() {
            for v in row.iter_mut() {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        let x = [0.4, -0.9];
        let d = design_row(&x);
        for origin in 0..3 {
            let p = transition_probs(&x, origin, &g);
            let mut eta = vec![0.0; 4];
            for (j, dest) in destinations(3, origin).enumerate() {
                eta[dest] = dot(&g.coef[origin][j], &d);
            }
            let oracle = naive_softmax(&eta);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            for u in 0..4 {
                assert!((p[u] - oracle[u]).abs() < 1e-14);
            }
        }
        assert_eq!(transition_probs(&x, 3, &g), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn shift_invariance_under_reference_convention() {
        // adding c to every logit including the reference 0 is the same as
        // leaving the coefficients alone
        let eta = [0.0, 0.7, -1.2];
        let shifted: Vec<f64> = eta.iter().map(|v| v + 4.0).collect();
        let mut a = eta.to_vec();
        let mut b = shifted;
        softmax_in_place(&mut a);
        softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn intercept_only_initial_matches_column_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 40;
        let weights: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let mut w: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
                let s: f64 = w.iter().sum();
                w.iter_mut().for_each(|v| *v /= s);
                w
            })
            .collect();
        let design = vec![vec![1.0]; n];
        let up = maximize_initial(&design, &weights, &InitialLogitParams::zeros(3, 1)).unwrap();
        let p = initial_probs(&[], &up.params);
        for u in 0..3 {
            let mean = weights.iter().map(|w| w[u]).sum::<f64>() / n as f64;
            assert!((p[u] - mean).abs() < 1e-10, "{u} {} {mean}", p[u]);
        }
        assert!(!up.separation);
    }

    #[test]
    fn all_mass_on_reference_hits_cap() {
        let design = vec![vec![1.0]; 10];
        let weights = vec![vec![1.0, 0.0]; 10];
        let up = maximize_initial(&design, &weights, &InitialLogitParams::zeros(2, 1)).unwrap();
        assert!(up.separation);
        assert_eq!(up.params.coef[0][0], -LOGIT_CAP);
        // gradient never vanishes: objective is monotone in the coefficient
        let (_, g) = logit_objective_gradient(&design, &weights, 0, &up.params.coef_matrix());
        assert!(g[(0, 0)] < 0.0);
    }

    #[test]
    fn oblique_separation_stops_on_the_flat_direction() {
        // category 1 never occurs at x = 0: intercept → −∞, slope → +∞
        let design: Vec<Vec<f64>> = (0..20).map(|i| vec![1.0, f64::from(i % 2)]).collect();
        let weights: Vec<Vec<f64>> = (0..20)
            .map(|i| if i % 2 == 0 { vec![1.0, 0.0] } else if i % 4 == 1 { vec![0.0, 1.0] } else { vec![0.7, 0.3] })
            .collect();
        let fit = fit_weighted_logit(&design, &weights, 0, &DMatrix::zeros(1, 2), &NewtonOptions::default()).unwrap();
        assert!(fit.separation);
        assert!(fit.iterations < NewtonOptions::default().max_iter);
        let p = |x: f64| category_probs(&[1.0, x], 0, &fit.coef, 2)[1];
        assert!(p(0.0) < 1e-9);
        assert!((p(1.0) - 6.5 / 10.0).abs() < 1e-9);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let n_cat = rng.random_range(2..5);
            let q = rng.random_range(1..4);
            let baseline = rng.random_range(0..n_cat);
            let n = 15;
            let design: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let mut d = vec![1.0];
                    d.extend((1..q).map(|_| rng.random_range(-1.0..1.0)));
                    d
                })
                .collect();
            let weights: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n_cat).map(|_| rng.random::<f64>()).collect())
                .collect();
            let coef = DMatrix::from_fn(n_cat - 1, q, |_, _| rng.random_range(-1.0..1.0));
            let (_, g) = logit_objective_gradient(&design, &weights, baseline, &coef);
            let h = 1e-6;
            let mut worst = 0.0_f64;
            let mut scale = 1.0_f64;
            for a in 0..n_cat - 1 {
                for b in 0..q {
                    let mut up = coef.clone();
                    let mut dn = coef.clone();
                    up[(a, b)] += h;
                    dn[(a, b)] -= h;
                    let fd = (objective(&design, &weights, baseline, &up)
                        - objective(&design, &weights, baseline, &dn))
                        / (2.0 * h);
                    worst = worst.max((fd - g[(a, b)]).abs());
                    scale = scale.max(fd.abs());
                }
            }
            assert!(worst / scale < 1e-5, "relative gradient error {}", worst / scale);
        }
    }

    #[test]
    fn recovers_logistic_coefficients() {
        // k=2, p=1: P(u=2|x) = σ(β0 + β1 x), weights are the exact labels
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (b0, b1) = (-0.5, 1.2);
        let n = 4000;
        let mut design = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.random_range(-2.0..2.0);
            let p2 = 1.0 / (1.0 + (-(b0 + b1 * x)).exp());
            let z = rng.random::<f64>() < p2;
            design.push(vec![1.0, x]);
            weights.push(if z { vec![0.0, 1.0] } else { vec![1.0, 0.0] });
        }
        let up = maximize_initial(&design, &weights, &InitialLogitParams::zeros(2, 2)).unwrap();
        let est = &up.params.coef[0];
        // se from the inverse negative Hessian at the estimate
        let (_, _, h) = evaluate(&design, &weights, 0, &up.params.coef_matrix(), true);
        let cov = h.unwrap().try_inverse().unwrap();
        assert!((est[0] - b0).abs() < 3.0 * cov[(0, 0)].sqrt());
        assert!((est[1] - b1).abs() < 3.0 * cov[(1, 1)].sqrt());
    }

    #[test]
    fn intercept_only_transition_matches_normalized_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let k = 3;
        let n = 30;
        let pw: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..=k)
                    .map(|_| (0..=k).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        let designs = vec![vec![1.0]; n];
        let up = maximize_transition(&designs, &pw, &TransitionLogitParams::zeros(k, 1)).unwrap();
        assert!(up.failed_rows.is_empty());
        for origin in 0..k {
            let p = transition_probs(&[], origin, &up.params);
            let tot: f64 = pw.iter().map(|w| w[origin].iter().sum::<f64>()).sum();
            for dest in 0..=k {
                let cnt: f64 = pw.iter().map(|w| w[origin][dest]).sum();
                assert!((p[dest] - cnt / tot).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn zero_off_diagonal_weights_push_self_transition_to_one() {
        let k = 2;
        let mut w = vec![vec![0.0; k + 1]; k + 1];
        w[0][0] = 5.0;
        w[1][1] = 3.0;
        let up = maximize_transition(&[vec![1.0]], &[w], &TransitionLogitParams::zeros(k, 1)).unwrap();
        assert_eq!(up.separation_rows, vec![0, 1]);
        for origin in 0..k {
            let p = transition_probs(&[], origin, &up.params);
            assert!(p[origin] > 1.0 - 1e-12);
        }
    }

    #[test]
    fn covariate_transition_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = 3;
        let n = 60;
        let designs: Vec<Vec<f64>> = (0..n)
            .map(|_| design_row(&[rng.random_range(-1.0..1.0), rng.random_range(0.0..1.0), rng.random_range(-2.0..2.0)]))
            .collect();
        let pw: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| {
                (0..=k)
                    .map(|_| (0..=k).map(|_| rng.random::<f64>()).collect())
                    .collect()
            })
            .collect();
        let up = maximize_transition(&designs, &pw, &TransitionLogitParams::zeros(k, 4)).unwrap();
        for d in &designs {
            let m = transition_matrix_design(d, &up.params);
            for row in &m {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
            }
        }
    }
}
