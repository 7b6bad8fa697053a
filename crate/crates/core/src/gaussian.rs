//! Multivariate Gaussian densities and conditional moments under arbitrary
//! observed/missing partitions of the response vector.
//!
//! Everything is computed through a Cholesky factor of the observed block
//! `Σ^oo`; no explicit inverse is ever formed.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Which entries of a response vector are observed (`true`) or missing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObsPattern(Vec<bool>);

impl Hash for ObsPattern {
    fn hash<H: Hasher>(&self, state: &mut H) {
        // patterns are looked up once per occasion; hash 64 slots per write
        state.write_usize(self.0.len());
        for chunk in self.0.chunks(64) {
            let bits = chunk.iter().enumerate().fold(0u64, |acc, (j, &o)| acc | (u64::from(o) << j));
            state.write_u64(bits);
        }
    }
}

impl ObsPattern {
    pub fn new(observed: Vec<bool>) -> Self {
        ObsPattern(observed)
    }

    pub fn all_observed(r: usize) -> Self {
        ObsPattern(vec![true; r])
    }

    pub fn all_missing(r: usize) -> Self {
        ObsPattern(vec![false; r])
    }

    /// Pattern of the finite entries of `y` (NaN marks a missing cell).
    pub fn from_values(y: &[f64]) -> Self {
        ObsPattern(y.iter().map(|v| !v.is_nan()).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_observed(&self, j: usize) -> bool {
        self.0[j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn n_observed(&self) -> usize {
        self.0.iter().filter(|&&o| o).count()
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(|&o| o)
    }

    pub fn is_all_missing(&self) -> bool {
        !self.0.iter().any(|&o| o)
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| self.0[j]).collect()
    }

    pub fn missing_indices(&self) -> Vec<usize> {
        (0..self.0.len()).filter(|&j| !self.0[j]).collect()
    }

    /// Observed entries of a full-length vector, in slot order.
    pub fn select(&self, y_full: &[f64]) -> Vec<f64> {
        y_full
            .iter()
            .zip(&self.0)
            .filter(|(_, &o)| o)
            .map(|(v, _)| *v)
            .collect()
    }
}

/// Mean vector and covariance matrix of a multivariate normal.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianParams {
    /// Validates symmetry (max asymmetry 1e-12) and positive definiteness.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let r = mean.len();
        if cov.nrows() != r || cov.ncols() != r {
            return Err(Error::InvalidInput(format!(
                "covariance is {}x{}, expected {r}x{r}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        check_covariance(&cov)?;
        Ok(GaussianParams { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Symmetric within 1e-12 and Cholesky-factorizable.
pub fn check_covariance(cov: &DMatrix<f64>) -> Result<()> {
    if !cov.is_square() {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    if max_asymmetry(cov) > 1e-12 {
        return Err(Error::InvalidInput("covariance is not symmetric".into()));
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    Cholesky::new(cov.clone())
        .map(|_| ())
        .ok_or(Error::SingularCovariance)
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// `E(Y | y^o)` and `Var(Y | y^o)` for one response vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMoments {
    /// Observed slots copied from the data, missing slots filled.
    pub expect: DVector<f64>,
    /// Zero outside the missing x missing block.
    pub var_correction: DMatrix<f64>,
}

/// Cholesky factorization of the observed block of a covariance matrix,
/// plus the regression of the missing block on the observed one.
#[derive(Debug, Clone)]
pub struct PatternFactor {
    r: usize,
    observed: Vec<usize>,
    missing: Vec<usize>,
    chol: Option<Cholesky<f64, Dyn>>,
    log_det: f64,
    // Σ^{mo} (Σ^{oo})^{-1}, m x o
    regression: DMatrix<f64>,
    // Σ^{mm} - Σ^{mo} (Σ^{oo})^{-1} Σ^{om}
    schur: DMatrix<f64>,
}

impl PatternFactor {
    pub fn new(cov: &DMatrix<f64>, pattern: &ObsPattern) -> Result<Self> {
        let r = cov.nrows();
        if pattern.len() != r {
            return Err(Error::InvalidInput(format!(
                "pattern has length {}, expected {r}",
                pattern.len()
            )));
        }
        let observed = pattern.observed_indices();
        let missing = pattern.missing_indices();
        let (o, m) = (observed.len(), missing.len());

        if o == 0 {
            return Ok(PatternFactor {
                r,
                observed,
                missing,
                chol: None,
                log_det: 0.0,
                regression: DMatrix::zeros(m, 0),
                schur: cov.clone(),
            });
        }

        let s_oo = DMatrix::from_fn(o, o, |a, b| cov[(observed[a], observed[b])]);
        let chol = Cholesky::new(s_oo).ok_or(Error::SingularCovariance)?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();

        let (regression, schur) = if m == 0 {
            (DMatrix::zeros(0, o), DMatrix::zeros(0, 0))
        } else {
            let s_om = DMatrix::from_fn(o, m, |a, b| cov[(observed[a], missing[b])]);
            let s_mm = DMatrix::from_fn(m, m, |a, b| cov[(missing[a], missing[b])]);
            // (Σ^oo)^{-1} Σ^om, transposed gives Σ^mo (Σ^oo)^{-1}
            let solved = chol.solve(&s_om);
            let regression = solved.transpose();
            let mut schur = s_mm - &regression * &s_om;
            symmetrize(&mut schur);
            (regression, schur)
        };

        Ok(PatternFactor {
            r,
            observed,
            missing,
            chol: Some(chol),
            log_det,
            regression,
            schur,
        })
    }

    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    /// Log density of the observed sub-vector `y_obs` (observed slots only,
    /// in slot order) under the marginal of `N(mean, cov)`. Zero when nothing
    /// is observed.
    pub fn log_density(&self, y_obs: &[f64], mean: &DVector<f64>) -> Result<f64> {
        if y_obs.len() != self.observed.len() {
            return Err(Error::InvalidInput(format!(
                "observed vector has length {}, pattern observes {}",
                y_obs.len(),
                self.observed.len()
            )));
        }
        let Some(chol) = &self.chol else {
            return Ok(0.0);
        };
        let o = self.observed.len();
        let l = chol.l_dirty();
        // forward substitution L z = y^o − μ^o without temporaries
        let mut z = [0.0_f64; 16];
        let mut heap;
        let z: &mut [f64] = if o <= z.len() {
            &mut z[..o]
        } else {
            heap = vec![0.0; o];
            &mut heap
        };
        let mut quad = 0.0;
        for a in 0..o {
            let mut v = y_obs[a] - mean[self.observed[a]];
            for b in 0..a {
                v -= l[(a, b)] * z[b];
            }
            v /= l[(a, a)];
            z[a] = v;
            quad += v * v;
        }
        Ok(-0.5 * (o as f64 * LN_2PI + self.log_det + quad))
    }

    /// Conditional moments of the full vector given the observed sub-vector.
    pub fn conditional(&self, y_obs: &[f64], mean: &DVector<f64>) -> Result<ConditionalMoments> {
        Ok(ConditionalMoments {
            expect: self.conditional_mean(y_obs, mean)?,
            var_correction: self.var_correction(),
        })
    }

    /// `E(Y | y^o)`: observed slots copied, missing slots regressed on the
    /// observed residuals.
    pub fn conditional_mean(&self, y_obs: &[f64], mean: &DVector<f64>) -> Result<DVector<f64>> {
        if y_obs.len() != self.observed.len() {
            return Err(Error::InvalidInput(format!(
                "observed vector has length {}, pattern observes {}",
                y_obs.len(),
                self.observed.len()
            )));
        }
        let mut expect = DVector::zeros(self.r);
        for (a, &j) in self.observed.iter().enumerate() {
            expect[j] = y_obs[a];
        }
        if self.missing.is_empty() {
            return Ok(expect);
        }
        if self.observed.is_empty() {
            expect.copy_from(mean);
            return Ok(expect);
        }
        for (b, &j) in self.missing.iter().enumerate() {
            let shift: f64 = self
                .observed
                .iter()
                .enumerate()
                .map(|(a, &l)| self.regression[(b, a)] * (y_obs[a] - mean[l]))
                .sum();
            expect[j] = mean[j] + shift;
        }
        Ok(expect)
    }

    /// `Var(Y | y^o)` as an `r × r` matrix, zero outside the missing block.
    /// It does not depend on the observed values or the mean.
    pub fn var_correction(&self) -> DMatrix<f64> {
        let mut v = DMatrix::zeros(self.r, self.r);
        for (b, &j) in self.missing.iter().enumerate() {
            for (c, &l) in self.missing.iter().enumerate() {
                v[(j, l)] = self.schur[(b, c)];
            }
        }
        v
    }
}

/// Lazily built [`PatternFactor`]s for one covariance matrix.
#[derive(Debug)]
pub struct FactorCache<'a> {
    cov: &'a DMatrix<f64>,
    factors: HashMap<ObsPattern, PatternFactor>,
}

impl<'a> FactorCache<'a> {
    pub fn new(cov: &'a DMatrix<f64>) -> Self {
        FactorCache {
            cov,
            factors: HashMap::new(),
        }
    }

    pub fn get(&mut self, pattern: &ObsPattern) -> Result<&PatternFactor> {
        if !self.factors.contains_key(pattern) {
            let f = PatternFactor::new(self.cov, pattern)?;
            self.factors.insert(pattern.clone(), f);
        }
        Ok(&self.factors[pattern])
    }
}

/// log φ(y^o; μ^o, Σ^oo).
///
/// `y_obs` holds only the observed slots. At least one slot must be observed.
pub fn log_mvn_density(y_obs: &[f64], pattern: &ObsPattern, params: &GaussianParams) -> Result<f64> {
    if pattern.len() != params.dim() {
        return Err(Error::InvalidInput(format!(
            "pattern has length {}, expected {}",
            pattern.len(),
            params.dim()
        )));
    }
    if pattern.is_all_missing() {
        return Err(Error::InvalidInput("no observed slot in pattern".into()));
    }
    PatternFactor::new(&params.cov, pattern)?.log_density(y_obs, &params.mean)
}

/// `E(Y | y^o)` and the variance correction `Var(Y | y^o)`.
pub fn conditional_moments(
    y_obs: &[f64],
    pattern: &ObsPattern,
    params: &GaussianParams,
) -> Result<ConditionalMoments> {
    PatternFactor::new(&params.cov, pattern)?.conditional(y_obs, &params.mean)
}

/// Symmetrizes `cov` and adds a growing ridge until it factorizes.
///
/// The ridge starts at `max(jitter, 1e-10·trace/r)` and doubles, for at most
/// ten attempts. A matrix that already factorizes is returned symmetrized but
/// otherwise untouched.
pub fn regularize(cov: &DMatrix<f64>, jitter: f64) -> Result<DMatrix<f64>> {
    if !cov.is_square() {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    if !(jitter >= 0.0) {
        return Err(Error::InvalidInput("jitter must be nonnegative".into()));
    }
    let mut sym = cov.clone();
    symmetrize(&mut sym);
    if sym.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularCovariance);
    }
    if Cholesky::new(sym.clone()).is_some() {
        return Ok(sym);
    }
    let r = sym.nrows().max(1) as f64;
    let base = 1e-10 * sym.trace().abs() / r;
    let mut ridge = jitter.max(base).max(f64::MIN_POSITIVE);
    for _ in 0..10 {
        let mut candidate = sym.clone();
        for j in 0..candidate.nrows() {
            candidate[(j, j)] += ridge;
        }
        if Cholesky::new(candidate.clone()).is_some() {
            return Ok(candidate);
        }
        ridge *= 2.0;
    }
    Err(Error::SingularCovariance)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Draws from `N(mean, cov)` given a lower Cholesky factor of `cov`.
pub(crate) fn draw_mvn<R: rand::Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    chol_lower: &DMatrix<f64>,
) -> DVector<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let z = DVector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + chol_lower * z
}

/// Factorizations of `cov` for every distinct pattern in `patterns`.
pub fn factor_table<'a>(
    cov: &DMatrix<f64>,
    patterns: impl IntoIterator<Item = &'a ObsPattern>,
) -> Result<HashMap<ObsPattern, PatternFactor>> {
    let mut table = HashMap::new();
    for p in patterns {
        if !table.contains_key(p) {
            table.insert(p.clone(), PatternFactor::new(cov, p)?);
        }
    }
    Ok(table)
}

/// Descriptive statistics of partially observed rows (NaN = missing).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservedMoments {
    pub mean: DVector<f64>,
    pub sd: DVector<f64>,
    /// Pairwise-complete covariance, regularized to be positive definite.
    pub cov: DMatrix<f64>,
}

/// Per-coordinate means and standard deviations over the observed cells and
/// the pairwise-complete covariance (ML divisors). Coordinates never
/// observed get mean 0 and unit variance.
pub fn observed_moments<'a>(rows: impl IntoIterator<Item = &'a [f64]>, r: usize) -> Result<ObservedMoments> {
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    let mut sum = vec![0.0; r];
    let mut cnt = vec![0usize; r];
    for y in &rows {
        for j in 0..r {
            if !y[j].is_nan() {
                sum[j] += y[j];
                cnt[j] += 1;
            }
        }
    }
    let mean = DVector::from_fn(r, |j, _| if cnt[j] > 0 { sum[j] / cnt[j] as f64 } else { 0.0 });
    let mut cross = DMatrix::<f64>::zeros(r, r);
    let mut pairs = DMatrix::<f64>::zeros(r, r);
    for y in &rows {
        for j in 0..r {
            if y[j].is_nan() {
                continue;
            }
            for l in 0..=j {
                if !y[l].is_nan() {
                    cross[(j, l)] += (y[j] - mean[j]) * (y[l] - mean[l]);
                    pairs[(j, l)] += 1.0;
                }
            }
        }
    }
    let mut cov = DMatrix::zeros(r, r);
    for j in 0..r {
        for l in 0..=j {
            let v = if pairs[(j, l)] > 0.0 {
                cross[(j, l)] / pairs[(j, l)]
            } else if j == l {
                1.0
            } else {
                0.0
            };
            cov[(j, l)] = v;
            cov[(l, j)] = v;
        }
        if !(cov[(j, j)] > 0.0) {
            cov[(j, j)] = 1.0;
        }
    }
    let sd = DVector::from_fn(r, |j, _| cov[(j, j)].sqrt());
    let cov = regularize(&cov, 1e-8)?;
    Ok(ObservedMoments { mean, sd, cov })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn bivariate() -> GaussianParams {
        GaussianParams::new(
            DVector::from_vec(vec![0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]),
        )
        .unwrap()
    }

    #[test]
    fn observed_moments_complete_rows_give_ml_moments() {
        let rows = [vec![1.0, 2.0], vec![3.0, 6.0], vec![2.0, 1.0]];
        let m = observed_moments(rows.iter().map(|r| r.as_slice()), 2).unwrap();
        assert!((m.mean[0] - 2.0).abs() < 1e-15);
        assert!((m.mean[1] - 3.0).abs() < 1e-15);
        assert!((m.cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.cov[(1, 1)] - 14.0 / 3.0).abs() < 1e-12);
        assert!((m.cov[(0, 1)] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn observed_moments_skip_missing_cells() {
        let rows = [vec![1.0, f64::NAN], vec![3.0, 4.0], vec![f64::NAN, 2.0]];
        let m = observed_moments(rows.iter().map(|r| r.as_slice()), 2).unwrap();
        assert_eq!(m.mean[0], 2.0);
        assert_eq!(m.mean[1], 3.0);
        // one complete pair: (3-2)(4-3)
        assert_eq!(m.cov[(0, 1)], 1.0);
        assert!(Cholesky::new(m.cov.clone()).is_some());
    }

    #[test]
    fn standard_normal_at_mode() {
        let p = GaussianParams::new(DVector::from_vec(vec![0.0]), DMatrix::identity(1, 1)).unwrap();
        let v = log_mvn_density(&[0.0], &ObsPattern::all_observed(1), &p).unwrap();
        assert!((v - (-0.5 * (2.0 * PI).ln())).abs() < 1e-15);
        assert!((v + 0.918_938_5).abs() < 1e-7);
    }

    #[test]
    fn marginal_of_first_slot() {
        let pat = ObsPattern::new(vec![true, false]);
        let v = log_mvn_density(&[1.0], &pat, &bivariate()).unwrap();
        assert!((v + 1.418_938_5).abs() < 1e-7);
    }

    #[test]
    fn bivariate_against_hand_inverse() {
        // Σ^{-1} = 1/0.75 [[1,-0.5],[-0.5,1]], det = 0.75
        let (y1, y2) = (1.0_f64, -1.0_f64);
        let q = (y1 * y1 - 2.0 * 0.5 * y1 * y2 + y2 * y2) / 0.75;
        let oracle = -(2.0 * PI).ln() - 0.5 * 0.75_f64.ln() - 0.5 * q;
        let v = log_mvn_density(&[y1, y2], &ObsPattern::all_observed(2), &bivariate()).unwrap();
        assert!((v - oracle).abs() < 1e-10);
    }

    #[test]
    fn dimension_mismatch_is_invalid_input() {
        let err = log_mvn_density(&[1.0, 2.0], &ObsPattern::new(vec![true, false]), &bivariate());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
        let err = log_mvn_density(&[1.0], &ObsPattern::all_observed(1), &bivariate());
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn singular_observed_block() {
        let p = GaussianParams {
            mean: DVector::zeros(2),
            cov: DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
        };
        let err = log_mvn_density(&[0.0, 0.0], &ObsPattern::all_observed(2), &p);
        assert_eq!(err, Err(Error::SingularCovariance));
        assert!(GaussianParams::new(p.mean.clone(), p.cov.clone()).is_err());
    }

    #[test]
    fn conditional_all_observed_is_identity() {
        let y = [0.3, -1.7];
        let m = conditional_moments(&y, &ObsPattern::all_observed(2), &bivariate()).unwrap();
        assert_eq!(m.expect.as_slice(), &y);
        assert!(m.var_correction.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conditional_all_missing_is_unconditional() {
        let p = GaussianParams::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::identity(2, 2)).unwrap();
        let m = conditional_moments(&[], &ObsPattern::all_missing(2), &p).unwrap();
        assert_eq!(m.expect, p.mean);
        assert_eq!(m.var_correction, p.cov);
    }

    #[test]
    fn conditional_schur_example() {
        let m = conditional_moments(&[1.0], &ObsPattern::new(vec![true, false]), &bivariate()).unwrap();
        assert_eq!(m.expect[0], 1.0);
        assert!((m.expect[1] - 0.5).abs() < 1e-14);
        assert!((m.var_correction[(1, 1)] - 0.75).abs() < 1e-14);
        assert_eq!(m.var_correction[(0, 0)], 0.0);
        assert_eq!(m.var_correction[(0, 1)], 0.0);
        assert_eq!(m.var_correction[(1, 0)], 0.0);

        // numerical integration of the conditional density y2 | y1 = 1,
        // p(y2 | y1) ∝ φ2((1, y2)); midpoint rule over [-10, 10]
        let p = bivariate();
        let pat = ObsPattern::all_observed(2);
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        let h = 1e-3;
        let mut x = -10.0 + 0.5 * h;
        while x < 10.0 {
            let w = log_mvn_density(&[1.0, x], &pat, &p).unwrap().exp();
            z += w;
            m1 += w * x;
            m2 += w * x * x;
            x += h;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        assert!((mean - 0.5).abs() < 1e-8);
        assert!((var - 0.75).abs() < 1e-6);
    }

    #[test]
    fn regularize_identity_untouched() {
        let out = regularize(&DMatrix::identity(3, 3), 0.0).unwrap();
        assert_eq!(out, DMatrix::identity(3, 3));
    }

    #[test]
    fn regularize_singular_rank_one() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let out = regularize(&a, 1e-8).unwrap();
        assert!((&out - &a).abs().max() <= 1e-7);
        let eig = out.clone().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn regularize_symmetrizes_exactly() {
        let mut a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 2.0, 0.2, 0.1, 0.2, 2.0]);
        a[(0, 1)] += 1e-13;
        let out = regularize(&a, 0.0).unwrap();
        assert_eq!(max_asymmetry(&out), 0.0);
    }

    #[test]
    fn regularize_gives_up_on_negative_definite() {
        let a = -DMatrix::<f64>::identity(2, 2);
        assert_eq!(regularize(&a, 0.0), Err(Error::SingularCovariance));
    }
}
