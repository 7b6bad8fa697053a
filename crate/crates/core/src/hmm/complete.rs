//! Imputation-free EM for panels with no missing cells, no dropout and no
//! covariates: full-vector Gaussian densities and plain weighted moments.
//! Serves as a reference for the MAR-aware path.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::params::{HmmParams, TransitionSeq};
use super::recursion::{scaled_recursion, LatentPosterior};
use super::{probability_update, Latent};
use crate::error::{Error, Result};
use crate::fmm::{relative_change, MIN_OCCUPANCY};
use crate::gaussian::regularize;
use crate::panel::PanelDataset;

fn check(data: &PanelDataset) -> Result<()> {
    if data.any_missing() || data.any_dropout() || data.has_covariates() {
        return Err(Error::InvalidInput(
            "complete-data path needs fully observed responses without dropout or covariates".into(),
        ));
    }
    Ok(())
}

fn full_log_density(y: &[f64], mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>, log_det: f64) -> f64 {
    let r = y.len();
    let d = DVector::from_fn(r, |j, _| y[j] - mean[j]);
    let z = chol.l().solve_lower_triangular(&d).expect("nonsingular factor");
    -0.5 * (r as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + z.norm_squared())
}

/// Posteriors and ℓ(θ).
pub fn e_step(data: &PanelDataset, params: &HmmParams) -> Result<LatentPosterior> {
    check(data)?;
    let (initial, transition) = params
        .probabilities()
        .ok_or_else(|| Error::InvalidInput("complete-data path has no covariate model".into()))?;
    let chol = Cholesky::new(params.cov.clone()).ok_or(Error::SingularCovariance)?;
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let k = params.k;
    let subjects = data
        .subjects
        .iter()
        .map(|rec| {
            let log_e: Vec<Vec<f64>> = rec
                .responses
                .iter()
                .map(|y| {
                    let mut row: Vec<f64> = (0..k).map(|u| full_log_density(y, &params.means[u], &chol, log_det)).collect();
                    row.push(f64::NEG_INFINITY);
                    row
                })
                .collect();
            scaled_recursion(&log_e, initial, &TransitionSeq::Fixed(transition))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPosterior { subjects })
}

pub fn m_step(data: &PanelDataset, post: &LatentPosterior, params: &HmmParams) -> Result<HmmParams> {
    let (k, r) = (params.k, data.r);
    let mut occ = vec![0.0; k];
    let mut sums = vec![DVector::<f64>::zeros(r); k];
    for (rec, sp) in data.subjects.iter().zip(&post.subjects) {
        for (y, z) in rec.responses.iter().zip(&sp.marginals) {
            let y = DVector::from_row_slice(y);
            for u in 0..k {
                occ[u] += z[u];
                sums[u] += &y * z[u];
            }
        }
    }
    if let Some(u) = (0..k).find(|&u| occ[u] < MIN_OCCUPANCY) {
        return Err(Error::DegenerateComponent(u + 1));
    }
    let means: Vec<DVector<f64>> = sums.into_iter().zip(&occ).map(|(s, o)| s / *o).collect();
    let mut scatter = DMatrix::zeros(r, r);
    for (rec, sp) in data.subjects.iter().zip(&post.subjects) {
        for (y, z) in rec.responses.iter().zip(&sp.marginals) {
            let y = DVector::from_row_slice(y);
            for u in 0..k {
                let d = &y - &means[u];
                scatter += z[u] * &d * d.transpose();
            }
        }
    }
    let cov = regularize(&(scatter / data.total_occasions() as f64), 1e-8)?;
    let (_, prev) = params.probabilities().expect("checked in e_step");
    let (initial, transition) = probability_update(post, k, prev);
    Ok(HmmParams {
        k,
        means,
        cov,
        latent: Latent::Probabilities { initial, transition },
    })
}

/// EM from `start`; returns the final parameters and the ℓ trace.
pub fn run(data: &PanelDataset, start: HmmParams, tol: f64, max_iter: usize) -> Result<(HmmParams, Vec<f64>)> {
    let mut params = start;
    let mut post = e_step(data, &params)?;
    let mut ll = post.loglik();
    let mut trace = vec![ll];
    for _ in 0..max_iter {
        params = m_step(data, &post, &params)?;
        post = e_step(data, &params)?;
        let next = post.loglik();
        trace.push(next);
        let change = relative_change(ll, next);
        ll = next;
        if change <= tol {
            break;
        }
    }
    Ok((params, trace))
}
