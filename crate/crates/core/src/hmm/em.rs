use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::params::{HmmParams, Latent};
use super::recursion::{log_emissions, panel_factors, scaled_recursion, LatentPosterior};
use crate::error::{Error, Result};
use crate::fmm::MIN_OCCUPANCY;
use crate::gaussian::{regularize, symmetrize};
use crate::glm::{design_row, maximize_initial, maximize_transition};
use crate::panel::{PanelDataset, SubjectRecord};

/// Conditional moments of Y_it given y_it^o for one non-dropout occasion.
/// The variance correction does not depend on the state because Σ is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct OccasionMoments {
    /// E(Y_it | y_it^o, u) for u = 1..k.
    pub expect: Vec<DVector<f64>>,
    /// Var(Y_it | y_it^o), shared by all occasions with the same pattern.
    pub var_correction: Arc<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct EStep {
    pub posterior: LatentPosterior,
    pub loglik: f64,
    /// `moments[i][t]` is `None` on dropout occasions.
    pub moments: Vec<Vec<Option<OccasionMoments>>>,
}

/// Posteriors, conditional moments and ℓ(θ) at `params`.
pub fn e_step(data: &PanelDataset, params: &HmmParams) -> Result<EStep> {
    params.check_panel(data)?;
    let factors = panel_factors(data, &params.cov)?;
    let vars: HashMap<_, _> = factors
        .iter()
        .map(|(p, f)| (p.clone(), Arc::new(f.var_correction())))
        .collect();
    let k = params.k;
    let per_subject = data
        .subjects
        .par_iter()
        .map(|rec| {
            let log_e = log_emissions(rec, params, &factors)?;
            let post = scaled_recursion(&log_e, &params.initial_for(rec), &params.transitions_for(rec))?;
            let moments = (0..rec.n_occasions())
                .map(|t| {
                    if rec.dropout[t] {
                        return Ok(None);
                    }
                    let pat = &rec.patterns[t];
                    let f = &factors[pat];
                    let yo = rec.observed_values(t);
                    let expect = (0..k)
                        .map(|u| f.conditional_mean(&yo, &params.means[u]))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(Some(OccasionMoments {
                        expect,
                        var_correction: Arc::clone(&vars[pat]),
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((post, moments))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut subjects = Vec::with_capacity(data.n());
    let mut moments = Vec::with_capacity(data.n());
    for (p, m) in per_subject {
        subjects.push(p);
        moments.push(m);
    }
    let posterior = LatentPosterior { subjects };
    Ok(EStep {
        loglik: posterior.loglik(),
        posterior,
        moments,
    })
}

/// Outcome of one M-step.
#[derive(Debug, Clone)]
pub struct MStep {
    pub params: HmmParams,
    /// Newton solves that failed; their blocks kept the previous values.
    pub newton_failures: usize,
    /// Some logit coefficient sits on the cap.
    pub separation: bool,
}

/// Expected occupancy of each substantive state over non-dropout occasions.
pub(crate) fn occupancy(data: &PanelDataset, post: &LatentPosterior, k: usize) -> Vec<f64> {
    let mut occ = vec![0.0; k];
    for (rec, sp) in data.subjects.iter().zip(&post.subjects) {
        for t in 0..rec.n_occasions() {
            if !rec.dropout[t] {
                for u in 0..k {
                    occ[u] += sp.marginals[t][u];
                }
            }
        }
    }
    occ
}

/// Measurement-model update: ẑ-weighted means of the imputed expectations
/// and the pooled scatter plus variance corrections over Σ_i (T_i − d_i+).
pub(crate) fn measurement_update(
    data: &PanelDataset,
    e: &EStep,
    k: usize,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    let r = data.r;
    let occ = occupancy(data, &e.posterior, k);
    if let Some(u) = (0..k).find(|&u| occ[u] < MIN_OCCUPANCY) {
        return Err(Error::DegenerateComponent(u + 1));
    }
    let mut sums = vec![DVector::zeros(r); k];
    for (sp, mi) in e.posterior.subjects.iter().zip(&e.moments) {
        for (t, m) in mi.iter().enumerate() {
            if let Some(m) = m {
                for u in 0..k {
                    sums[u].axpy(sp.marginals[t][u], &m.expect[u], 1.0);
                }
            }
        }
    }
    let means: Vec<DVector<f64>> = sums.into_iter().zip(&occ).map(|(s, o)| s / *o).collect();
    let mut scatter = DMatrix::zeros(r, r);
    let mut d = DVector::zeros(r);
    for (sp, mi) in e.posterior.subjects.iter().zip(&e.moments) {
        for (t, m) in mi.iter().enumerate() {
            if let Some(m) = m {
                let mut wsum = 0.0;
                for u in 0..k {
                    let z = sp.marginals[t][u];
                    if z == 0.0 {
                        continue;
                    }
                    d.copy_from(&m.expect[u]);
                    d -= &means[u];
                    scatter.syger(z, &d, &d, 1.0);
                    wsum += z;
                }
                scatter.zip_apply(&*m.var_correction, |s, v| *s += wsum * v);
            }
        }
    }
    let n_present = data.present_occasions();
    if n_present == 0 {
        return Err(Error::InvalidInput("panel has no non-dropout occasion".into()));
    }
    let mut cov = scatter / n_present as f64;
    // syger fills the lower triangle only
    for a in 0..r {
        for b in (a + 1)..r {
            cov[(a, b)] = cov[(b, a)];
        }
    }
    symmetrize(&mut cov);
    let cov = regularize(&cov, 1e-8)?;
    Ok((means, cov))
}

/// Closed-form latent update: π_u = Σ_i ẑ_i1u / n and
/// π_{u|ū} = Σ ẑ_itūu / Σ ẑ_{i,t−1,ū}. Rows with no expected origin mass
/// keep their previous values.
pub(crate) fn probability_update(
    post: &LatentPosterior,
    k: usize,
    prev_transition: &[Vec<f64>],
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = post.subjects.len() as f64;
    let mut initial = vec![0.0; k + 1];
    let mut counts = vec![vec![0.0; k + 1]; k + 1];
    for sp in &post.subjects {
        for u in 0..k {
            initial[u] += sp.marginals[0][u];
        }
        for x in &sp.pairwise {
            for v in 0..k {
                for u in 0..=k {
                    counts[v][u] += x[v][u];
                }
            }
        }
    }
    initial.iter_mut().for_each(|v| *v /= n);
    let s: f64 = initial.iter().sum();
    initial.iter_mut().for_each(|v| *v /= s);
    let mut transition = prev_transition.to_vec();
    for v in 0..k {
        let tot: f64 = counts[v].iter().sum();
        if tot >= MIN_OCCUPANCY {
            transition[v] = counts[v].iter().map(|c| c / tot).collect();
        }
    }
    transition[k] = vec![0.0; k + 1];
    transition[k][k] = 1.0;
    (initial, transition)
}

fn covariates_at(rec: &SubjectRecord, t: usize) -> &[f64] {
    rec.covariates.as_ref().map_or(&[][..], |x| &x[t][..])
}

/// Full M-step.
pub fn m_step(data: &PanelDataset, e: &EStep, params: &HmmParams) -> Result<MStep> {
    let k = params.k;
    let (means, cov) = measurement_update(data, e, k)?;
    let mut newton_failures = 0;
    let mut separation = false;
    let latent = match &params.latent {
        Latent::Probabilities { transition, .. } => {
            let (initial, transition) = probability_update(&e.posterior, k, transition);
            Latent::Probabilities { initial, transition }
        }
        Latent::Logit { initial, transition } => {
            let design1: Vec<Vec<f64>> = data.subjects.iter().map(|s| design_row(covariates_at(s, 0))).collect();
            let w1: Vec<Vec<f64>> = e.posterior.subjects.iter().map(|sp| sp.marginals[0][..k].to_vec()).collect();
            let new_initial = match maximize_initial(&design1, &w1, initial) {
                Ok(up) => {
                    separation |= up.separation;
                    up.params
                }
                Err(Error::NewtonFailed { .. }) => {
                    newton_failures += 1;
                    initial.clone()
                }
                Err(err) => return Err(err),
            };
            let mut designs = Vec::new();
            let mut weights = Vec::new();
            for (rec, sp) in data.subjects.iter().zip(&e.posterior.subjects) {
                for t in 1..rec.n_occasions() {
                    designs.push(design_row(covariates_at(rec, t)));
                    weights.push(sp.pairwise[t - 1].clone());
                }
            }
            let new_transition = if designs.is_empty() {
                transition.clone()
            } else {
                let up = maximize_transition(&designs, &weights, transition)?;
                newton_failures += up.failed_rows.len();
                separation |= !up.separation_rows.is_empty();
                up.params
            };
            Latent::Logit {
                initial: new_initial,
                transition: new_transition,
            }
        }
    };
    Ok(MStep {
        params: HmmParams {
            k,
            means,
            cov,
            latent,
        },
        newton_failures,
        separation,
    })
}
