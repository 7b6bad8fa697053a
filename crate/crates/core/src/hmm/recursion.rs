use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::params::{HmmParams, TransitionSeq};
use crate::error::{Error, Result};
use crate::gaussian::{factor_table, ObsPattern, PatternFactor};
use crate::panel::{PanelDataset, SubjectRecord};

/// Smoothed posteriors for one subject. States are 0-based; index `k` is
/// the dropout state.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectPosterior {
    /// `T_i × (k+1)`: ẑ_itu.
    pub marginals: Vec<Vec<f64>>,
    /// `T_i − 1` slices: `pairwise[t−1][ū][u]` = ẑ_itūu for the move into
    /// occasion t.
    pub pairwise: Vec<Vec<Vec<f64>>>,
    /// log f(d_i, 𝒴_i^o).
    pub loglik: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentPosterior {
    pub subjects: Vec<SubjectPosterior>,
}

impl LatentPosterior {
    pub fn loglik(&self) -> f64 {
        self.subjects.iter().map(|s| s.loglik).sum()
    }

    /// Relabels substantive states: new `u` is old `perm[u]`.
    pub fn permuted(&self, perm: &[usize]) -> LatentPosterior {
        let mut full = perm.to_vec();
        full.push(perm.len());
        LatentPosterior {
            subjects: self
                .subjects
                .iter()
                .map(|s| SubjectPosterior {
                    marginals: s.marginals.iter().map(|z| full.iter().map(|&o| z[o]).collect()).collect(),
                    pairwise: s
                        .pairwise
                        .iter()
                        .map(|x| full.iter().map(|&a| full.iter().map(|&b| x[a][b]).collect()).collect())
                        .collect(),
                    loglik: s.loglik,
                })
                .collect(),
        }
    }
}

/// Pattern factorizations of Σ for every non-dropout occasion in the panel.
pub(crate) fn panel_factors(data: &PanelDataset, cov: &DMatrix<f64>) -> Result<HashMap<ObsPattern, PatternFactor>> {
    factor_table(
        cov,
        data.subjects.iter().flat_map(|s| {
            s.patterns
                .iter()
                .zip(&s.dropout)
                .filter(|(_, &d)| !d)
                .map(|(p, _)| p)
        }),
    )
}

/// log P(y_it^o, d_it | U_it = u) for 0-based occasion `t` and state `u`
/// (`u = k` is the dropout state):
///
/// * d = 0, u < k: log φ(y^o; μ_u^o, Σ^oo), 0 when every response is missing
/// * d = 0, u = k: −∞
/// * d = 1, u = k: 0
/// * d = 1, u < k: −∞
pub fn emission_logdensity(record: &SubjectRecord, t: usize, u: usize, params: &HmmParams) -> Result<f64> {
    let k = params.k;
    if u > k {
        return Err(Error::InvalidInput(format!("state {u} out of range 0..={k}")));
    }
    if t >= record.n_occasions() {
        return Err(Error::InvalidInput(format!("occasion {t} out of range")));
    }
    if record.dropout[t] {
        return Ok(if u == k { 0.0 } else { f64::NEG_INFINITY });
    }
    if u == k {
        return Ok(f64::NEG_INFINITY);
    }
    let f = PatternFactor::new(&params.cov, &record.patterns[t])?;
    f.log_density(&record.observed_values(t), &params.means[u])
}

/// `T_i × (k+1)` matrix of emission log densities.
pub(crate) fn log_emissions(
    record: &SubjectRecord,
    params: &HmmParams,
    factors: &HashMap<ObsPattern, PatternFactor>,
) -> Result<Vec<Vec<f64>>> {
    let k = params.k;
    (0..record.n_occasions())
        .map(|t| {
            let mut row = vec![f64::NEG_INFINITY; k + 1];
            if record.dropout[t] {
                row[k] = 0.0;
            } else {
                let pat = &record.patterns[t];
                let f = match factors.get(pat) {
                    Some(f) => f,
                    None => return Err(Error::InvalidInput("pattern missing from factor table".into())),
                };
                let yo = record.observed_values(t);
                for u in 0..k {
                    row[u] = f.log_density(&yo, &params.means[u])?;
                }
            }
            Ok(row)
        })
        .collect()
}

/// Scaled forward-backward pass.
///
/// At each occasion the emission log densities are shifted by their maximum
/// m_t and the forward vector is normalized by c_t; log f = Σ_t (log c_t + m_t).
/// The backward pass divides by the same c_t, so α̂_t β̂_t is the smoothed
/// marginal directly.
pub(crate) fn scaled_recursion(
    log_e: &[Vec<f64>],
    initial: &[f64],
    trans: &TransitionSeq<'_>,
) -> Result<SubjectPosterior> {
    let n_t = log_e.len();
    let s = initial.len();
    // flat T × s buffers, row t at [t*s .. (t+1)*s]
    let mut e = vec![0.0; n_t * s];
    let mut alpha = vec![0.0; n_t * s];
    let mut c = vec![0.0; n_t];
    let mut loglik = 0.0;
    for t in 0..n_t {
        let m = log_e[t].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if m == f64::NEG_INFINITY {
            return Err(Error::ImpossibleObservation { t: t + 1 });
        }
        let row = t * s;
        for u in 0..s {
            let l = log_e[t][u];
            e[row + u] = if l == f64::NEG_INFINITY { 0.0 } else { (l - m).exp() };
        }
        if t == 0 {
            for u in 0..s {
                alpha[u] = initial[u] * e[u];
            }
        } else {
            let tr = trans.at(t);
            let (prev, cur) = alpha.split_at_mut(row);
            let prev = &prev[row - s..];
            for u in 0..s {
                if e[row + u] == 0.0 {
                    cur[u] = 0.0;
                    continue;
                }
                let mut acc = 0.0;
                for v in 0..s {
                    acc += prev[v] * tr[v][u];
                }
                cur[u] = acc * e[row + u];
            }
        }
        let a = &mut alpha[row..row + s];
        let ct: f64 = a.iter().sum();
        if !(ct > 0.0) || !ct.is_finite() {
            return Err(Error::ImpossibleObservation { t: t + 1 });
        }
        a.iter_mut().for_each(|v| *v /= ct);
        c[t] = ct;
        loglik += ct.ln() + m;
    }

    let mut beta = vec![1.0; n_t * s];
    let mut w = vec![0.0; s];
    for t in (1..n_t).rev() {
        let tr = trans.at(t);
        let row = t * s;
        for u in 0..s {
            w[u] = e[row + u] * beta[row + u];
        }
        for v in 0..s {
            let mut acc = 0.0;
            for u in 0..s {
                acc += tr[v][u] * w[u];
            }
            beta[row - s + v] = acc / c[t];
        }
    }

    let marginals: Vec<Vec<f64>> = (0..n_t)
        .map(|t| {
            let row = t * s;
            let mut g: Vec<f64> = (0..s).map(|u| alpha[row + u] * beta[row + u]).collect();
            let tot: f64 = g.iter().sum();
            g.iter_mut().for_each(|v| *v /= tot);
            g
        })
        .collect();
    let pairwise: Vec<Vec<Vec<f64>>> = (1..n_t)
        .map(|t| {
            let tr = trans.at(t);
            let (row, prev) = (t * s, (t - 1) * s);
            let mut x = vec![vec![0.0; s]; s];
            let mut tot = 0.0;
            for v in 0..s {
                let a = alpha[prev + v];
                if a == 0.0 {
                    continue;
                }
                for u in 0..s {
                    let val = a * tr[v][u] * e[row + u] * beta[row + u] / c[t];
                    x[v][u] = val;
                    tot += val;
                }
            }
            x.iter_mut().flatten().for_each(|v| *v /= tot);
            x
        })
        .collect();
    Ok(SubjectPosterior {
        marginals,
        pairwise,
        loglik,
    })
}

/// Smoothed marginal and pairwise posteriors plus the subject's manifest
/// log-likelihood log f(d_i, 𝒴_i^o).
pub fn forward_backward(record: &SubjectRecord, params: &HmmParams) -> Result<SubjectPosterior> {
    let factors = factor_table(&params.cov, record.patterns.iter().zip(&record.dropout).filter(|(_, &d)| !d).map(|(p, _)| p))?;
    let log_e = log_emissions(record, params, &factors)?;
    scaled_recursion(&log_e, &params.initial_for(record), &params.transitions_for(record))
}

/// Posteriors for every subject (in parallel over subjects).
pub fn posteriors(data: &PanelDataset, params: &HmmParams) -> Result<LatentPosterior> {
    params.check_panel(data)?;
    let factors = panel_factors(data, &params.cov)?;
    let subjects = data
        .subjects
        .par_iter()
        .map(|rec| {
            let log_e = log_emissions(rec, params, &factors)?;
            scaled_recursion(&log_e, &params.initial_for(rec), &params.transitions_for(rec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPosterior { subjects })
}

/// Observed-data log-likelihood ℓ(θ) = Σ_i log f(d_i, 𝒴_i^o).
pub fn loglik(data: &PanelDataset, params: &HmmParams) -> Result<f64> {
    Ok(posteriors(data, params)?.loglik())
}
