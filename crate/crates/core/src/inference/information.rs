//! Observed information by numerical differentiation of the score.
//!
//! The score is the gradient of the expected complete-data log-likelihood
//! Q(θ'|θ) at θ' = θ, with posteriors and conditional moments computed at θ;
//! by Oakes' identity this equals ∇ℓ(θ). Differentiation uses the
//! unconstrained layout
//!
//! `θ = (μ_1, …, μ_k, vech_L, B, Γ)`
//!
//! where `vech_L` lists the lower triangle of the Cholesky factor of Σ row by
//! row with log-diagonal entries, and B, Γ are the multinomial-logit
//! coefficients (intercept-only when the model has no covariates).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{natural_layout, SeMethod, StdErrReport};
use crate::error::{Error, Result};
use crate::glm::{
    design_row, destinations, initial_probs_design, transition_matrix_design, InitialLogitParams,
    TransitionLogitParams, LOGIT_CAP,
};
use crate::hmm::{e_step, FitResult, HmmParams, Latent};
use crate::panel::PanelDataset;

#[derive(Debug, Clone, Copy)]
pub struct InfoOptions {
    /// Relative step: h_j = step · max(1, |θ_j|).
    pub step: f64,
    /// Smallest eigenvalue kept when J is not positive definite.
    pub eigen_floor: f64,
}

impl Default for InfoOptions {
    fn default() -> Self {
        InfoOptions {
            step: 1e-5,
            eigen_floor: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    k: usize,
    r: usize,
    q: usize,
    logit: bool,
}

impl Layout {
    fn of(params: &HmmParams) -> Self {
        Layout {
            k: params.k,
            r: params.r(),
            q: 1 + params.p(),
            logit: params.has_covariates(),
        }
    }

    fn n_mu(&self) -> usize {
        self.k * self.r
    }

    fn n_chol(&self) -> usize {
        self.r * (self.r + 1) / 2
    }

    fn n_beta(&self) -> usize {
        (self.k - 1) * self.q
    }

    fn dim(&self) -> usize {
        self.n_mu() + self.n_chol() + self.n_beta() + self.k * self.k * self.q
    }
}

fn logits(params: &HmmParams) -> (InitialLogitParams, TransitionLogitParams) {
    match &params.latent {
        Latent::Probabilities { initial, transition } => (
            InitialLogitParams::from_probs(&initial[..params.k], 1),
            TransitionLogitParams::from_matrix(transition, 1),
        ),
        Latent::Logit { initial, transition } => (initial.clone(), transition.clone()),
    }
}

/// Unconstrained coordinates of `params`.
pub fn to_unconstrained(params: &HmmParams) -> Result<Vec<f64>> {
    let lay = Layout::of(params);
    let mut theta = Vec::with_capacity(lay.dim());
    for m in &params.means {
        theta.extend(m.iter());
    }
    let l = params.cov.clone().cholesky().ok_or(Error::SingularCovariance)?.l();
    for j in 0..lay.r {
        for c in 0..=j {
            theta.push(if j == c { l[(j, j)].ln() } else { l[(j, c)] });
        }
    }
    let (b, g) = logits(params);
    theta.extend(b.coef.iter().flatten());
    theta.extend(g.coef.iter().flatten().flatten());
    Ok(theta)
}

/// Inverse of [`to_unconstrained`]; `template` fixes k, r, p and whether the
/// latent model is reported as probabilities or logits.
pub fn theta_to_params(theta: &[f64], template: &HmmParams) -> Result<HmmParams> {
    let lay = Layout::of(template);
    if theta.len() != lay.dim() {
        return Err(Error::InvalidInput(format!("θ has length {}, expected {}", theta.len(), lay.dim())));
    }
    let (k, r, q) = (lay.k, lay.r, lay.q);
    let means = (0..k).map(|u| DVector::from_row_slice(&theta[u * r..(u + 1) * r])).collect();
    let mut pos = lay.n_mu();
    let mut l = DMatrix::zeros(r, r);
    for j in 0..r {
        for c in 0..=j {
            l[(j, c)] = if j == c { theta[pos].exp() } else { theta[pos] };
            pos += 1;
        }
    }
    let cov = &l * l.transpose();
    let mut b = InitialLogitParams::zeros(k, q);
    for row in b.coef.iter_mut() {
        row.copy_from_slice(&theta[pos..pos + q]);
        pos += q;
    }
    let mut g = TransitionLogitParams::zeros(k, q);
    for row in g.coef.iter_mut() {
        for c in row.iter_mut() {
            c.copy_from_slice(&theta[pos..pos + q]);
            pos += q;
        }
    }
    let latent = if lay.logit {
        Latent::Logit { initial: b, transition: g }
    } else {
        Latent::Probabilities {
            initial: initial_probs_design(&[1.0], &b),
            transition: transition_matrix_design(&[1.0], &g),
        }
    };
    let mut cov = cov;
    crate::gaussian::symmetrize(&mut cov);
    Ok(HmmParams { k, means, cov, latent })
}

fn covariates_at(rec: &crate::panel::SubjectRecord, t: usize) -> &[f64] {
    rec.covariates.as_ref().map_or(&[][..], |x| &x[t][..])
}

/// ∇ℓ at θ (unconstrained layout), via the expected complete-data
/// log-likelihood with posteriors at θ.
pub fn score(data: &PanelDataset, theta: &[f64], template: &HmmParams) -> Result<Vec<f64>> {
    let params = theta_to_params(theta, template)?;
    let lay = Layout::of(&params);
    let (k, r, q) = (lay.k, lay.r, lay.q);
    let e = e_step(data, &params)?;
    let chol = params.cov.clone().cholesky().ok_or(Error::SingularCovariance)?;
    let sigma_inv = chol.inverse();
    let l = chol.l();

    let mut grad = vec![0.0; lay.dim()];
    let mut resid = vec![DVector::<f64>::zeros(r); k];
    let mut scatter = DMatrix::<f64>::zeros(r, r);
    for (sp, mi) in e.posterior.subjects.iter().zip(&e.moments) {
        for (t, m) in mi.iter().enumerate() {
            let Some(m) = m else { continue };
            let mut wsum = 0.0;
            for u in 0..k {
                let z = sp.marginals[t][u];
                if z == 0.0 {
                    continue;
                }
                let d = &m.expect[u] - &params.means[u];
                resid[u].axpy(z, &d, 1.0);
                scatter += z * &d * d.transpose();
                wsum += z;
            }
            scatter.zip_apply(&*m.var_correction, |s, v| *s += wsum * v);
        }
    }
    for u in 0..k {
        let g = &sigma_inv * &resid[u];
        grad[u * r..(u + 1) * r].copy_from_slice(g.as_slice());
    }
    let n_present = data.present_occasions() as f64;
    let gmat = (&sigma_inv * &scatter * &sigma_inv - &sigma_inv * n_present) * 0.5;
    let dl = 2.0 * gmat * &l;
    let mut pos = lay.n_mu();
    for j in 0..r {
        for c in 0..=j {
            grad[pos] = if j == c { dl[(j, j)] * l[(j, j)] } else { dl[(j, c)] };
            pos += 1;
        }
    }

    let (b, g) = logits(&params);
    let beta_pos = pos;
    let gamma_pos = beta_pos + lay.n_beta();
    for (rec, sp) in data.subjects.iter().zip(&e.posterior.subjects) {
        let d1 = if lay.logit { design_row(covariates_at(rec, 0)) } else { vec![1.0] };
        let pi = initial_probs_design(&d1, &b);
        for u in 1..k {
            let res = sp.marginals[0][u] - pi[u];
            for c in 0..q {
                grad[beta_pos + (u - 1) * q + c] += res * d1[c];
            }
        }
        for t in 1..rec.n_occasions() {
            let dt = if lay.logit { design_row(covariates_at(rec, t)) } else { vec![1.0] };
            let tr = transition_matrix_design(&dt, &g);
            let xi = &sp.pairwise[t - 1];
            for v in 0..k {
                let w: f64 = xi[v].iter().sum();
                if w == 0.0 {
                    continue;
                }
                for (j, dest) in destinations(k, v).enumerate() {
                    let res = xi[v][dest] - w * tr[v][dest];
                    let base = gamma_pos + (v * k + j) * q;
                    for c in 0..q {
                        grad[base + c] += res * dt[c];
                    }
                }
            }
        }
    }
    Ok(grad)
}

fn is_boundary_coord(theta: &[f64], j: usize, lay: &Layout) -> bool {
    j >= lay.n_mu() + lay.n_chol() && theta[j].abs() >= LOGIT_CAP - 1e-9
}

/// Standard errors from the inverse observed information
/// `J(θ̂) = −∂score/∂θ`, mapped to the natural layout by the delta method.
/// Capped logits are held fixed and reported on the boundary.
pub fn info_matrix_se(data: &PanelDataset, fitted: &FitResult, opts: &InfoOptions) -> Result<StdErrReport> {
    let params = &fitted.params;
    let lay = Layout::of(params);
    let theta = to_unconstrained(params)?;
    let free: Vec<usize> = (0..theta.len()).filter(|&j| !is_boundary_coord(&theta, j, &lay)).collect();
    let nf = free.len();
    let step = |j: usize| opts.step * theta[j].abs().max(1.0);

    let mut jac = DMatrix::zeros(nf, nf);
    for (a, &j) in free.iter().enumerate() {
        let h = step(j);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += h;
        dn[j] -= h;
        let su = score(data, &up, params)?;
        let sd = score(data, &dn, params)?;
        for (b, &i) in free.iter().enumerate() {
            jac[(b, a)] = (su[i] - sd[i]) / (2.0 * h);
        }
    }
    let info = -(&jac + jac.transpose()) * 0.5;
    let eig = SymmetricEigen::new(info);
    let non_pd = eig.eigenvalues.iter().any(|&v| !(v > 0.0));
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v.max(opts.eigen_floor));
    let cov_theta = &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();

    let (names, estimates) = natural_layout(params);
    let m = estimates.len();
    let mut dmat = DMatrix::zeros(m, nf);
    for (a, &j) in free.iter().enumerate() {
        let h = step(j);
        let mut up = theta.clone();
        let mut dn = theta.clone();
        up[j] += h;
        dn[j] -= h;
        let (_, vu) = natural_layout(&theta_to_params(&up, params)?);
        let (_, vd) = natural_layout(&theta_to_params(&dn, params)?);
        for i in 0..m {
            dmat[(i, a)] = (vu[i] - vd[i]) / (2.0 * h);
        }
    }
    let cov_nat = &dmat * cov_theta * dmat.transpose();
    let boundary: Vec<bool> = names
        .iter()
        .zip(&estimates)
        .map(|(name, v)| {
            if name.starts_with("pi[") || name.starts_with("Pi[") {
                *v <= 1e-12
            } else if name.starts_with("beta[") || name.starts_with("gamma[") {
                v.abs() >= LOGIT_CAP - 1e-9
            } else {
                false
            }
        })
        .collect();
    let se = (0..m)
        .map(|i| if boundary[i] { 0.0 } else { cov_nat[(i, i)].max(0.0).sqrt() })
        .collect();
    if non_pd {
        log::warn!("observed information is not positive definite; eigenvalues floored at {}", opts.eigen_floor);
    }
    Ok(StdErrReport {
        method: SeMethod::Information,
        names,
        estimates,
        se,
        boundary,
        non_pd,
        replicates: 0,
        replicate_ok: Vec::new(),
        n_failed: 0,
    })
}
