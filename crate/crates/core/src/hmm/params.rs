use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::check_covariance;
use crate::glm::{
    design_row, destinations, initial_probs_design, transition_matrix_design, InitialLogitParams,
    TransitionLogitParams,
};
use crate::panel::{PanelDataset, SubjectRecord};

const ROW_SUM_TOL: f64 = 1e-12;

/// Latent-model parameters: plain probabilities, or multinomial logits in
/// the subject covariates.
#[derive(Debug, Clone, PartialEq)]
pub enum Latent {
    Probabilities {
        /// Length k+1, last entry 0.
        initial: Vec<f64>,
        /// (k+1) × (k+1), last row (0, …, 0, 1).
        transition: Vec<Vec<f64>>,
    },
    Logit {
        initial: InitialLogitParams,
        transition: TransitionLogitParams,
    },
}

/// Gaussian-emission HMM with k substantive states, a shared covariance and
/// an absorbing dropout state k+1 (index `k` in 0-based code).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "HmmParamsRepr", try_from = "HmmParamsRepr")]
pub struct HmmParams {
    pub k: usize,
    pub means: Vec<DVector<f64>>,
    pub cov: DMatrix<f64>,
    pub latent: Latent,
}

/// Transition matrices for one subject, indexed by the destination occasion.
#[derive(Debug)]
pub enum TransitionSeq<'a> {
    Fixed(&'a [Vec<f64>]),
    Varying { mats: Vec<Vec<Vec<f64>>>, index: Vec<usize> },
}

impl TransitionSeq<'_> {
    /// Matrix governing the move into occasion `t` (0-based, t ≥ 1).
    pub fn at(&self, t: usize) -> &[Vec<f64>] {
        match self {
            TransitionSeq::Fixed(m) => m,
            TransitionSeq::Varying { mats, index } => &mats[index[t - 1]],
        }
    }
}

fn same_row(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl HmmParams {
    pub fn new(means: Vec<DVector<f64>>, cov: DMatrix<f64>, latent: Latent) -> Result<Self> {
        let params = HmmParams {
            k: means.len(),
            means,
            cov,
            latent,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k;
        if k == 0 || self.means.len() != k {
            return Err(Error::InvalidInput("need k ≥ 1 state means".into()));
        }
        let r = self.means[0].len();
        if r == 0 || self.means.iter().any(|m| m.len() != r || m.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidInput("means must be finite with a common length".into()));
        }
        if self.cov.nrows() != r || self.cov.ncols() != r {
            return Err(Error::InvalidInput("covariance dimension mismatch".into()));
        }
        check_covariance(&self.cov)?;
        match &self.latent {
            Latent::Probabilities { initial, transition } => {
                check_prob_row(initial, k + 1, "initial")?;
                if initial[k] != 0.0 {
                    return Err(Error::InvalidInput("initial dropout probability must be 0".into()));
                }
                if transition.len() != k + 1 {
                    return Err(Error::InvalidInput("transition matrix must have k+1 rows".into()));
                }
                for row in transition {
                    check_prob_row(row, k + 1, "transition")?;
                }
                if transition[k][..k].iter().any(|&v| v != 0.0) || transition[k][k] != 1.0 {
                    return Err(Error::InvalidInput("dropout row must be (0, …, 0, 1)".into()));
                }
            }
            Latent::Logit { initial, transition } => {
                if initial.k != k || transition.k != k || initial.q != transition.q || initial.q == 0 {
                    return Err(Error::InvalidInput("logit parameters do not match k".into()));
                }
                let q = initial.q;
                let ok = initial.coef.len() == k - 1
                    && initial.coef.iter().all(|c| c.len() == q)
                    && transition.coef.len() == k
                    && transition.coef.iter().all(|row| row.len() == k && row.iter().all(|c| c.len() == q));
                if !ok {
                    return Err(Error::InvalidInput("logit coefficient shapes are inconsistent".into()));
                }
                if initial.coef.iter().chain(transition.coef.iter().flatten()).flatten().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidInput("logit coefficients must be finite".into()));
                }
            }
        }
        Ok(())
    }

    pub fn r(&self) -> usize {
        self.means[0].len()
    }

    pub fn has_covariates(&self) -> bool {
        matches!(self.latent, Latent::Logit { .. })
    }

    /// Number of covariates p (0 without a logit latent model).
    pub fn p(&self) -> usize {
        match &self.latent {
            Latent::Probabilities { .. } => 0,
            Latent::Logit { initial, .. } => initial.q - 1,
        }
    }

    /// Free parameters: `k·r + r(r+1)/2 + (k−1)(1+p) + k·k·(1+p)`. Each
    /// substantive transition row has k free entries, dropout included.
    pub fn n_par(&self) -> usize {
        let (k, r, q) = (self.k, self.r(), 1 + self.p());
        k * r + r * (r + 1) / 2 + (k - 1) * q + k * k * q
    }

    /// Initial probabilities (length k+1) for a subject.
    pub fn initial_for(&self, rec: &SubjectRecord) -> Vec<f64> {
        match &self.latent {
            Latent::Probabilities { initial, .. } => initial.clone(),
            Latent::Logit { initial, .. } => initial_probs_design(&design_row(covariates_at(rec, 0)), initial),
        }
    }

    /// Transition matrices for a subject's occasions 2..T_i.
    pub fn transitions_for(&self, rec: &SubjectRecord) -> TransitionSeq<'_> {
        match &self.latent {
            Latent::Probabilities { transition, .. } => TransitionSeq::Fixed(transition),
            Latent::Logit { transition, .. } => {
                let mut mats = Vec::new();
                let mut index = Vec::with_capacity(rec.n_occasions().saturating_sub(1));
                let mut last: Option<&[f64]> = None;
                for t in 1..rec.n_occasions() {
                    let x = covariates_at(rec, t);
                    if last.is_none_or(|l| !same_row(l, x)) {
                        mats.push(transition_matrix_design(&design_row(x), transition));
                        last = Some(x);
                    }
                    index.push(mats.len() - 1);
                }
                TransitionSeq::Varying { mats, index }
            }
        }
    }

    /// Checks that a panel can be evaluated under these parameters.
    pub fn check_panel(&self, data: &PanelDataset) -> Result<()> {
        if data.r != self.r() {
            return Err(Error::InvalidInput(format!(
                "panel has {} responses, parameters {}",
                data.r,
                self.r()
            )));
        }
        if self.has_covariates() && data.p != self.p() {
            return Err(Error::InvalidInput(format!(
                "panel has {} covariates, parameters expect {}",
                data.p,
                self.p()
            )));
        }
        Ok(())
    }

    /// Relabels substantive states: new state `u` is old state `perm[u]`.
    /// The dropout state stays last; logits are re-referenced accordingly.
    pub fn permuted(&self, perm: &[usize]) -> HmmParams {
        let k = self.k;
        let mut full = perm.to_vec();
        full.push(k);
        let means = perm.iter().map(|&o| self.means[o].clone()).collect();
        let latent = match &self.latent {
            Latent::Probabilities { initial, transition } => Latent::Probabilities {
                initial: full.iter().map(|&o| initial[o]).collect(),
                transition: full.iter().map(|&a| full.iter().map(|&b| transition[a][b]).collect()).collect(),
            },
            Latent::Logit { initial, transition } => {
                let q = initial.q;
                let beta = |u: usize| -> Vec<f64> { if u == 0 { vec![0.0; q] } else { initial.coef[u - 1].clone() } };
                let base = beta(perm[0]);
                let mut b = initial.clone();
                for u in 1..k {
                    b.coef[u - 1] = beta(perm[u]).iter().zip(&base).map(|(x, y)| x - y).collect();
                }
                // γ for (origin, dest) in old labels; the self logit is 0
                let gamma = |o: usize, d: usize| -> Vec<f64> {
                    if o == d {
                        return vec![0.0; q];
                    }
                    let j = destinations(k, o).position(|x| x == d).expect("destination");
                    transition.coef[o][j].clone()
                };
                let mut g = transition.clone();
                for nu in 0..k {
                    for (j, nd) in destinations(k, nu).enumerate() {
                        g.coef[nu][j] = gamma(full[nu], full[nd]);
                    }
                }
                Latent::Logit { initial: b, transition: g }
            }
        };
        HmmParams {
            k,
            means,
            cov: self.cov.clone(),
            latent,
        }
    }

    /// Initial and transition probabilities for a covariate-free model.
    pub fn probabilities(&self) -> Option<(&[f64], &[Vec<f64>])> {
        match &self.latent {
            Latent::Probabilities { initial, transition } => Some((initial, transition)),
            Latent::Logit { .. } => None,
        }
    }
}

fn covariates_at(rec: &SubjectRecord, t: usize) -> &[f64] {
    rec.covariates.as_ref().map_or(&[][..], |x| &x[t][..])
}

fn check_prob_row(row: &[f64], len: usize, what: &str) -> Result<()> {
    if row.len() != len {
        return Err(Error::InvalidInput(format!("{what} row must have length {len}")));
    }
    if row.iter().any(|v| !(*v >= 0.0 && *v <= 1.0)) {
        return Err(Error::InvalidInput(format!("{what} probabilities must lie in [0, 1]")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_SUM_TOL {
        return Err(Error::InvalidInput(format!("{what} row sums to {s}, not 1")));
    }
    Ok(())
}

/// `π_u = 1/k`, and transition rows with `(h+1)/(h+k+1)` on the diagonal and
/// `1/(h+k+1)` elsewhere; the dropout row is absorbing.
pub fn default_latent_probabilities(k: usize, h: f64) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut initial = vec![1.0 / k as f64; k + 1];
    initial[k] = 0.0;
    let denom = h + (k as f64 + 1.0);
    let mut transition = vec![vec![1.0 / denom; k + 1]; k + 1];
    for (u, row) in transition.iter_mut().enumerate().take(k) {
        row[u] = (h + 1.0) / denom;
    }
    transition[k] = vec![0.0; k + 1];
    transition[k][k] = 1.0;
    (initial, transition)
}

/// Serialized layout of [`HmmParams`].
#[derive(Debug, Clone, Serialize, Deserialize)]
struct HmmParamsRepr {
    k: usize,
    r: usize,
    means: Vec<Vec<f64>>,
    cov: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transition: Option<Vec<Vec<f64>>>,
    /// k−1 rows of length 1+p.
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<Vec<Vec<f64>>>,
    /// k origins × k destinations (dropout last) × (1+p).
    #[serde(rename = "Gamma", default, skip_serializing_if = "Option::is_none")]
    gamma: Option<Vec<Vec<Vec<f64>>>>,
}

impl From<HmmParams> for HmmParamsRepr {
    fn from(p: HmmParams) -> Self {
        let r = p.r();
        let mut repr = HmmParamsRepr {
            k: p.k,
            r,
            means: p.means.iter().map(|m| m.iter().cloned().collect()).collect(),
            cov: (0..r).map(|a| (0..r).map(|b| p.cov[(a, b)]).collect()).collect(),
            initial: None,
            transition: None,
            b: None,
            gamma: None,
        };
        match p.latent {
            Latent::Probabilities { initial, transition } => {
                repr.initial = Some(initial);
                repr.transition = Some(transition);
            }
            Latent::Logit { initial, transition } => {
                repr.b = Some(initial.coef);
                repr.gamma = Some(transition.coef);
            }
        }
        repr
    }
}

impl TryFrom<HmmParamsRepr> for HmmParams {
    type Error = Error;

    fn try_from(repr: HmmParamsRepr) -> Result<Self> {
        let r = repr.r;
        if repr.means.len() != repr.k || repr.cov.len() != r || repr.cov.iter().any(|row| row.len() != r) {
            return Err(Error::InvalidInput("parameter file has inconsistent dimensions".into()));
        }
        let means = repr.means.iter().map(|m| DVector::from_row_slice(m)).collect();
        let cov = DMatrix::from_fn(r, r, |a, b| repr.cov[a][b]);
        let latent = match (repr.initial, repr.transition, repr.b, repr.gamma) {
            (Some(initial), Some(transition), None, None) => Latent::Probabilities { initial, transition },
            (None, None, Some(b), Some(gamma)) => {
                let q = gamma
                    .first()
                    .and_then(|row| row.first())
                    .map(|c| c.len())
                    .ok_or_else(|| Error::InvalidInput("Gamma must not be empty".into()))?;
                Latent::Logit {
                    initial: InitialLogitParams { coef: b, k: repr.k, q },
                    transition: TransitionLogitParams {
                        coef: gamma,
                        k: repr.k,
                        q,
                    },
                }
            }
            _ => {
                return Err(Error::InvalidInput(
                    "parameter file needs either initial/transition or B/Gamma".into(),
                ))
            }
        };
        HmmParams::new(means, cov, latent)
    }
}
