use nalgebra::DVector;

use super::ImputeMode;
use crate::error::{Error, Result};
use crate::hmm::{panel_factors, HmmParams, LatentPosterior};
use crate::panel::{PanelDataset, SubjectRecord};

/// Fills missing responses on non-dropout occasions. Conditional mode uses
/// the locally decoded state; unconditional mode averages the state-wise
/// conditional expectations with the smoothed marginals over substantive
/// states, renormalized. Dropout occasions stay missing.
pub fn impute_missing(
    data: &PanelDataset,
    params: &HmmParams,
    posterior: &LatentPosterior,
    mode: ImputeMode,
) -> Result<PanelDataset> {
    params.check_panel(data)?;
    if posterior.subjects.len() != data.n() {
        return Err(Error::InvalidInput("posterior does not match the panel".into()));
    }
    let factors = panel_factors(data, &params.cov)?;
    let k = params.k;
    let mut subjects = Vec::with_capacity(data.n());
    for (rec, sp) in data.subjects.iter().zip(&posterior.subjects) {
        let mut responses = rec.responses.clone();
        for t in 0..rec.n_occasions() {
            let pat = &rec.patterns[t];
            if rec.dropout[t] || pat.is_complete() {
                continue;
            }
            let f = &factors[pat];
            let yo = rec.observed_values(t);
            let z = &sp.marginals[t][..k];
            let filled = match mode {
                ImputeMode::Conditional => f.conditional(&yo, &params.means[crate::fmm::argmax(z)])?.expect,
                ImputeMode::Unconditional => {
                    let tot: f64 = z.iter().sum();
                    let mut acc = DVector::zeros(data.r);
                    for u in 0..k {
                        if z[u] > 0.0 {
                            acc.axpy(z[u] / tot, &f.conditional(&yo, &params.means[u])?.expect, 1.0);
                        }
                    }
                    acc
                }
            };
            for j in pat.missing_indices() {
                responses[t][j] = filled[j];
            }
        }
        subjects.push(SubjectRecord::new(rec.id.clone(), responses, rec.dropout.clone(), rec.covariates.clone())?);
    }
    PanelDataset::new(subjects, data.response_names.clone(), data.covariate_names.clone())
}
