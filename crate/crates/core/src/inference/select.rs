use serde::Serialize;

use crate::error::{Error, Result};
use crate::hmm::{fit_hmm, split_start, FitOptions, FitResult};
use crate::panel::PanelDataset;

/// One line of the selection table.
#[derive(Debug, Clone, Serialize)]
pub struct SelectionRow {
    pub k: usize,
    pub loglik: f64,
    pub n_par: usize,
    pub bic: f64,
    pub aic: f64,
    /// BIC_k − BIC of the previous successful k.
    pub bic_diff: Option<f64>,
    pub converged: bool,
    /// Failure message when every start failed for this k.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    /// k with the smallest BIC among successful fits.
    pub best_bic: usize,
    pub best_aic: usize,
    /// ℓ̂ decreased from one k to the next: a local optimum was reached.
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub fits: Vec<Option<FitResult>>,
}

/// Fits every k in `k_range` (ascending) and tabulates ℓ̂, #par, BIC and
/// AIC. When k − 1 was fitted too, k also gets two starts derived from that
/// solution by splitting its most occupied state, one of which reproduces
/// its likelihood exactly; ℓ̂ is then nondecreasing along the range.
pub fn select_k(data: &PanelDataset, k_range: &[usize], opts: &FitOptions) -> Result<SelectionReport> {
    if k_range.is_empty() {
        return Err(Error::InvalidInput("k range is empty".into()));
    }
    let mut ks = k_range.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut rows = Vec::new();
    let mut fits: Vec<Option<FitResult>> = Vec::new();
    let mut warnings = Vec::new();
    let mut prev: Option<FitResult> = None;
    for &k in &ks {
        let mut o = opts.clone();
        if let Some(p) = prev.as_ref().filter(|p| p.params.k + 1 == k) {
            o.extra_starts.extend(split_start(&p.params, &p.posterior, 0.0));
            o.extra_starts.extend(split_start(&p.params, &p.posterior, 0.5));
        }
        match fit_hmm(data, k, &o) {
            Ok(fit) => {
                let last_ok = rows.iter().rev().find(|r: &&SelectionRow| r.error.is_none());
                if let Some(last) = last_ok {
                    if fit.loglik < last.loglik - 1e-9 * last.loglik.abs() {
                        warnings.push(format!(
                            "log-likelihood decreased from k = {} ({}) to k = {k} ({}): local optimum",
                            last.k, last.loglik, fit.loglik
                        ));
                    }
                }
                rows.push(SelectionRow {
                    k,
                    loglik: fit.loglik,
                    n_par: fit.n_par,
                    bic: fit.bic,
                    aic: fit.aic,
                    bic_diff: last_ok.map(|l| fit.bic - l.bic),
                    converged: fit.converged,
                    error: None,
                });
                prev = Some(fit.clone());
                fits.push(Some(fit));
            }
            Err(err) => {
                log::warn!("k = {k}: {err}");
                rows.push(SelectionRow {
                    k,
                    loglik: f64::NAN,
                    n_par: 0,
                    bic: f64::NAN,
                    aic: f64::NAN,
                    bic_diff: None,
                    converged: false,
                    error: Some(err.to_string()),
                });
                prev = None;
                fits.push(None);
            }
        }
    }
    let ok: Vec<&SelectionRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let best_bic = ok
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic))
        .map(|r| r.k)
        .ok_or_else(|| Error::FitFailed("no k could be fitted".into()))?;
    let best_aic = ok.iter().min_by(|a, b| a.aic.total_cmp(&b.aic)).map(|r| r.k).expect("nonempty");
    Ok(SelectionReport {
        rows,
        best_bic,
        best_aic,
        warnings,
        fits,
    })
}
