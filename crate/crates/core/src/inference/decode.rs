use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gaussian::factor_table;
use crate::hmm::{log_emissions, panel_factors, posteriors, HmmParams, LatentPosterior};
use crate::panel::{PanelDataset, SubjectRecord};

/// `û_it = argmax_u ẑ_itu`, lowest index on ties.
pub fn local_decode(posterior: &LatentPosterior) -> Vec<Vec<usize>> {
    posterior
        .subjects
        .iter()
        .map(|s| s.marginals.iter().map(|z| crate::fmm::argmax(z)).collect())
        .collect()
}

fn ln(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

fn viterbi_from(log_e: &[Vec<f64>], record: &SubjectRecord, params: &HmmParams) -> Result<Vec<usize>> {
    let s = params.k + 1;
    let n_t = log_e.len();
    let initial = params.initial_for(record);
    let trans = params.transitions_for(record);
    let mut delta: Vec<f64> = (0..s).map(|u| ln(initial[u]) + log_e[0][u]).collect();
    if delta.iter().all(|d| *d == f64::NEG_INFINITY) {
        return Err(Error::ImpossibleObservation { t: 1 });
    }
    let mut back = vec![vec![0usize; s]; n_t];
    for t in 1..n_t {
        let tr = trans.at(t);
        let mut next = vec![f64::NEG_INFINITY; s];
        for u in 0..s {
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for v in 0..s {
                let c = delta[v] + ln(tr[v][u]);
                if c > best {
                    best = c;
                    arg = v;
                }
            }
            next[u] = best + log_e[t][u];
            back[t][u] = arg;
        }
        if next.iter().all(|d| *d == f64::NEG_INFINITY) {
            return Err(Error::ImpossibleObservation { t: t + 1 });
        }
        delta = next;
    }
    let mut path = vec![crate::fmm::argmax(&delta); n_t];
    for t in (1..n_t).rev() {
        path[t - 1] = back[t][path[t]];
    }
    Ok(path)
}

/// Joint-MAP state sequence for one subject (0-based states, `k` = dropout),
/// computed in log space. Ties resolve to the lowest state index.
pub fn viterbi_decode(record: &SubjectRecord, params: &HmmParams) -> Result<Vec<usize>> {
    let factors = factor_table(
        &params.cov,
        record.patterns.iter().zip(&record.dropout).filter(|(_, &d)| !d).map(|(p, _)| p),
    )?;
    let log_e = log_emissions(record, params, &factors)?;
    viterbi_from(&log_e, record, params)
}

/// log P(path, observed responses, dropout indicators).
pub fn path_log_prob(record: &SubjectRecord, params: &HmmParams, path: &[usize]) -> Result<f64> {
    if path.len() != record.n_occasions() || path.iter().any(|&u| u > params.k) {
        return Err(Error::InvalidInput("path does not fit the record".into()));
    }
    let factors = factor_table(
        &params.cov,
        record.patterns.iter().zip(&record.dropout).filter(|(_, &d)| !d).map(|(p, _)| p),
    )?;
    let log_e = log_emissions(record, params, &factors)?;
    let initial = params.initial_for(record);
    let trans = params.transitions_for(record);
    let mut lp = ln(initial[path[0]]) + log_e[0][path[0]];
    for t in 1..path.len() {
        lp += ln(trans.at(t)[path[t - 1]][path[t]]) + log_e[t][path[t]];
    }
    Ok(lp)
}

/// Local and global decoding of every subject.
#[derive(Debug, Clone)]
pub struct DecodedPanel {
    pub local: Vec<Vec<usize>>,
    pub global: Vec<Vec<usize>>,
    pub posterior: LatentPosterior,
}

pub fn decode_panel(data: &PanelDataset, params: &HmmParams) -> Result<DecodedPanel> {
    let posterior = posteriors(data, params)?;
    let factors = panel_factors(data, &params.cov)?;
    let global = data
        .subjects
        .par_iter()
        .map(|rec| viterbi_from(&log_emissions(rec, params, &factors)?, rec, params))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecodedPanel {
        local: local_decode(&posterior),
        global,
        posterior,
    })
}

/// Per occasion t, the share of subjects observed at t whose decoded state
/// is u (`n_states` columns). Returns `(counts at risk, frequencies)`.
pub fn state_frequencies(paths: &[Vec<usize>], n_states: usize) -> (Vec<usize>, Vec<Vec<f64>>) {
    let t_max = paths.iter().map(|p| p.len()).max().unwrap_or(0);
    let mut counts = vec![vec![0usize; n_states]; t_max];
    let mut at_risk = vec![0usize; t_max];
    for p in paths {
        for (t, &u) in p.iter().enumerate() {
            counts[t][u] += 1;
            at_risk[t] += 1;
        }
    }
    let freq = counts
        .iter()
        .zip(&at_risk)
        .map(|(c, &n)| c.iter().map(|&x| if n > 0 { x as f64 / n as f64 } else { 0.0 }).collect())
        .collect();
    (at_risk, freq)
}
