use rand::Rng;
use rayon::prelude::*;

use super::{natural_layout, SeMethod, StdErrReport};
use crate::error::{Error, Result};
use crate::hmm::{fit_hmm, FitOptions, FitResult};
use crate::labels::align_to_reference;
use crate::panel::PanelDataset;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone)]
pub struct BootstrapOptions {
    pub reps: usize,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            reps: 300,
            seed: 1,
            tol: 1e-8,
            max_iter: 5000,
        }
    }
}

/// Nonparametric bootstrap over subjects. Each replicate is refitted from
/// the original estimates, its states are aligned to the original means by
/// minimal total squared distance, and the standard error is the sample
/// standard deviation over replicates that converged without Newton
/// failures.
pub fn bootstrap_se(data: &PanelDataset, fitted: &FitResult, opts: &BootstrapOptions) -> Result<StdErrReport> {
    if opts.reps < 2 {
        return Err(Error::InvalidInput("bootstrap needs at least 2 replicates".into()));
    }
    let n = data.n();
    let reference = &fitted.params;
    let replicates: Vec<Option<Vec<f64>>> = (0..opts.reps)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(opts.seed, Stream::Bootstrap, b as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let sample = data.resample(&idx);
            let fo = FitOptions {
                tol: opts.tol,
                max_iter: opts.max_iter,
                ..FitOptions::from_start(reference.clone())
            };
            match fit_hmm(&sample, reference.k, &fo) {
                Ok(fit) if fit.converged && fit.newton_failures == 0 => {
                    let perm = align_to_reference(&reference.means, &fit.params.means);
                    Some(natural_layout(&fit.params.permuted(&perm)).1)
                }
                Ok(_) => None,
                Err(err) => {
                    log::debug!("bootstrap replicate {b} failed: {err}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = replicates.iter().flatten().collect();
    if ok.len() < 2 {
        return Err(Error::BootstrapFailed {
            converged: ok.len(),
            total: opts.reps,
        });
    }
    let (names, estimates) = natural_layout(reference);
    let m = estimates.len();
    let nb = ok.len() as f64;
    let se = (0..m)
        .map(|i| {
            let mean = ok.iter().map(|v| v[i]).sum::<f64>() / nb;
            let ss = ok.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>();
            (ss / (nb - 1.0)).sqrt()
        })
        .collect();
    Ok(StdErrReport {
        method: SeMethod::Bootstrap,
        boundary: vec![false; m],
        names,
        estimates,
        se,
        non_pd: false,
        replicates: opts.reps,
        replicate_ok: replicates.iter().map(|r| r.is_some()).collect(),
        n_failed: opts.reps - ok.len(),
    })
}
