//! Monte Carlo generator and study driver for panels with intermittent
//! missingness and dropout.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::draw_mvn;
use crate::hmm::{fit_hmm, FitOptions, HmmParams, Latent};
use crate::labels::align_to_reference;
use crate::panel::{format_f64, PanelDataset, SubjectRecord};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub k: usize,
    pub n: usize,
    /// Occasions per subject.
    pub t: usize,
    pub r: usize,
    pub true_params: HmmParams,
    /// Per-cell probability of an intermittent missing response.
    pub p_miss: f64,
    /// Per-occasion probability of moving to the dropout state.
    pub p_drop: f64,
    pub n_reps: usize,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.p_miss) || !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::InvalidInput("p_miss and p_drop must lie in [0, 1)".into()));
        }
        if self.n == 0 || self.t == 0 {
            return Err(Error::InvalidInput("need n ≥ 1 and T ≥ 1".into()));
        }
        if self.true_params.k != self.k || self.true_params.r() != self.r || self.true_params.has_covariates() {
            return Err(Error::InvalidInput("true parameters do not match the scenario".into()));
        }
        self.true_params.validate()
    }
}

/// Generating configuration for k ∈ {2, 3} with intermittent missingness
/// and dropout both at level `p`: means (−2,−2,0), (0,0,0) (k = 3 only),
/// (0,2,2); Σ with unit variances and 0.5 covariances; π_u = 1/k; dropout
/// mass p in every substantive transition row.
pub fn default_scenario(k: usize, n: usize, p: f64) -> Result<ScenarioSpec> {
    let mut transition = match k {
        2 => vec![vec![0.9 - p, 0.1, p], vec![0.1, 0.9 - p, p]],
        3 => vec![
            vec![0.90 - p, 0.09, 0.01, p],
            vec![0.08, 0.84 - p, 0.08, p],
            vec![0.01, 0.09, 0.90 - p, p],
        ],
        _ => return Err(Error::InvalidInput("default scenarios exist for k = 2 and k = 3".into())),
    };
    if !(0.0..0.84).contains(&p) {
        return Err(Error::InvalidInput("p must lie in [0, 0.84)".into()));
    }
    let mut last = vec![0.0; k + 1];
    last[k] = 1.0;
    transition.push(last);
    let mut means = vec![DVector::from_row_slice(&[-2.0, -2.0, 0.0])];
    if k == 3 {
        means.push(DVector::from_row_slice(&[0.0, 0.0, 0.0]));
    }
    means.push(DVector::from_row_slice(&[0.0, 2.0, 2.0]));
    let cov = DMatrix::from_fn(3, 3, |a, b| if a == b { 1.0 } else { 0.5 });
    let mut initial = vec![1.0 / k as f64; k + 1];
    initial[k] = 0.0;
    let true_params = HmmParams::new(means, cov, Latent::Probabilities { initial, transition })?;
    Ok(ScenarioSpec {
        k,
        n,
        t: 5,
        r: 3,
        true_params,
        p_miss: p,
        p_drop: p,
        n_reps: 250,
        seed: 1,
    })
}

fn draw_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let x: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return j;
        }
    }
    // rounding: last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generated panel for replicate `rep` together with the latent states.
pub fn generate_panel_with_states(spec: &ScenarioSpec, rep: u64) -> Result<(PanelDataset, Vec<Vec<usize>>)> {
    spec.validate()?;
    let params = &spec.true_params;
    let (initial, transition) = params.probabilities().expect("validated: no covariates");
    let k = spec.k;
    let chol = params.cov.clone().cholesky().ok_or(Error::SingularCovariance)?.l();
    let mut rng = substream(spec.seed, Stream::Simulation, rep);
    let mut subjects = Vec::with_capacity(spec.n);
    let mut states = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let mut u = draw_index(&mut rng, initial);
        let mut rows = Vec::with_capacity(spec.t);
        let mut drop = Vec::with_capacity(spec.t);
        let mut path = Vec::with_capacity(spec.t);
        for t in 0..spec.t {
            if t > 0 {
                u = draw_index(&mut rng, &transition[u]);
            }
            path.push(u);
            if u == k {
                rows.push(vec![f64::NAN; spec.r]);
                drop.push(true);
            } else {
                let y = draw_mvn(&mut rng, &params.means[u], &chol);
                rows.push(
                    y.iter()
                        .map(|&v| if rng.random::<f64>() < spec.p_miss { f64::NAN } else { v })
                        .collect(),
                );
                drop.push(false);
            }
        }
        subjects.push(SubjectRecord::new((i + 1).to_string(), rows, drop, None)?);
        states.push(path);
    }
    Ok((PanelDataset::from_subjects(subjects)?, states))
}

/// Generated panel for replicate `rep`; reproducible from `(spec.seed, rep)`.
pub fn generate_panel(spec: &ScenarioSpec, rep: u64) -> Result<PanelDataset> {
    Ok(generate_panel_with_states(spec, rep)?.0)
}

/// Recovery of one parameter across replicates.
#[derive(Debug, Clone, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub abs_bias: f64,
    pub sd: f64,
    pub rmse: f64,
}

/// Averages of |bias|, sd and rmse over a parameter block.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BlockSummary {
    pub abs_bias: f64,
    pub sd: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudyReport {
    pub k: usize,
    pub n: usize,
    pub p_miss: f64,
    pub p_drop: f64,
    pub reps: usize,
    pub n_failed: usize,
    /// State means.
    pub mu: BlockSummary,
    /// Unique entries of Σ.
    pub sigma: BlockSummary,
    pub initial: BlockSummary,
    /// Substantive transition rows including the dropout column.
    pub transition: BlockSummary,
    pub params: Vec<ParamSummary>,
    /// Mean estimated transition matrix over substantive rows (k × (k+1)).
    pub avg_transition: Vec<Vec<f64>>,
}

/// Parameter vector in study order: μ, unique Σ, π (k), Π (k × (k+1)).
fn study_vector(params: &HmmParams) -> (Vec<String>, Vec<f64>) {
    let (names, values) = crate::inference::natural_layout(params);
    (names, values)
}

fn block(params: &[ParamSummary], prefix: &str) -> BlockSummary {
    let sel: Vec<&ParamSummary> = params.iter().filter(|p| p.name.starts_with(prefix)).collect();
    let m = sel.len().max(1) as f64;
    BlockSummary {
        abs_bias: sel.iter().map(|p| p.abs_bias).sum::<f64>() / m,
        sd: sel.iter().map(|p| p.sd).sum::<f64>() / m,
        rmse: sel.iter().map(|p| p.rmse).sum::<f64>() / m,
    }
}

/// Generates `spec.n_reps` panels, fits each with `fit_opts`, aligns the
/// estimated states to the truth and aggregates recovery statistics.
/// Replicates whose fit fails are counted and excluded.
pub fn run_study(spec: &ScenarioSpec, fit_opts: &FitOptions) -> Result<StudyReport> {
    spec.validate()?;
    let truth = &spec.true_params;
    let estimates: Vec<Option<Vec<f64>>> = (0..spec.n_reps as u64)
        .into_par_iter()
        .map(|rep| {
            let data = generate_panel(spec, rep).ok()?;
            let opts = FitOptions {
                seed: fit_opts.seed.wrapping_add(rep),
                ..fit_opts.clone()
            };
            match fit_hmm(&data, spec.k, &opts) {
                Ok(fit) => {
                    let perm = align_to_reference(&truth.means, &fit.params.means);
                    Some(study_vector(&fit.params.permuted(&perm)).1)
                }
                Err(err) => {
                    log::warn!("replicate {rep} failed: {err}");
                    None
                }
            }
        })
        .collect();
    let ok: Vec<&Vec<f64>> = estimates.iter().flatten().collect();
    if ok.is_empty() {
        return Err(Error::FitFailed("every replicate failed".into()));
    }
    let (names, true_values) = study_vector(truth);
    let b = ok.len() as f64;
    let params: Vec<ParamSummary> = names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let mean = ok.iter().map(|v| v[i]).sum::<f64>() / b;
            let var = if ok.len() > 1 {
                ok.iter().map(|v| (v[i] - mean).powi(2)).sum::<f64>() / (b - 1.0)
            } else {
                0.0
            };
            let mse = ok.iter().map(|v| (v[i] - true_values[i]).powi(2)).sum::<f64>() / b;
            ParamSummary {
                name: name.clone(),
                truth: true_values[i],
                mean,
                abs_bias: (mean - true_values[i]).abs(),
                sd: var.sqrt(),
                rmse: mse.sqrt(),
            }
        })
        .collect();
    let k = spec.k;
    let avg_transition = (0..k)
        .map(|v| {
            (0..=k)
                .map(|u| {
                    let name = format!("Pi[{},{}]", v + 1, u + 1);
                    params.iter().find(|p| p.name == name).map_or(f64::NAN, |p| p.mean)
                })
                .collect()
        })
        .collect();
    Ok(StudyReport {
        k,
        n: spec.n,
        p_miss: spec.p_miss,
        p_drop: spec.p_drop,
        reps: spec.n_reps,
        n_failed: spec.n_reps - ok.len(),
        mu: block(&params, "mu["),
        sigma: block(&params, "sigma["),
        initial: block(&params, "pi["),
        transition: block(&params, "Pi["),
        params,
        avg_transition,
    })
}

impl StudyReport {
    /// One row per parameter block (μ, Σ, π, Π) with averaged |bias|, sd
    /// and rmse.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("block,k,n,p_miss,p_drop,reps,failed,abs_bias,sd,rmse\n");
        for (name, b) in [("mu", self.mu), ("sigma", self.sigma), ("pi", self.initial), ("Pi", self.transition)] {
            let _ = writeln!(
                s,
                "{name},{},{},{},{},{},{},{},{},{}",
                self.k,
                self.n,
                self.p_miss,
                self.p_drop,
                self.reps,
                self.n_failed,
                format_f64(b.abs_bias),
                format_f64(b.sd),
                format_f64(b.rmse)
            );
        }
        s
    }

    /// Per-parameter recovery.
    pub fn params_csv(&self) -> String {
        let mut s = String::from("parameter,truth,mean,abs_bias,sd,rmse\n");
        for p in &self.params {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                p.name,
                format_f64(p.truth),
                format_f64(p.mean),
                format_f64(p.abs_bias),
                format_f64(p.sd),
                format_f64(p.rmse)
            );
        }
        s
    }

    /// Averaged estimated transition matrix, dropout column last.
    pub fn transition_csv(&self) -> String {
        let mut s = String::from("from");
        for u in 1..=self.k {
            let _ = write!(s, ",to{u}");
        }
        s.push_str(",dropout\n");
        for (v, row) in self.avg_transition.iter().enumerate() {
            let _ = write!(s, "{}", v + 1);
            for x in row {
                let _ = write!(s, ",{}", format_f64(*x));
            }
            s.push('\n');
        }
        s
    }
}
