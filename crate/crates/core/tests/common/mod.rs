#![allow(dead_code)]

use lmdrop::glm::{InitialLogitParams, TransitionLogitParams};
use lmdrop::hmm::{HmmParams, Latent};
use lmdrop::{PanelDataset, SubjectRecord};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn normalized<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 0.05).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

pub fn random_cov<R: Rng>(rng: &mut R, r: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
    let mut c = &a * a.transpose() + DMatrix::identity(r, r) * 0.5;
    for i in 0..r {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Random probability-parameterized model with absorbing dropout.
pub fn random_params<R: Rng>(rng: &mut R, k: usize, r: usize) -> HmmParams {
    let means = (0..k)
        .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let mut initial = normalized(rng, k);
    initial.push(0.0);
    let mut transition: Vec<Vec<f64>> = (0..k).map(|_| normalized(rng, k + 1)).collect();
    let mut last = vec![0.0; k + 1];
    last[k] = 1.0;
    transition.push(last);
    HmmParams::new(means, random_cov(rng, r), Latent::Probabilities { initial, transition }).unwrap()
}

/// Random logit-parameterized model with `q = 1 + p` coefficients per logit.
pub fn random_logit_params<R: Rng>(rng: &mut R, k: usize, r: usize, p: usize) -> HmmParams {
    let q = 1 + p;
    let means = (0..k)
        .map(|_| DVector::from_fn(r, |_, _| rng.random_range(-2.0..2.0)))
        .collect();
    let mut b = InitialLogitParams::zeros(k, q);
    for row in b.coef.iter_mut() {
        row.iter_mut().for_each(|c| *c = rng.random_range(-1.0..1.0));
    }
    let mut g = TransitionLogitParams::zeros(k, q);
    for row in g.coef.iter_mut() {
        for c in row.iter_mut() {
            c[0] = rng.random_range(-2.5..-0.5);
            c[1..].iter_mut().for_each(|v| *v = rng.random_range(-0.7..0.7));
        }
    }
    HmmParams::new(means, random_cov(rng, r), Latent::Logit { initial: b, transition: g }).unwrap()
}

/// Arbitrary panel: random responses, cellwise missingness with probability
/// `miss`, dropout after a uniformly chosen occasion with probability `drop`.
pub fn random_panel<R: Rng>(
    rng: &mut R,
    n: usize,
    t_max: usize,
    r: usize,
    miss: f64,
    drop: f64,
    p: usize,
) -> PanelDataset {
    let subjects = (0..n)
        .map(|i| {
            let t = rng.random_range(1..=t_max);
            let drop_at = if t > 1 && rng.random::<f64>() < drop { rng.random_range(1..t) } else { t };
            let rows = (0..t)
                .map(|s| {
                    (0..r)
                        .map(|_| {
                            if s >= drop_at || rng.random::<f64>() < miss {
                                f64::NAN
                            } else {
                                rng.random_range(-3.0..3.0)
                            }
                        })
                        .collect()
                })
                .collect();
            let cov = (p > 0).then(|| (0..t).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect());
            SubjectRecord::new(format!("s{i}"), rows, (0..t).map(|s| s >= drop_at).collect(), cov).unwrap()
        })
        .collect();
    PanelDataset::from_subjects(subjects).unwrap()
}

/// Gaussian log density of the observed entries of `y` (NaN = missing)
/// through an explicit inverse and determinant.
pub fn naive_log_density(y: &[f64], mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let obs: Vec<usize> = (0..y.len()).filter(|&j| !y[j].is_nan()).collect();
    if obs.is_empty() {
        return 0.0;
    }
    let o = obs.len();
    let s = DMatrix::from_fn(o, o, |a, b| cov[(obs[a], obs[b])]);
    let inv = s.clone().try_inverse().unwrap();
    let d = DVector::from_fn(o, |a, _| y[obs[a]] - mean[obs[a]]);
    let quad = (d.transpose() * inv * &d)[(0, 0)];
    -0.5 * (o as f64 * (2.0 * std::f64::consts::PI).ln() + s.determinant().ln() + quad)
}

/// Emission probability (not log) of occasion `t` under state `u`.
fn naive_emission(rec: &SubjectRecord, t: usize, u: usize, params: &HmmParams) -> f64 {
    let k = params.k;
    match (rec.dropout[t], u == k) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        (false, false) => naive_log_density(&rec.responses[t], &params.means[u], &params.cov).exp(),
    }
}

pub struct Enumeration {
    pub loglik: f64,
    pub marginals: Vec<Vec<f64>>,
    pub pairwise: Vec<Vec<Vec<f64>>>,
    /// Lexicographically first path of maximal joint probability.
    pub best_path: Vec<usize>,
    pub best_log_prob: f64,
}

/// Sums over all `(k+1)^T` latent paths.
pub fn enumerate_paths(rec: &SubjectRecord, params: &HmmParams) -> Enumeration {
    let s = params.k + 1;
    let n_t = rec.n_occasions();
    let initial = params.initial_for(rec);
    let trans = params.transitions_for(rec);
    let emis: Vec<Vec<f64>> = (0..n_t)
        .map(|t| (0..s).map(|u| naive_emission(rec, t, u, params)).collect())
        .collect();
    let total = s.pow(n_t as u32);
    let mut weights = Vec::with_capacity(total);
    let mut path = vec![0usize; n_t];
    for idx in 0..total {
        let mut rem = idx;
        for t in (0..n_t).rev() {
            path[t] = rem % s;
            rem /= s;
        }
        let mut w = initial[path[0]] * emis[0][path[0]];
        for t in 1..n_t {
            w *= trans.at(t)[path[t - 1]][path[t]] * emis[t][path[t]];
        }
        weights.push((path.clone(), w));
    }
    let f: f64 = weights.iter().map(|(_, w)| w).sum();
    let mut marginals = vec![vec![0.0; s]; n_t];
    let mut pairwise = vec![vec![vec![0.0; s]; s]; n_t.saturating_sub(1)];
    let mut best = (Vec::new(), -1.0);
    for (p, w) in &weights {
        for t in 0..n_t {
            marginals[t][p[t]] += w / f;
            if t > 0 {
                pairwise[t - 1][p[t - 1]][p[t]] += w / f;
            }
        }
        if *w > best.1 {
            best = (p.clone(), *w);
        }
    }
    Enumeration {
        loglik: f.ln(),
        marginals,
        pairwise,
        best_path: best.0,
        best_log_prob: best.1.ln(),
    }
}

/// Synthetic panel shaped like a clinical follow-up study: 312 subjects,
/// up to 29 visits, 7 biomarkers with intermittent gaps, 3 baseline
/// covariates (continuous age, binary sex, binary treatment) driving the
/// latent model, and dropout through the absorbing state.
pub fn pbc_like_panel<R: Rng>(rng: &mut R) -> PanelDataset {
    let (n, t_max, r, k) = (312, 29, 7, 4);
    let means: Vec<DVector<f64>> = (0..k)
        .map(|u| DVector::from_fn(r, |j, _| (u as f64 - 1.5) * (0.6 + 0.1 * j as f64)))
        .collect();
    let cov = DMatrix::from_fn(r, r, |a, b| if a == b { 1.0 } else { 0.3 });
    let chol = cov.clone().cholesky().unwrap().l();
    let mut b = InitialLogitParams::zeros(k, 4);
    for (u, row) in b.coef.iter_mut().enumerate() {
        *row = vec![-0.5 * u as f64, 0.4, -0.2, 0.1];
    }
    let mut g = TransitionLogitParams::zeros(k, 4);
    for (o, rows) in g.coef.iter_mut().enumerate() {
        for (j, c) in rows.iter_mut().enumerate() {
            let dest = if j < o { j } else { j + 1 };
            let base = if dest == k { -3.2 + 0.3 * o as f64 } else if dest == o + 1 { -2.0 } else { -3.5 };
            *c = vec![base, 0.3, 0.2, -0.3];
        }
    }
    let params = HmmParams::new(means, cov, Latent::Logit { initial: b, transition: g }).unwrap();
    let subjects = (0..n)
        .map(|i| {
            let age: f64 = rng.sample::<f64, _>(StandardNormal);
            let sex = f64::from(u8::from(rng.random::<f64>() < 0.12));
            let drug = f64::from(u8::from(rng.random::<f64>() < 0.5));
            let t_i = rng.random_range(2..=t_max);
            let x = vec![age, sex, drug];
            let covs: Vec<Vec<f64>> = vec![x.clone(); t_i];
            let rec0 = SubjectRecord::new("tmp", vec![vec![0.0; r]; t_i], vec![false; t_i], Some(covs.clone())).unwrap();
            let init = params.initial_for(&rec0);
            let trans = params.transitions_for(&rec0);
            let draw = |rng: &mut R, p: &[f64]| {
                let x: f64 = rng.random();
                let mut acc = 0.0;
                for (j, v) in p.iter().enumerate() {
                    acc += v;
                    if x < acc {
                        return j;
                    }
                }
                p.len() - 1
            };
            let mut u = draw(rng, &init);
            let mut rows = Vec::with_capacity(t_i);
            let mut drop = Vec::with_capacity(t_i);
            for t in 0..t_i {
                if t > 0 {
                    u = draw(rng, &trans.at(t)[u]);
                }
                if u == k {
                    rows.push(vec![f64::NAN; r]);
                    drop.push(true);
                    continue;
                }
                let z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
                let y = &params.means[u] + &chol * z;
                // whole-visit gaps are rarer than single missing labs
                let skip_visit = rng.random::<f64>() < 0.05;
                rows.push(
                    y.iter()
                        .map(|&v| if skip_visit || rng.random::<f64>() < 0.08 { f64::NAN } else { v })
                        .collect(),
                );
                drop.push(false);
            }
            SubjectRecord::new(format!("p{i}"), rows, drop, Some(covs)).unwrap()
        })
        .collect();
    PanelDataset::new(
        subjects,
        (1..=r).map(|j| format!("y{j}")).collect(),
        vec!["age".into(), "sex".into(), "drug".into()],
    )
    .unwrap()
}
