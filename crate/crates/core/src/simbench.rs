//! Monte-Carlo comparison of the estimators on simulated multi-source data.
//!
//! Curves are zero-mean Gaussian processes with an exponential kernel, drawn
//! on a fine latent grid that contains the observation grid. Every dataset
//! shares the coefficient function `P1 + P2` (shifted, normalized Legendre
//! polynomials); sources differ from the target only in covariance scale.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::basis::{default_m, fourier_basis, legendre_pair, BasisSystem};
use crate::error::{Error, Result};
use crate::linalg::trapezoid;
use crate::rng::{stream_key, stream_rng};
use crate::smoothing::{empirical_cov_norm_sq, CoefEstimate, Method, RawDataset, SmoothedDataset};
use crate::workflow::{fit_method, prepare, sum_sq_prediction_error, WorkflowConfig};

const KERNEL_JITTER: f64 = 1e-10;
/// Minimum latent-grid size used when none is given.
const MIN_LATENT: usize = 1001;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n: usize,
    pub j: usize,
    pub k_sources: usize,
    pub eta: f64,
    pub target_scale: f64,
    pub kernel_rate: f64,
    pub noise_var_meas: f64,
    pub noise_var_reg: f64,
    pub replications: usize,
    pub seed: u64,
    pub train_frac: f64,
    /// Latent grid size; `(latent_grid - 1)` must be a multiple of `(j - 1)`.
    pub latent_grid: usize,
    pub record_timing: bool,
    pub workflow: WorkflowConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n: 300,
            j: 50,
            k_sources: 4,
            eta: 100.0,
            target_scale: 10.0,
            kernel_rate: 15.0,
            noise_var_meas: 0.01,
            noise_var_reg: 0.01,
            replications: 20,
            seed: 0,
            train_frac: 0.8,
            latent_grid: default_latent_grid(50),
            record_timing: false,
            workflow: WorkflowConfig::default(),
        }
    }
}

/// Smallest latent grid of at least 1001 points that contains the even
/// `j`-point grid.
pub fn default_latent_grid(j: usize) -> usize {
    if j < 2 {
        return MIN_LATENT;
    }
    let stride = (MIN_LATENT - 1).div_ceil(j - 1);
    stride * (j - 1) + 1
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n == 0 || self.replications == 0 || self.k_sources == 0 {
            return bad("n, replications and k_sources must be positive".into());
        }
        if self.j < 2 {
            return bad(format!("j must be at least 2, got {}", self.j));
        }
        for (name, v) in [
            ("eta", self.eta),
            ("target_scale", self.target_scale),
            ("kernel_rate", self.kernel_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("noise_var_meas", self.noise_var_meas), ("noise_var_reg", self.noise_var_reg)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return bad(format!("train_frac must lie in (0,1), got {}", self.train_frac));
        }
        if self.latent_grid < self.j || !(self.latent_grid - 1).is_multiple_of(self.j - 1) {
            return bad(format!(
                "latent_grid {} does not contain the {}-point observation grid ((latent_grid-1) must be a multiple of {})",
                self.latent_grid,
                self.j,
                self.j - 1
            ));
        }
        let n_train = self.n_train();
        if n_train < 3 || n_train >= self.n {
            return bad(format!("train_frac {} leaves no usable train/test split of {}", self.train_frac, self.n));
        }
        Ok(())
    }

    pub fn n_train(&self) -> usize {
        ((self.n as f64) * self.train_frac).round() as usize
    }
}

/// Cached factor of the unit-scale kernel on the latent grid.
#[derive(Debug, Clone)]
pub struct LatentSampler {
    pub grid: Vec<f64>,
    chol: DMatrix<f64>,
    pub obs_idx: Vec<usize>,
    /// Coefficient function on the latent grid.
    pub beta: Vec<f64>,
}

/// `P1(t) + P2(t)` on `t`.
pub fn true_beta(t: &[f64]) -> Vec<f64> {
    let (p1, p2) = legendre_pair(t).expect("grid points lie in [0,1]");
    p1.iter().zip(&p2).map(|(a, b)| a + b).collect()
}

impl LatentSampler {
    /// Factor of `exp(-rate |s - t|)` on an even `latent`-point grid, with
    /// observations every `(latent - 1) / (j - 1)` points.
    pub fn new(latent: usize, j: usize, rate: f64) -> Result<Self> {
        if j < 2 || latent < j || !(latent - 1).is_multiple_of(j - 1) {
            return Err(Error::invalid(format!("latent grid {latent} incompatible with {j} observation points")));
        }
        let grid: Vec<f64> = (0..latent).map(|i| i as f64 / (latent - 1) as f64).collect();
        let kernel = DMatrix::from_fn(latent, latent, |a, b| {
            (-rate * (grid[a] - grid[b]).abs()).exp() + if a == b { KERNEL_JITTER } else { 0.0 }
        });
        let chol = kernel
            .cholesky()
            .ok_or_else(|| Error::Internal("kernel matrix is not positive definite after jitter".into()))?
            .unpack();
        let stride = (latent - 1) / (j - 1);
        Ok(LatentSampler {
            beta: true_beta(&grid),
            obs_idx: (0..j).map(|i| i * stride).collect(),
            grid,
            chol,
        })
    }

    pub fn for_config(cfg: &SimConfig) -> Result<Self> {
        Self::new(cfg.latent_grid, cfg.j, cfg.kernel_rate)
    }

    /// `n` paths with covariance `scale * kernel`, one per column.
    pub fn draw_paths<R: Rng>(&self, n: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
        let l = self.grid.len();
        let g = DMatrix::from_fn(l, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.chol * g * scale.sqrt()
    }

    /// `int x(t) beta(t) dt` by the trapezoid rule on the latent grid.
    pub fn integrate(&self, path: &[f64]) -> f64 {
        let prod: Vec<f64> = path.iter().zip(&self.beta).map(|(x, b)| x * b).collect();
        trapezoid(&prod)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Target,
    /// 1-based source index.
    Source(usize),
}

/// A simulated dataset with its latent paths.
#[derive(Debug, Clone)]
pub struct SimDataset {
    pub raw: RawDataset,
    /// Latent paths, one column per subject.
    pub x_latent: DMatrix<f64>,
}

pub fn simulate_dataset<R: Rng>(
    cfg: &SimConfig,
    sampler: &LatentSampler,
    which: Which,
    rng: &mut R,
) -> Result<SimDataset> {
    let (scale, id) = match which {
        Which::Target => (cfg.target_scale, 0),
        Which::Source(k) => (cfg.eta, k),
    };
    let x = sampler.draw_paths(cfg.n, scale, rng);
    let err_sd = cfg.noise_var_reg.sqrt();
    let meas_sd = cfg.noise_var_meas.sqrt();
    let y = DVector::from_fn(cfg.n, |i, _| {
        let path: Vec<f64> = x.column(i).iter().copied().collect();
        sampler.integrate(&path) + err_sd * rng.sample::<f64, _>(StandardNormal)
    });
    let j = sampler.obs_idx.len();
    let mut z = DMatrix::from_fn(j, cfg.n, |r, i| x[(sampler.obs_idx[r], i)]);
    if meas_sd > 0.0 {
        z.iter_mut().for_each(|v| *v += meas_sd * rng.sample::<f64, _>(StandardNormal));
    }
    let grid: Vec<f64> = sampler.obs_idx.iter().map(|&i| sampler.grid[i]).collect();
    Ok(SimDataset {
        raw: RawDataset::new(z, y, grid, id)?,
        x_latent: x,
    })
}

/// Basis coefficients of `P1 + P2` by composite Simpson quadrature.
pub fn truth_c(basis: &BasisSystem) -> DVector<f64> {
    let intervals = 100_000usize;
    let t: Vec<f64> = (0..=intervals).map(|i| i as f64 / intervals as f64).collect();
    let beta = true_beta(&t);
    let h = 1.0 / intervals as f64;
    DVector::from_fn(basis.m(), |k, _| {
        let s: f64 = t
            .iter()
            .zip(&beta)
            .enumerate()
            .map(|(i, (&ti, &bi))| {
                let w = if i == 0 || i == intervals {
                    1.0
                } else if i % 2 == 1 {
                    4.0
                } else {
                    2.0
                };
                w * basis.value(k, ti) * bi
            })
            .sum();
        s * h / 3.0
    })
}

/// `||beta||^2 - ||c||^2`: squared L2 distance from `P1 + P2` to its projection.
pub fn projection_residual(basis: &BasisSystem) -> f64 {
    // P1 and P2 are orthonormal
    2.0 - truth_c(basis).norm_squared()
}

/// Relative estimation error against the local fit in the empirical covariance norm.
pub fn ree(
    candidate: &CoefEstimate,
    local: &CoefEstimate,
    truth_c: &DVector<f64>,
    target_train: &SmoothedDataset,
) -> Result<f64> {
    let diff = |f: &CoefEstimate| CoefEstimate {
        c: &f.c - truth_c,
        method: f.method,
        basis: f.basis.clone(),
    };
    let num = empirical_cov_norm_sq(&diff(candidate), target_train)?;
    let den = empirical_cov_norm_sq(&diff(local), target_train)?;
    if !(den > 0.0) {
        return Err(Error::DegenerateMetric("local estimation error is zero".into()));
    }
    Ok(num / den)
}

/// Relative prediction error against the local fit on `test`.
pub fn rpe(candidate: &CoefEstimate, local: &CoefEstimate, test: &SmoothedDataset) -> Result<f64> {
    candidate.check_basis(test.basis())?;
    local.check_basis(test.basis())?;
    let num = sum_sq_prediction_error(&candidate.c, test);
    let den = sum_sq_prediction_error(&local.c, test);
    if !(den > 0.0) {
        return Err(Error::DegenerateMetric("local prediction error is zero".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub replicate: usize,
    pub method: Method,
    pub eta: f64,
    pub ree: Option<f64>,
    pub rpe: Option<f64>,
    pub wall_ms: Option<f64>,
    pub error: Option<String>,
}

/// Seed of replicate `rep`; it keys the split, aggregation and `zeta` streams.
pub fn replicate_seed(seed: u64, rep: usize) -> u64 {
    stream_key(seed, &format!("sim:{rep}"))
}

fn elapsed_ms(start: Instant, on: bool) -> Option<f64> {
    on.then(|| start.elapsed().as_secs_f64() * 1e3)
}

fn run_replicate(
    cfg: &SimConfig,
    sampler: &LatentSampler,
    basis: &Arc<BasisSystem>,
    truth: &DVector<f64>,
    methods: &[Method],
    rep: usize,
) -> Vec<ResultRow> {
    let row = |method, ree, rpe, wall_ms, error| ResultRow {
        replicate: rep,
        method,
        eta: cfg.eta,
        ree,
        rpe,
        wall_ms,
        error,
    };
    let start = Instant::now();
    let rep_seed = replicate_seed(cfg.seed, rep);
    let setup = (|| -> Result<_> {
        let mut rng = stream_rng(cfg.seed, &format!("sim:{rep}"));
        let target = simulate_dataset(cfg, sampler, Which::Target, &mut rng)?;
        let sources = (1..=cfg.k_sources)
            .map(|k| simulate_dataset(cfg, sampler, Which::Source(k), &mut rng).map(|d| d.raw))
            .collect::<Result<Vec<_>>>()?;
        let mut idx: Vec<usize> = (0..cfg.n).collect();
        idx.shuffle(&mut stream_rng(rep_seed, "split"));
        let (train_idx, test_idx) = idx.split_at(cfg.n_train());
        let train = target.raw.subset(train_idx)?;
        let test = target.raw.subset(test_idx)?;
        let wf = WorkflowConfig {
            seed: rep_seed,
            ..cfg.workflow
        };
        let prep = prepare(&train, &sources, basis, &wf)?;
        let test_sm = prep.target.apply_to(&test)?;
        let local = prep.target_fit.estimate();
        let local_ree = ree(&local, &local, truth, &prep.target)?;
        let local_rpe = rpe(&local, &local, &test_sm)?;
        Ok((prep, test_sm, local, local_ree, local_rpe, wf))
    })();
    let (prep, test_sm, local, local_ree, local_rpe, wf) = match setup {
        Ok(s) => s,
        Err(e) => {
            let msg: String = format!("{e}");
            return std::iter::once(Method::Local)
                .chain(methods.iter().copied())
                .map(|m| row(m, None, None, None, Some(msg.clone())))
                .collect();
        }
    };
    let mut rows = vec![row(
        Method::Local,
        Some(local_ree),
        Some(local_rpe),
        elapsed_ms(start, cfg.record_timing),
        None,
    )];
    for &m in methods.iter().filter(|m| **m != Method::Local) {
        let start = Instant::now();
        let res = fit_method(&prep, m, &wf).and_then(|fit| {
            Ok((
                ree(&fit.estimate, &local, truth, &prep.target)?,
                rpe(&fit.estimate, &local, &test_sm)?,
            ))
        });
        let wall = elapsed_ms(start, cfg.record_timing);
        rows.push(match res {
            Ok((e, p)) => row(m, Some(e), Some(p), wall, None),
            Err(e) => row(m, None, None, wall, Some(format!("{e}"))),
        });
    }
    rows
}

fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        a.eta
            .total_cmp(&b.eta)
            .then(a.replicate.cmp(&b.replicate))
            .then(a.method.cmp(&b.method))
    });
}

/// All replicates of `cfg` for the given methods; the local baseline is always included.
pub fn run_experiment(cfg: &SimConfig, methods: &[Method]) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let sampler = LatentSampler::for_config(cfg)?;
    run_with_sampler(cfg, &sampler, methods)
}

fn run_with_sampler(cfg: &SimConfig, sampler: &LatentSampler, methods: &[Method]) -> Result<Vec<ResultRow>> {
    let basis = Arc::new(fourier_basis(default_m(cfg.j)?)?);
    let truth = truth_c(&basis);
    let mut rows: Vec<ResultRow> = (0..cfg.replications)
        .into_par_iter()
        .flat_map_iter(|rep| run_replicate(cfg, sampler, &basis, &truth, methods, rep))
        .collect();
    sort_rows(&mut rows);
    Ok(rows)
}

/// [`run_experiment`] for each `eta`, sharing one kernel factorization.
pub fn run_sweep(cfg: &SimConfig, etas: &[f64], methods: &[Method]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let sampler = LatentSampler::for_config(cfg)?;
    for &eta in etas {
        let c = SimConfig { eta, ..cfg.clone() };
        c.validate()?;
        rows.extend(run_with_sampler(&c, &sampler, methods)?);
    }
    sort_rows(&mut rows);
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub eta: f64,
    pub method: Method,
    pub median_ree: Option<f64>,
    pub median_rpe: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Per-(eta, method) medians over successful replicates.
pub fn summarize(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, Method)> = rows.iter().map(|r| (r.eta, r.method)).collect();
    keys.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keys.dedup();
    keys.into_iter()
        .map(|(eta, method)| {
            let sel: Vec<&ResultRow> = rows.iter().filter(|r| r.eta == eta && r.method == method).collect();
            let ok: Vec<&&ResultRow> = sel.iter().filter(|r| r.error.is_none()).collect();
            SummaryRow {
                eta,
                method,
                median_ree: median(&ok.iter().filter_map(|r| r.ree).collect::<Vec<_>>()),
                median_rpe: median(&ok.iter().filter_map(|r| r.rpe).collect::<Vec<_>>()),
                succeeded: ok.len(),
                failed: sel.len() - ok.len(),
            }
        })
        .collect()
}
