//! Penalized local fits, the pooled source fit and the offset correction.
//!
//! A local fit solves `(Omega + lambda W) c = Psi B y` on one dataset and also
//! carries trapezoid plug-ins for `E(c_hat | Z)` and `var(c_hat | Z)`, which
//! is all the control-variates estimators need from a dataset.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::linalg::{eigen_range, log_grid, spd_solve, spd_solve_vec, symmetrize};
use crate::smoothing::{CoefEstimate, Method, SmoothedDataset};

/// Plug-in for `var(Y | Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceMode {
    /// Scalar `sigma_err^2 + J^-2 sigma_eps^2 c' Phi' D^2 Phi c`.
    #[default]
    Homoskedastic,
    /// Degrees-of-freedom corrected squared residuals, `n / (n - M)`.
    Hc,
}

/// How a ridge penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub enum LambdaChoice {
    Fixed(f64),
    #[default]
    Cv,
}


/// Penalties for the local, pooled and offset fits.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LambdaConfig {
    pub local: LambdaChoice,
    pub pooled: LambdaChoice,
    pub offset: LambdaChoice,
}

impl LambdaConfig {
    pub fn fixed(lambda: f64) -> Self {
        LambdaConfig {
            local: LambdaChoice::Fixed(lambda),
            pooled: LambdaChoice::Fixed(lambda),
            offset: LambdaChoice::Fixed(lambda),
        }
    }
}

pub const CV_FOLDS: usize = 5;

/// Candidate ridge penalties searched by cross-validation.
pub fn lambda_grid() -> Vec<f64> {
    log_grid(1e-8, 1e2, 25)
}

/// Local fit of one dataset.
#[derive(Debug, Clone)]
pub struct LocalFit {
    pub c_hat: DVector<f64>,
    pub lambda: f64,
    /// Plug-in `E(c_hat | Z)`.
    pub e_hat: DVector<f64>,
    /// Plug-in `var(c_hat | Z)` with [`LocalFit::jitter`] already on the diagonal.
    pub v_hat: DMatrix<f64>,
    /// Diagonal loading added to `v_hat`; zero when none was needed.
    pub jitter: f64,
    /// Measurement-error variance of the curves.
    pub sigma2_eps: f64,
    /// Regression-error variance.
    pub sigma2_err: f64,
    pub n: usize,
    pub basis: Arc<BasisSystem>,
}

impl LocalFit {
    pub fn estimate(&self) -> CoefEstimate {
        CoefEstimate {
            c: self.c_hat.clone(),
            method: Method::Local,
            basis: self.basis.clone(),
        }
    }
}

fn penalized(omega: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    symmetrize(&(omega + w * lambda))
}

fn check_lambda(lambda: f64, what: &str) -> Result<()> {
    if lambda >= 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} must be >= 0, got {lambda}")))
    }
}

/// Fits dataset `sm` alone with penalty `lambda`.
pub fn fit_local(sm: &SmoothedDataset, lambda: f64, mode: VarianceMode) -> Result<LocalFit> {
    check_lambda(lambda, "lambda")?;
    let basis = sm.basis();
    let m = basis.m();
    let n = sm.n();
    let j = sm.raw().j() as f64;
    if mode == VarianceMode::Hc && n <= m {
        return Err(Error::invalid(format!(
            "heteroskedastic variance needs n > M (n = {n}, M = {m})"
        )));
    }

    let feats = sm.features();
    let a = penalized(sm.omega(), basis.w(), lambda);
    let fy = &feats * sm.y();
    let c_hat = spd_solve_vec(&a, &fy, "local fit", lambda)?;

    let z = sm.raw().z();
    let sigma2_eps = (z - sm.phi() * sm.b()).norm_squared() / (n as f64 * j);
    let resid = sm.y() - feats.tr_mul(&c_hat);
    let sigma2_err = resid.norm_squared() / n as f64;

    // trapezoid weights {1/2, 1, ..., 1, 1/2} applied to beta_hat on the grid
    let mut dphi_c = sm.phi() * &c_hat;
    let last = dphi_c.len() - 1;
    dphi_c[0] *= 0.5;
    dphi_c[last] *= 0.5;
    let ey = z.tr_mul(&dphi_c) / j;
    let e_hat = spd_solve_vec(&a, &(&feats * &ey), "local fit", lambda)?;

    // var(c_hat | Z) = A^-1 F var(Y|Z) F' A^-1
    let middle = match mode {
        VarianceMode::Homoskedastic => {
            let s2 = sigma2_err + sigma2_eps * dphi_c.norm_squared() / (j * j);
            sm.omega() * s2
        }
        VarianceMode::Hc => {
            let scale = n as f64 / (n - m) as f64;
            let wts = (sm.y() - &ey).map(|r| scale * r * r);
            let mut fw = feats.clone();
            for (mut col, wi) in fw.column_iter_mut().zip(wts.iter()) {
                col *= *wi;
            }
            &fw * feats.transpose()
        }
    };
    let a_inv_mid = spd_solve(&a, &middle, "local fit", lambda)?;
    let v_raw = symmetrize(&spd_solve(&a, &a_inv_mid.transpose(), "local fit", lambda)?);
    let (v_hat, jitter) = apply_jitter(v_raw);

    Ok(LocalFit {
        c_hat,
        lambda,
        e_hat,
        v_hat,
        jitter,
        sigma2_eps,
        sigma2_err,
        n,
        basis: basis.clone(),
    })
}

/// Adds `(1e-8 trace / M) I` when the smallest eigenvalue is below
/// `1e-10 trace`. An all-zero matrix receives `1e-8 I`.
pub fn apply_jitter(v: DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let m = v.nrows();
    let tr = v.trace();
    let (lo, _) = eigen_range(&v);
    if lo >= 1e-10 * tr && tr > 0.0 {
        return (v, 0.0);
    }
    let jitter = if tr > 0.0 { 1e-8 * tr / m as f64 } else { 1e-8 };
    let mut out = v;
    for i in 0..m {
        out[(i, i)] += jitter;
    }
    (out, jitter)
}

/// Fits with `lambda` chosen by `choice`.
pub fn fit_local_with(
    sm: &SmoothedDataset,
    choice: LambdaChoice,
    mode: VarianceMode,
) -> Result<LocalFit> {
    let lambda = match choice {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Cv => cv_lambda(&sm.features(), sm.y(), sm.basis().w())?,
    };
    fit_local(sm, lambda, mode)
}

fn check_same_basis(sets: &[&SmoothedDataset]) -> Result<()> {
    let first = sets[0].basis();
    if sets.iter().any(|s| **s.basis() != **first) {
        return Err(Error::invalid("datasets use different bases"));
    }
    Ok(())
}

/// Pooled fit over `sources` (the transferable set) with penalty `lambda_k`.
pub fn fit_pooled(sources: &[&SmoothedDataset], lambda_k: f64) -> Result<CoefEstimate> {
    if sources.is_empty() {
        return Err(Error::invalid("pooled fit needs at least one source"));
    }
    check_lambda(lambda_k, "pooled lambda")?;
    check_same_basis(sources)?;
    let basis = sources[0].basis().clone();
    let m = basis.m();
    let mut vtv = DMatrix::zeros(m, m);
    let mut vty = DVector::zeros(m);
    for s in sources {
        vtv += s.omega();
        vty += s.features() * s.y();
    }
    let a = penalized(&vtv, basis.w(), lambda_k);
    let c = spd_solve_vec(&a, &vty, "pooled source fit", lambda_k)?;
    Ok(CoefEstimate {
        c,
        method: Method::Pooled,
        basis,
    })
}

pub fn pooled_cv_lambda(sources: &[&SmoothedDataset]) -> Result<f64> {
    if sources.is_empty() {
        return Err(Error::invalid("pooled fit needs at least one source"));
    }
    check_same_basis(sources)?;
    let feats: Vec<DMatrix<f64>> = sources.iter().map(|s| s.features()).collect();
    let all = concat_columns(&feats);
    let y = DVector::from_iterator(
        all.ncols(),
        sources.iter().flat_map(|s| s.y().iter().cloned()),
    );
    cv_lambda(&all, &y, sources[0].basis().w())
}

fn concat_columns(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks[0].nrows();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut off = 0;
    for b in blocks {
        out.columns_mut(off, b.ncols()).copy_from(b);
        off += b.ncols();
    }
    out
}

/// Residual responses of `target` after removing the predictions of `pooled`.
fn offset_residual(pooled: &CoefEstimate, target: &SmoothedDataset) -> Result<DVector<f64>> {
    pooled.check_basis(target.basis())?;
    Ok(target.y() - target.inner_products(&pooled.c))
}

/// Offset step: refits the target residuals of `pooled` with penalty `lambda_o`
/// and returns `c_pooled + o`.
pub fn fit_offset(
    pooled: &CoefEstimate,
    target: &SmoothedDataset,
    lambda_o: f64,
) -> Result<CoefEstimate> {
    Ok(CoefEstimate {
        c: &pooled.c + offset_only(pooled, target, lambda_o)?,
        method: Method::Otl,
        basis: pooled.basis.clone(),
    })
}

/// The offset `o` alone.
pub fn offset_only(
    pooled: &CoefEstimate,
    target: &SmoothedDataset,
    lambda_o: f64,
) -> Result<DVector<f64>> {
    check_lambda(lambda_o, "offset lambda")?;
    let r = offset_residual(pooled, target)?;
    let a = penalized(target.omega(), target.basis().w(), lambda_o);
    spd_solve_vec(&a, &(target.features() * r), "offset fit", lambda_o)
}

pub fn offset_cv_lambda(pooled: &CoefEstimate, target: &SmoothedDataset) -> Result<f64> {
    let r = offset_residual(pooled, target)?;
    cv_lambda(&target.features(), &r, target.basis().w())
}

/// Offset transfer with a known transferable set.
pub fn fit_otl(
    target: &SmoothedDataset,
    sources: &[&SmoothedDataset],
    lambdas: &LambdaConfig,
) -> Result<CoefEstimate> {
    let lambda_k = match lambdas.pooled {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Cv => pooled_cv_lambda(sources)?,
    };
    let pooled = fit_pooled(sources, lambda_k)?;
    let lambda_o = match lambdas.offset {
        LambdaChoice::Fixed(l) => l,
        LambdaChoice::Cv => offset_cv_lambda(&pooled, target)?,
    };
    fit_offset(&pooled, target, lambda_o)
}

/// Cross-validated squared prediction error of the ridge fit of `r` on the
/// feature columns of `feats`, for each penalty. Subject `i` is in fold `i % folds`.
pub fn cv_errors(
    feats: &DMatrix<f64>,
    r: &DVector<f64>,
    w: &DMatrix<f64>,
    lambdas: &[f64],
) -> Vec<f64> {
    let n = feats.ncols();
    let folds = CV_FOLDS.min(n);
    let mut errs = vec![0.0; lambdas.len()];
    if folds < 2 {
        return vec![f64::INFINITY; lambdas.len()];
    }
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
        let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
        let ftr = feats.select_columns(&train);
        let fte = feats.select_columns(&test);
        let rtr = DVector::from_iterator(train.len(), train.iter().map(|&i| r[i]));
        let rte = DVector::from_iterator(test.len(), test.iter().map(|&i| r[i]));
        let gram = &ftr * ftr.transpose();
        let rhs = &ftr * rtr;
        for (e, &lambda) in errs.iter_mut().zip(lambdas) {
            let a = penalized(&gram, w, lambda);
            match spd_solve_vec(&a, &rhs, "cross-validation", lambda) {
                Ok(c) => *e += (&rte - fte.tr_mul(&c)).norm_squared(),
                Err(_) => *e = f64::INFINITY,
            }
        }
    }
    errs
}

/// Penalty from [`lambda_grid`] minimizing 5-fold CV error; ties go to the
/// smaller value.
pub fn cv_lambda(feats: &DMatrix<f64>, r: &DVector<f64>, w: &DMatrix<f64>) -> Result<f64> {
    let grid = lambda_grid();
    let errs = cv_errors(feats, r, w, &grid);
    let mut best: Option<(f64, f64)> = None;
    for (&l, &e) in grid.iter().zip(&errs) {
        if e.is_finite() && best.is_none_or(|(_, b)| e < b) {
            best = Some((l, e));
        }
    }
    best.map(|(l, _)| l)
        .ok_or_else(|| Error::singular("cross-validation of the ridge penalty", 0.0))
}
