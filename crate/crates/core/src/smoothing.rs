//! Roughness-penalized smoothing of discretely observed curves.
//!
//! Each curve `z_i` observed on an even grid is represented by basis
//! coefficients `b_i = P z_i` with `P = (Phi'Phi + rho W)^-1 Phi'`. The
//! regression features of subject `i` are `Psi b_i` and their cross-product
//! `Omega = Psi B B' Psi` is the Gram matrix used by every estimator.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::linalg::{log_grid, spd_solve, symmetrize};

/// Largest tolerated deviation of a grid spacing from `1 / (J - 1)`.
pub const GRID_TOLERANCE: f64 = 1e-6;

/// Discretely observed curves `z` (J x n, one column per subject) with responses.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    z: DMatrix<f64>,
    y: DVector<f64>,
    grid: Vec<f64>,
    id: usize,
}

/// Checks that `grid` is evenly spaced from 0 to 1. On failure the error
/// message carries the largest spacing deviation.
pub fn validate_grid(grid: &[f64]) -> Result<()> {
    let j = grid.len();
    if j < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 points, got {j}")));
    }
    if let Some(bad) = grid.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::invalid(format!("grid point {bad} outside [0, 1]")));
    }
    if grid[0] != 0.0 || grid[j - 1] != 1.0 {
        return Err(Error::invalid(format!(
            "grid must start at 0 and end at 1, got [{}, {}]",
            grid[0],
            grid[j - 1]
        )));
    }
    let h = 1.0 / (j - 1) as f64;
    let mut worst = 0.0f64;
    for w in grid.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::invalid(format!(
                "grid is not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        worst = worst.max((w[1] - w[0] - h).abs());
    }
    if worst > GRID_TOLERANCE {
        return Err(Error::invalid(format!(
            "grid is not evenly spaced (max spacing deviation {worst:.6})"
        )));
    }
    Ok(())
}

/// `j` evenly spaced points `t_j = j / (J - 1)` on [0, 1].
pub fn even_grid(j: usize) -> Vec<f64> {
    (0..j).map(|i| i as f64 / (j - 1) as f64).collect()
}

impl RawDataset {
    pub fn new(z: DMatrix<f64>, y: DVector<f64>, grid: Vec<f64>, id: usize) -> Result<Self> {
        validate_grid(&grid)?;
        if z.nrows() != grid.len() {
            return Err(Error::invalid(format!(
                "curve matrix has {} rows but the grid has {} points",
                z.nrows(),
                grid.len()
            )));
        }
        if z.ncols() == 0 {
            return Err(Error::invalid("dataset has no subjects"));
        }
        if y.len() != z.ncols() {
            return Err(Error::invalid(format!(
                "{} responses for {} curves",
                y.len(),
                z.ncols()
            )));
        }
        if z.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(RawDataset { z, y, grid, id })
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Number of subjects.
    pub fn n(&self) -> usize {
        self.z.ncols()
    }

    /// Number of grid points.
    pub fn j(&self) -> usize {
        self.z.nrows()
    }

    /// Copy with sample-mean-centered responses and grid rows.
    pub fn centered(&self) -> Self {
        let mut z = self.z.clone();
        for mut row in z.row_iter_mut() {
            let mean = row.mean();
            row.add_scalar_mut(-mean);
        }
        let y = self.y.add_scalar(-self.y.mean());
        RawDataset {
            z,
            y,
            grid: self.grid.clone(),
            id: self.id,
        }
    }

    /// Subjects at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() {
            return Err(Error::invalid("empty subject subset"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= self.n()) {
            return Err(Error::invalid(format!(
                "subject index {bad} out of range for {} subjects",
                self.n()
            )));
        }
        Ok(RawDataset {
            z: self.z.select_columns(idx),
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            grid: self.grid.clone(),
            id: self.id,
        })
    }
}

/// Smoothed curves together with the matrices derived from them.
#[derive(Debug, Clone)]
pub struct SmoothedDataset {
    basis: Arc<BasisSystem>,
    raw: RawDataset,
    phi: DMatrix<f64>,
    p: DMatrix<f64>,
    b: DMatrix<f64>,
    omega: DMatrix<f64>,
    rho: f64,
}

/// Smooths every curve of `raw` with penalty `rho`.
pub fn smooth(raw: &RawDataset, basis: &Arc<BasisSystem>, rho: f64) -> Result<SmoothedDataset> {
    if !(rho >= 0.0) || !rho.is_finite() {
        return Err(Error::invalid(format!("smoothing parameter must be >= 0, got {rho}")));
    }
    let phi = basis.eval(raw.grid())?;
    let p = projector(&phi, basis, rho)?;
    Ok(SmoothedDataset::assemble(basis.clone(), raw.clone(), phi, p, rho))
}

fn projector(phi: &DMatrix<f64>, basis: &BasisSystem, rho: f64) -> Result<DMatrix<f64>> {
    let lhs = symmetrize(&(phi.transpose() * phi + basis.w() * rho));
    spd_solve(&lhs, &phi.transpose(), "curve smoothing", rho)
}

impl SmoothedDataset {
    fn assemble(
        basis: Arc<BasisSystem>,
        raw: RawDataset,
        phi: DMatrix<f64>,
        p: DMatrix<f64>,
        rho: f64,
    ) -> Self {
        let b = &p * raw.z();
        let f = basis.psi() * &b;
        let omega = symmetrize(&(&f * f.transpose()));
        SmoothedDataset {
            basis,
            raw,
            phi,
            p,
            b,
            omega,
            rho,
        }
    }

    /// Smooths another dataset on the same grid with this projector.
    pub fn apply_to(&self, raw: &RawDataset) -> Result<SmoothedDataset> {
        if raw.grid() != self.raw.grid() {
            return Err(Error::invalid("dataset grid differs from the smoothing grid"));
        }
        Ok(SmoothedDataset::assemble(
            self.basis.clone(),
            raw.clone(),
            self.phi.clone(),
            self.p.clone(),
            self.rho,
        ))
    }

    /// Restriction to the subjects at `idx`; the projector is kept as is.
    pub fn subset(&self, idx: &[usize]) -> Result<SmoothedDataset> {
        let raw = self.raw.subset(idx)?;
        self.apply_to(&raw)
    }

    pub fn basis(&self) -> &Arc<BasisSystem> {
        &self.basis
    }

    pub fn raw(&self) -> &RawDataset {
        &self.raw
    }

    pub fn y(&self) -> &DVector<f64> {
        self.raw.y()
    }

    /// Basis evaluated at the grid (J x M).
    pub fn phi(&self) -> &DMatrix<f64> {
        &self.phi
    }

    /// Projector from grid values to coefficients (M x J).
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Curve coefficients, one column per subject (M x n).
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn n(&self) -> usize {
        self.raw.n()
    }

    /// Regression features `Psi B` (M x n).
    pub fn features(&self) -> DMatrix<f64> {
        self.basis.psi() * &self.b
    }

    /// Inner products `<X_hat_i, phi' c>` for every subject.
    pub fn inner_products(&self, c: &DVector<f64>) -> DVector<f64> {
        self.b.tr_mul(&(self.basis.psi() * c))
    }
}

/// Generalized cross-validation score of the smoothing step for each `rho`.
///
/// `GCV(rho) = (RSS / (n J)) / (1 - tr(H) / J)^2` with `H = Phi P`; values
/// whose hat matrix has trace `J` are reported as infinite.
pub fn gcv_scores(raw: &RawDataset, basis: &BasisSystem, rhos: &[f64]) -> Result<Vec<f64>> {
    let phi = basis.eval(raw.grid())?;
    let j = raw.j() as f64;
    let nj = (raw.n() * raw.j()) as f64;
    rhos.iter()
        .map(|&rho| {
            let p = match projector(&phi, basis, rho) {
                Ok(p) => p,
                Err(_) => return Ok(f64::INFINITY),
            };
            let hat = &phi * &p;
            let resid = raw.z() - &hat * raw.z();
            let denom = 1.0 - hat.trace() / j;
            if denom <= 1e-12 {
                return Ok(f64::INFINITY);
            }
            Ok(resid.norm_squared() / nj / (denom * denom))
        })
        .collect()
}

/// How the smoothing penalty is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
#[derive(Default)]
pub enum RhoChoice {
    Fixed(f64),
    #[default]
    Gcv,
}


/// Candidate smoothing penalties searched by GCV.
pub fn rho_grid() -> Vec<f64> {
    log_grid(1e-10, 1.0, 25)
}

/// Chooses `rho` by minimizing GCV over [`rho_grid`]; ties go to the smaller value.
pub fn select_rho(raw: &RawDataset, basis: &BasisSystem) -> Result<f64> {
    let grid = rho_grid();
    let scores = gcv_scores(raw, basis, &grid)?;
    let mut best: Option<(f64, f64)> = None;
    for (&rho, &s) in grid.iter().zip(&scores) {
        if s.is_finite() && best.is_none_or(|(_, b)| s < b) {
            best = Some((rho, s));
        }
    }
    best.map(|(rho, _)| rho)
        .ok_or_else(|| Error::singular("GCV smoothing search", 0.0))
}

pub fn smooth_with(
    raw: &RawDataset,
    basis: &Arc<BasisSystem>,
    choice: RhoChoice,
) -> Result<SmoothedDataset> {
    let rho = match choice {
        RhoChoice::Fixed(r) => r,
        RhoChoice::Gcv => select_rho(raw, basis)?,
    };
    smooth(raw, basis, rho)
}

/// Which estimator produced a coefficient vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Local,
    Pooled,
    Otl,
    Aotl,
    Cvs,
    Pcvs,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::Pooled => "pooled",
            Method::Otl => "otl",
            Method::Aotl => "aotl",
            Method::Cvs => "cvs",
            Method::Pcvs => "pcvs",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "local" => Method::Local,
            "pooled" => Method::Pooled,
            "otl" => Method::Otl,
            "aotl" => Method::Aotl,
            "cvs" => Method::Cvs,
            "pcvs" => Method::Pcvs,
            other => return Err(Error::invalid(format!("unknown method '{other}'"))),
        })
    }
}

/// A coefficient function `beta = phi' c`.
#[derive(Debug, Clone)]
pub struct CoefEstimate {
    pub c: DVector<f64>,
    pub method: Method,
    pub basis: Arc<BasisSystem>,
}

impl CoefEstimate {
    pub fn new(c: DVector<f64>, method: Method, basis: Arc<BasisSystem>) -> Result<Self> {
        if c.len() != basis.m() {
            return Err(Error::invalid(format!(
                "coefficient length {} does not match basis size {}",
                c.len(),
                basis.m()
            )));
        }
        Ok(CoefEstimate { c, method, basis })
    }

    pub fn zeros(method: Method, basis: Arc<BasisSystem>) -> Self {
        CoefEstimate {
            c: DVector::zeros(basis.m()),
            method,
            basis,
        }
    }

    pub(crate) fn check_basis(&self, other: &BasisSystem) -> Result<()> {
        if std::ptr::eq(Arc::as_ptr(&self.basis), other) || *self.basis == *other {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "estimate uses a basis of size {} but the data use size {}",
                self.basis.m(),
                other.m()
            )))
        }
    }
}

/// Squared empirical-covariance norm `n^-1 c' Omega c`.
pub fn empirical_cov_norm_sq(f: &CoefEstimate, target: &SmoothedDataset) -> Result<f64> {
    f.check_basis(target.basis())?;
    let q = f.c.dot(&(target.omega() * &f.c));
    Ok((q / target.n() as f64).max(0.0))
}

/// Predicted responses `<X_hat_i, beta>` for every subject of `curves`.
pub fn predict(f: &CoefEstimate, curves: &SmoothedDataset) -> Result<DVector<f64>> {
    f.check_basis(curves.basis())?;
    Ok(curves.inner_products(&f.c))
}
