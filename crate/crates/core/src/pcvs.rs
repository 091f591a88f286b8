//! Penalized control variates.
//!
//! The unknown centering of the control variates is estimated blockwise by
//!
//! ```text
//! delta_zeta = argmin_d (delta_hat - d)' Q (delta_hat - d) + zeta * sum_k ||d_k||_2
//! ```
//!
//! with `Q` the precision of `delta_hat`, and the target fit is corrected by
//! `c_0 - U* (delta_hat - delta_zeta)`. The group-lasso problem is solved with
//! accelerated proximal gradient, periodically finished by Newton steps on the
//! current support, and certified by its KKT residual.

use nalgebra::{DMatrix, DVector};

use crate::cvs::CvsSystem;
use crate::error::{Error, Result};
use crate::estimators::LocalFit;
use crate::linalg::{eigen_range, log_grid};
use crate::smoothing::{CoefEstimate, Method};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 50_000;
const POWER_ITERATIONS: usize = 100;
/// Accelerated iterations between attempts to finish with Newton steps on the
/// current support.
const POLISH_EVERY: usize = 50;

#[derive(Debug, Clone)]
pub struct GroupLassoProblem {
    pub q: DMatrix<f64>,
    pub delta_hat: DVector<f64>,
    pub zeta: f64,
    pub group_size: usize,
    pub n_groups: usize,
}

#[derive(Debug, Clone)]
pub struct GroupLassoSolution {
    pub delta_zeta: DVector<f64>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Groups (0-based source indices) with a nonzero block.
    pub active_groups: Vec<usize>,
    /// Objective after every accepted iterate, starting with the initial point.
    pub objective_history: Vec<f64>,
}

impl GroupLassoProblem {
    pub fn new(q: DMatrix<f64>, delta_hat: DVector<f64>, zeta: f64, group_size: usize) -> Result<Self> {
        let n = delta_hat.len();
        if group_size == 0 || n == 0 || !n.is_multiple_of(group_size) {
            return Err(Error::invalid(format!(
                "vector length {n} is not a positive multiple of group size {group_size}"
            )));
        }
        if q.shape() != (n, n) {
            return Err(Error::invalid(format!(
                "precision is {}x{}, expected {n}x{n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if !(zeta >= 0.0) || zeta.is_nan() {
            return Err(Error::invalid(format!("zeta must be >= 0, got {zeta}")));
        }
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-10 * q.amax().max(1.0) {
            return Err(Error::invalid(format!("precision is not symmetric (max gap {asym:e})")));
        }
        Ok(GroupLassoProblem {
            q,
            delta_hat,
            zeta,
            group_size,
            n_groups: n / group_size,
        })
    }

    fn block<'a>(&self, v: &'a DVector<f64>, k: usize) -> nalgebra::DVectorView<'a, f64> {
        v.rows(k * self.group_size, self.group_size)
    }

    /// `(delta_hat - d)' Q (delta_hat - d) + zeta sum_k ||d_k||`.
    pub fn objective(&self, d: &DVector<f64>) -> f64 {
        let r = &self.delta_hat - d;
        let smooth = r.dot(&(&self.q * &r));
        let pen: f64 = (0..self.n_groups).map(|k| self.block(d, k).norm()).sum();
        smooth + self.zeta * pen
    }

    /// Gradient of the quadratic part, `2 Q (d - delta_hat)`.
    pub fn gradient(&self, d: &DVector<f64>) -> DVector<f64> {
        (&self.q * (d - &self.delta_hat)) * 2.0
    }

    /// Largest KKT violation over groups.
    pub fn kkt_residual(&self, d: &DVector<f64>) -> f64 {
        let g = self.gradient(d);
        (0..self.n_groups)
            .map(|k| {
                let dk = self.block(d, k);
                let gk = self.block(&g, k);
                let nd = dk.norm();
                if nd > 0.0 {
                    (gk + dk * (self.zeta / nd)).norm()
                } else {
                    (gk.norm() - self.zeta).max(0.0)
                }
            })
            .fold(0.0, f64::max)
    }

    /// Smallest penalty at which the all-zero solution is optimal.
    pub fn zeta_max(&self) -> f64 {
        let g = (&self.q * &self.delta_hat) * 2.0;
        (0..self.n_groups)
            .map(|k| self.block(&g, k).norm())
            .fold(0.0, f64::max)
    }

    fn prox(&self, v: &DVector<f64>, step: f64) -> DVector<f64> {
        let mut out = v.clone();
        let thresh = self.zeta * step;
        for k in 0..self.n_groups {
            let mut blk = out.rows_mut(k * self.group_size, self.group_size);
            let nrm = blk.norm();
            let scale = if nrm > 0.0 { (1.0 - thresh / nrm).max(0.0) } else { 0.0 };
            blk *= scale;
        }
        out
    }

    fn active(&self, d: &DVector<f64>) -> Vec<usize> {
        (0..self.n_groups)
            .filter(|&k| self.block(d, k).iter().any(|v| *v != 0.0))
            .collect()
    }
}

/// Newton iterations on the smooth problem restricted to the nonzero blocks of
/// `x`, with the other blocks held at zero. Returns `None` when the restricted
/// Hessian is singular or a block collapses to zero.
fn newton_polish(p: &GroupLassoProblem, x: &DVector<f64>) -> Option<DVector<f64>> {
    let m = p.group_size;
    let active = p.active(x);
    if active.is_empty() {
        return None;
    }
    let idx: Vec<usize> = active.iter().flat_map(|&k| k * m..(k + 1) * m).collect();
    let na = idx.len();
    let q_aa = DMatrix::from_fn(na, na, |a, b| p.q[(idx[a], idx[b])]);
    let mut cur = x.clone();
    let mut f_cur = p.objective(&cur);
    for _ in 0..50 {
        let full_grad = p.gradient(&cur);
        let mut g = DVector::from_fn(na, |a, _| full_grad[idx[a]]);
        let mut h = &q_aa * 2.0;
        for (slot, &k) in active.iter().enumerate() {
            let dk = p.block(&cur, k).clone_owned();
            let nd = dk.norm();
            if nd == 0.0 {
                return None;
            }
            let u = &dk / nd;
            let curv = (DMatrix::identity(m, m) - &u * u.transpose()) * (p.zeta / nd);
            let off = slot * m;
            let mut hb = h.view_mut((off, off), (m, m));
            hb += curv;
            let mut gb = g.rows_mut(off, m);
            gb += &u * p.zeta;
        }
        if g.amax() == 0.0 {
            break;
        }
        let step = h.cholesky()?.solve(&g);
        let decrease = g.dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let mut trial = cur.clone();
            for a in 0..na {
                trial[idx[a]] -= t * step[a];
            }
            if active.iter().any(|&k| p.block(&trial, k).norm() == 0.0) {
                return None;
            }
            let f_trial = p.objective(&trial);
            if f_trial <= f_cur - 1e-4 * t * decrease {
                accepted = Some((trial, f_trial));
                break;
            }
            t *= 0.5;
        }
        let Some((next, f_next)) = accepted else { break };
        let converged = (f_cur - f_next) <= 1e-16 * f_cur.abs().max(1.0);
        cur = next;
        f_cur = f_next;
        if converged {
            break;
        }
    }
    Some(cur)
}

/// Largest eigenvalue of a symmetric PSD matrix by power iteration from a
/// fixed start vector.
pub fn power_lambda_max(q: &DMatrix<f64>, iterations: usize) -> f64 {
    let n = q.nrows();
    let mut v = DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt().fract());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = q * &v;
        let nrm = w.norm();
        if nrm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / nrm;
    }
    lambda.max(v.dot(&(q * &v)))
}

/// Solves the group-lasso problem from a zero start.
pub fn group_lasso_solve(p: &GroupLassoProblem, tol: f64, max_iter: usize) -> Result<GroupLassoSolution> {
    group_lasso_solve_from(p, tol, max_iter, None)
}

/// Solves the group-lasso problem, optionally warm-started at `init`.
pub fn group_lasso_solve_from(
    p: &GroupLassoProblem,
    tol: f64,
    max_iter: usize,
    init: Option<&DVector<f64>>,
) -> Result<GroupLassoSolution> {
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {tol}")));
    }
    let (lo, hi) = eigen_range(&p.q);
    if lo < -1e-8 * hi.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "precision is not positive semidefinite (smallest eigenvalue {lo:e})"
        )));
    }
    let n = p.delta_hat.len();
    let finish = |d: DVector<f64>, iterations: usize, history: Vec<f64>| {
        let kkt_residual = p.kkt_residual(&d);
        GroupLassoSolution {
            active_groups: p.active(&d),
            delta_zeta: d,
            iterations,
            kkt_residual,
            objective_history: history,
        }
    };

    if p.zeta == 0.0 {
        let d = p.delta_hat.clone();
        let f = p.objective(&d);
        return Ok(finish(d, 0, vec![f]));
    }
    let mut x = match init {
        Some(v) if v.len() == n => v.clone(),
        Some(v) => {
            return Err(Error::invalid(format!("warm start has length {}, expected {n}", v.len())))
        }
        None => DVector::zeros(n),
    };
    let mut fx = p.objective(&x);
    let mut history = vec![fx];
    if p.kkt_residual(&x) <= tol {
        return Ok(finish(x, 0, history));
    }

    let mut lipschitz = 2.0 * power_lambda_max(&p.q, POWER_ITERATIONS);
    if lipschitz <= 0.0 {
        // Q = 0: the penalty alone is minimized at zero
        let d = DVector::zeros(n);
        let f = p.objective(&d);
        history.push(f);
        return Ok(finish(d, 1, history));
    }
    let mut y = x.clone();
    let mut t = 1.0f64;
    let slack = 1e-12;
    let mut last_kkt = f64::INFINITY;
    for it in 1..=max_iter {
        let step = 1.0 / lipschitz;
        let mut x_new = p.prox(&(&y - p.gradient(&y) * step), step);
        let mut f_new = p.objective(&x_new);
        if f_new > fx + slack * fx.abs().max(1.0) {
            // momentum overshot: restart from x with a plain proximal step,
            // tightening the step until it decreases the objective
            t = 1.0;
            loop {
                let step = 1.0 / lipschitz;
                x_new = p.prox(&(&x - p.gradient(&x) * step), step);
                f_new = p.objective(&x_new);
                if f_new <= fx + slack * fx.abs().max(1.0) || lipschitz > 1e300 {
                    break;
                }
                lipschitz *= 2.0;
            }
            if f_new > fx {
                x_new = x.clone();
                f_new = fx;
            }
        }
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = &x_new + (&x_new - &x) * ((t - 1.0) / t_new);
        x = x_new;
        fx = f_new;
        t = t_new;
        history.push(fx);
        last_kkt = p.kkt_residual(&x);
        if last_kkt <= tol {
            return Ok(finish(x, it, history));
        }
        if it % POLISH_EVERY == 0 {
            if let Some(polished) = newton_polish(p, &x) {
                let f_pol = p.objective(&polished);
                if f_pol <= fx {
                    let kkt = p.kkt_residual(&polished);
                    history.push(f_pol);
                    if kkt <= tol {
                        return Ok(finish(polished, it, history));
                    }
                    // keep the better point and restart momentum from it
                    x = polished;
                    y = x.clone();
                    fx = f_pol;
                    t = 1.0;
                    last_kkt = kkt;
                }
            }
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual: last_kkt,
    })
}

/// Result of a penalized control-variates fit.
#[derive(Debug, Clone)]
pub struct PcvsFit {
    pub estimate: CoefEstimate,
    pub solution: GroupLassoSolution,
    pub zeta: f64,
}

/// Group-lasso problem of a CVS system, rescaled so that `lambda_max(Q) = 1`.
///
/// Dividing `Q` and `zeta` by the same constant leaves the minimizer unchanged
/// and makes the absolute KKT tolerance meaningful for plug-in precisions,
/// whose scale follows the inverse coefficient variances.
fn scaled_problem(sys: &CvsSystem, q: &DMatrix<f64>, zeta: f64) -> Result<(GroupLassoProblem, f64)> {
    let scale = power_lambda_max(q, POWER_ITERATIONS);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let p = GroupLassoProblem::new(q / scale, sys.delta_hat.clone(), zeta / scale, sys.m())?;
    Ok((p, scale))
}

/// Smallest `zeta` giving an all-zero centering for this system.
pub fn system_zeta_max(sys: &CvsSystem, q: &DMatrix<f64>) -> Result<f64> {
    let p = GroupLassoProblem::new(q.clone(), sys.delta_hat.clone(), 0.0, sys.m())?;
    Ok(p.zeta_max())
}

/// pCVS estimate at a single `zeta`.
pub fn pcvs_estimate(
    sys: &CvsSystem,
    q: &DMatrix<f64>,
    target_fit: &LocalFit,
    zeta: f64,
) -> Result<PcvsFit> {
    pcvs_estimate_from(sys, q, target_fit, zeta, None)
}

fn pcvs_estimate_from(
    sys: &CvsSystem,
    q: &DMatrix<f64>,
    target_fit: &LocalFit,
    zeta: f64,
    init: Option<&DVector<f64>>,
) -> Result<PcvsFit> {
    if target_fit.c_hat.len() != sys.m() {
        return Err(Error::invalid("target fit does not match the system dimension"));
    }
    let (p, _) = scaled_problem(sys, q, zeta)?;
    let solution = group_lasso_solve_from(&p, DEFAULT_TOL, DEFAULT_MAX_ITER, init)?;
    let c = &target_fit.c_hat - &sys.u_star * (&sys.delta_hat - &solution.delta_zeta);
    Ok(PcvsFit {
        estimate: CoefEstimate {
            c,
            method: Method::Pcvs,
            basis: sys.basis.clone(),
        },
        solution,
        zeta,
    })
}

#[derive(Debug, Clone)]
pub struct PathPoint {
    pub zeta: f64,
    pub estimate: CoefEstimate,
    pub active_groups: Vec<usize>,
}

/// Warm-started solutions along a descending `grid`, with `zeta_max` prepended.
pub fn zeta_path(
    sys: &CvsSystem,
    q: &DMatrix<f64>,
    target_fit: &LocalFit,
    grid: &[f64],
) -> Result<Vec<PathPoint>> {
    if grid.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid("zeta grid must be sorted in descending order"));
    }
    let zmax = system_zeta_max(sys, q)?;
    let mut out = Vec::with_capacity(grid.len() + 1);
    let mut warm: Option<DVector<f64>> = None;
    for &zeta in std::iter::once(&zmax).chain(grid) {
        let fit = pcvs_estimate_from(sys, q, target_fit, zeta, warm.as_ref())?;
        warm = Some(fit.solution.delta_zeta.clone());
        out.push(PathPoint {
            zeta,
            active_groups: fit.solution.active_groups,
            estimate: fit.estimate,
        });
    }
    Ok(out)
}

/// Ratios `zeta / zeta_max` of the default path: 20 log-spaced values from 1
/// down to 1e-4.
pub fn default_zeta_ratios() -> Vec<f64> {
    let mut r = log_grid(1e-4, 1.0, 20);
    r.reverse();
    r
}
