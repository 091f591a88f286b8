//! Control-variates combination of local fits.
//!
//! The control variates are `delta_k = c_0 - c_k` for each source `k`. With
//! `V_k = var(c_k | Z_k)` and `S = sum_{k=0..K} V_k^-1`, the variance-optimal
//! combiner is `U* = S^-1 [V_1^-1, ..., V_K^-1]` and the estimator is
//! `c_0 - U* (delta - E(delta | Z))`. Everything is computed blockwise; the
//! dense `MK x MK` covariance of `delta` is never formed.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::basis::BasisSystem;
use crate::error::{Error, Result};
use crate::estimators::LocalFit;
use crate::linalg::{block_diag, spd_inverse, symmetrize};
use crate::smoothing::{CoefEstimate, Method};

#[derive(Debug, Clone)]
pub struct CvsSystem {
    /// Target local coefficients.
    pub c0: DVector<f64>,
    /// Stacked `c_0 - c_k`, k = 1..K.
    pub delta_hat: DVector<f64>,
    /// Plug-in `E(delta | Z)`.
    pub e_delta: DVector<f64>,
    /// Combiner `U*` (M x MK).
    pub u_star: DMatrix<f64>,
    /// `var(c_k | Z)` for k = 0..K.
    pub v_blocks: Vec<DMatrix<f64>>,
    /// Inverses of `v_blocks`.
    pub v_inv: Vec<DMatrix<f64>>,
    /// `S^-1 = (sum_k V_k^-1)^-1`.
    pub precision_sum_inv: DMatrix<f64>,
    pub basis: Arc<BasisSystem>,
}

/// Inverts each variance block, naming the first singular one.
pub fn invert_blocks(blocks: &[DMatrix<f64>]) -> Result<Vec<DMatrix<f64>>> {
    blocks
        .iter()
        .enumerate()
        .map(|(k, v)| spd_inverse(v).ok_or(Error::SingularVariance { k }))
        .collect()
}

fn check_fits(fits: &[LocalFit]) -> Result<()> {
    if fits.len() < 2 {
        return Err(Error::invalid(format!(
            "control variates need the target and at least one source, got {} fits",
            fits.len()
        )));
    }
    let basis = &fits[0].basis;
    if fits.iter().any(|f| *f.basis != **basis) {
        return Err(Error::invalid("local fits use different bases"));
    }
    Ok(())
}

/// Builds the system from local fits, target first.
pub fn assemble_cvs(fits: &[LocalFit]) -> Result<CvsSystem> {
    check_fits(fits)?;
    let c: Vec<_> = fits.iter().map(|f| f.c_hat.clone()).collect();
    let e: Vec<_> = fits.iter().map(|f| f.e_hat.clone()).collect();
    let v: Vec<_> = fits.iter().map(|f| f.v_hat.clone()).collect();
    CvsSystem::from_parts(&c, &e, &v, fits[0].basis.clone())
}

fn stack_differences(first: &DVector<f64>, rest: &[DVector<f64>]) -> DVector<f64> {
    let m = first.len();
    let mut out = DVector::zeros(m * rest.len());
    for (k, v) in rest.iter().enumerate() {
        out.rows_mut(k * m, m).copy_from(&(first - v));
    }
    out
}

impl CvsSystem {
    /// Builds the system from per-dataset coefficients, expectation plug-ins
    /// and variance blocks (index 0 is the target).
    pub fn from_parts(
        c: &[DVector<f64>],
        e: &[DVector<f64>],
        v: &[DMatrix<f64>],
        basis: Arc<BasisSystem>,
    ) -> Result<Self> {
        let m = basis.m();
        if c.len() < 2 || c.len() != e.len() || c.len() != v.len() {
            return Err(Error::invalid("need matching coefficient, expectation and variance lists with K >= 1"));
        }
        if c.iter().chain(e).any(|x| x.len() != m) || v.iter().any(|b| b.shape() != (m, m)) {
            return Err(Error::invalid("dimension mismatch with the basis size"));
        }
        let k = c.len() - 1;
        let v_inv = invert_blocks(v)?;
        let s = v_inv.iter().fold(DMatrix::zeros(m, m), |acc, b| acc + b);
        let s_inv = spd_inverse(&s).ok_or_else(|| Error::singular("sum of precisions", 0.0))?;
        let mut u_star = DMatrix::zeros(m, m * k);
        for (j, vi) in v_inv.iter().skip(1).enumerate() {
            u_star.columns_mut(j * m, m).copy_from(&(&s_inv * vi));
        }
        Ok(CvsSystem {
            c0: c[0].clone(),
            delta_hat: stack_differences(&c[0], &c[1..]),
            e_delta: stack_differences(&e[0], &e[1..]),
            u_star,
            v_blocks: v.to_vec(),
            v_inv,
            precision_sum_inv: s_inv,
            basis,
        })
    }

    pub fn m(&self) -> usize {
        self.basis.m()
    }

    /// Number of sources.
    pub fn k(&self) -> usize {
        self.v_blocks.len() - 1
    }

    /// `c_0 - U* (delta_hat - delta)` for a given centering `delta`.
    pub fn corrected(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        if delta.len() != self.delta_hat.len() {
            return Err(Error::invalid(format!(
                "centering vector has length {}, expected {}",
                delta.len(),
                self.delta_hat.len()
            )));
        }
        Ok(&self.c0 - &self.u_star * (&self.delta_hat - delta))
    }

    /// `Q = B1 - B2`, the precision of the control variates.
    pub fn delta_precision(&self) -> DMatrix<f64> {
        let b1 = block_diag(&self.v_inv[1..]);
        let g = self.source_precisions();
        let b2 = g.transpose() * &self.precision_sum_inv * &g;
        symmetrize(&(b1 - b2))
    }

    /// `[V_1^-1, ..., V_K^-1]` (M x MK).
    pub fn source_precisions(&self) -> DMatrix<f64> {
        let m = self.m();
        let mut g = DMatrix::zeros(m, m * self.k());
        for (j, vi) in self.v_inv.iter().skip(1).enumerate() {
            g.columns_mut(j * m, m).copy_from(vi);
        }
        g
    }

    pub fn partitioned_inverse(&self) -> PartitionedInverse {
        let s = self
            .v_inv
            .iter()
            .fold(DMatrix::zeros(self.m(), self.m()), |acc, b| acc + b);
        PartitionedInverse {
            b11: s,
            b12: -self.source_precisions(),
            b22: block_diag(&self.v_inv[1..]),
        }
    }
}

/// The CVS estimate `c_0 - U* (delta_hat - E(delta | Z))`.
pub fn cvs_estimate(sys: &CvsSystem, target_fit: &LocalFit) -> Result<CoefEstimate> {
    if target_fit.c_hat.len() != sys.m() {
        return Err(Error::invalid("target fit does not match the system dimension"));
    }
    let c = &target_fit.c_hat - &sys.u_star * (&sys.delta_hat - &sys.e_delta);
    Ok(CoefEstimate {
        c,
        method: Method::Cvs,
        basis: sys.basis.clone(),
    })
}

/// Precision of the control variates built from local fits.
pub fn delta_precision(fits: &[LocalFit]) -> Result<DMatrix<f64>> {
    Ok(assemble_cvs(fits)?.delta_precision())
}

/// Blocks of the inverse joint covariance of `(c_0, delta)`.
#[derive(Debug, Clone)]
pub struct PartitionedInverse {
    pub b11: DMatrix<f64>,
    pub b12: DMatrix<f64>,
    pub b22: DMatrix<f64>,
}

impl PartitionedInverse {
    pub fn assemble(&self) -> DMatrix<f64> {
        let m = self.b11.nrows();
        let mk = self.b22.nrows();
        let mut out = DMatrix::zeros(m + mk, m + mk);
        out.view_mut((0, 0), (m, m)).copy_from(&self.b11);
        out.view_mut((0, m), (m, mk)).copy_from(&self.b12);
        out.view_mut((m, 0), (mk, m)).copy_from(&self.b12.transpose());
        out.view_mut((m, m), (mk, mk)).copy_from(&self.b22);
        out
    }
}

pub fn partitioned_inverse_blocks(fits: &[LocalFit]) -> Result<PartitionedInverse> {
    Ok(assemble_cvs(fits)?.partitioned_inverse())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::basis::fourier_basis;
    use crate::linalg::eigen_range;
    use nalgebra::{Complex, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_spd(m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
        let scale = DMatrix::from_diagonal(&DVector::from_fn(m, |_, _| rng.random_range(0.1..2.0)));
        let b = &a * scale;
        &b * b.transpose() + DMatrix::identity(m, m) * 0.05
    }

    pub(crate) fn fake_fit(c: DVector<f64>, e: DVector<f64>, v: DMatrix<f64>) -> LocalFit {
        let m = c.len();
        LocalFit {
            c_hat: c,
            lambda: 1.0,
            e_hat: e,
            v_hat: v,
            jitter: 0.0,
            sigma2_eps: 0.0,
            sigma2_err: 0.0,
            n: 10,
            basis: Arc::new(fourier_basis(m).unwrap()),
        }
    }

    pub(crate) fn random_fits(m: usize, k: usize, seed: u64) -> Vec<LocalFit> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..=k)
            .map(|_| {
                let c = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                let e = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                fake_fit(c, e, random_spd(m, &mut rng))
            })
            .collect()
    }

    /// Dense `var(delta) = (1 1') (x) V0 + blockdiag(V1..VK)`.
    pub(crate) fn dense_var_delta(v: &[DMatrix<f64>]) -> DMatrix<f64> {
        let m = v[0].nrows();
        let k = v.len() - 1;
        let mut out = block_diag(&v[1..]);
        for a in 0..k {
            for b in 0..k {
                let mut blk = out.view_mut((a * m, b * m), (m, m));
                blk += &v[0];
            }
        }
        out
    }

    fn ones_kron(v0: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let m = v0.nrows();
        let mut out = DMatrix::zeros(m, m * k);
        for j in 0..k {
            out.columns_mut(j * m, m).copy_from(v0);
        }
        out
    }

    #[test]
    fn equal_variances_average_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = random_spd(3, &mut rng);
        let c0 = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let c1 = DVector::from_vec(vec![-1.0, 0.5, 4.0]);
        let fits = vec![
            fake_fit(c0.clone(), DVector::zeros(3), v.clone()),
            fake_fit(c1.clone(), DVector::zeros(3), v),
        ];
        let sys = assemble_cvs(&fits).unwrap();
        assert!((&sys.u_star - DMatrix::identity(3, 3) * 0.5).amax() < 1e-12);
        // with zero expectation plug-ins the estimate is the plain average
        let est = cvs_estimate(&sys, &fits[0]).unwrap();
        assert!((est.c - (c0 + c1) * 0.5).amax() < 1e-12);
    }

    #[test]
    fn identity_blocks_give_thirds() {
        let fits: Vec<_> = (0..3)
            .map(|_| fake_fit(DVector::zeros(2), DVector::zeros(2), DMatrix::identity(2, 2)))
            .collect();
        let sys = assemble_cvs(&fits).unwrap();
        let mut expected = DMatrix::zeros(2, 4);
        expected.columns_mut(0, 2).copy_from(&(DMatrix::identity(2, 2) / 3.0));
        expected.columns_mut(2, 2).copy_from(&(DMatrix::identity(2, 2) / 3.0));
        assert!((&sys.u_star - expected).amax() < 1e-14);
    }

    #[test]
    fn combiner_matches_dense_formula() {
        let fits = random_fits(4, 3, 7);
        let sys = assemble_cvs(&fits).unwrap();
        let v: Vec<_> = fits.iter().map(|f| f.v_hat.clone()).collect();
        let dense = ones_kron(&v[0], 3) * dense_var_delta(&v).try_inverse().unwrap();
        assert!((&sys.u_star - dense).amax() < 1e-8);
    }

    #[test]
    fn estimate_matches_definition() {
        let fits = random_fits(3, 2, 9);
        let sys = assemble_cvs(&fits).unwrap();
        let est = cvs_estimate(&sys, &fits[0]).unwrap();
        assert_eq!(est.method, Method::Cvs);
        let direct = sys.corrected(&sys.e_delta).unwrap();
        assert!((est.c - direct).amax() < 1e-12);
        // centering at delta_hat removes the correction
        let none = sys.corrected(&sys.delta_hat).unwrap();
        assert_eq!(none, fits[0].c_hat);
        assert!(sys.corrected(&DVector::zeros(2)).is_err());
    }

    #[test]
    fn matched_expectation_returns_local() {
        let mut fits = random_fits(3, 2, 10);
        // make delta_hat equal its plug-in expectation
        for f in fits.iter_mut() {
            f.e_hat = f.c_hat.clone();
        }
        let sys = assemble_cvs(&fits).unwrap();
        let est = cvs_estimate(&sys, &fits[0]).unwrap();
        assert!((est.c - &fits[0].c_hat).amax() < 1e-15);
    }

    #[test]
    fn delta_blocks_are_differences() {
        let fits = random_fits(3, 3, 11);
        let sys = assemble_cvs(&fits).unwrap();
        for k in 1..=3 {
            let blk = sys.delta_hat.rows((k - 1) * 3, 3);
            assert_eq!(blk, &fits[0].c_hat - &fits[k].c_hat);
        }
    }

    #[test]
    fn combiner_identity_and_block_spectra() {
        for seed in 0..20 {
            let fits = random_fits(4, 3, 100 + seed);
            let sys = assemble_cvs(&fits).unwrap();
            let m = 4;
            let mut sum = DMatrix::zeros(m, m);
            for j in 0..3 {
                sum += sys.u_star.columns(j * m, m);
            }
            let expected = DMatrix::identity(m, m) - &sys.precision_sum_inv * &sys.v_inv[0];
            assert!((sum - expected).amax() < 1e-8);
            // each block S^-1 V_k^-1 has real spectrum inside [0, 1]
            for j in 0..3 {
                let blk = sys.u_star.columns(j * m, m).into_owned();
                let eig: Vec<Complex<f64>> = blk.complex_eigenvalues().iter().cloned().collect();
                for z in eig {
                    assert!(z.im.abs() < 1e-8);
                    assert!(z.re > -1e-8 && z.re < 1.0 + 1e-8, "{z}");
                }
            }
        }
    }

    #[test]
    fn precision_single_source_is_inverse_sum() {
        let fits = random_fits(3, 1, 12);
        let q = delta_precision(&fits).unwrap();
        let expected = (&fits[0].v_hat + &fits[1].v_hat).try_inverse().unwrap();
        assert!((q - expected).amax() < 1e-8);
    }

    #[test]
    fn precision_identity_blocks() {
        let m = 2;
        let fits: Vec<_> = (0..3)
            .map(|_| fake_fit(DVector::zeros(m), DVector::zeros(m), DMatrix::identity(m, m)))
            .collect();
        let q = delta_precision(&fits).unwrap();
        let mut expected = DMatrix::identity(4, 4);
        for a in 0..2 {
            for b in 0..2 {
                for i in 0..m {
                    expected[(a * m + i, b * m + i)] -= 1.0 / 3.0;
                }
            }
        }
        assert!((&q - expected).amax() < 1e-14);
        let eig = SymmetricEigen::new(q).eigenvalues;
        for e in eig.iter() {
            assert!((e - 1.0).abs() < 1e-12 || (e - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn precision_inverts_dense_variance() {
        for seed in 0..10 {
            let fits = random_fits(3, 3, 200 + seed);
            let q = delta_precision(&fits).unwrap();
            let v: Vec<_> = fits.iter().map(|f| f.v_hat.clone()).collect();
            let prod = &q * dense_var_delta(&v);
            assert!((prod - DMatrix::identity(9, 9)).amax() < 1e-7);
            let (lo, _) = eigen_range(&q);
            assert!(lo > 0.0);
        }
    }

    #[test]
    fn partitioned_blocks() {
        let m = 2;
        let fits: Vec<_> = (0..3)
            .map(|_| fake_fit(DVector::zeros(m), DVector::zeros(m), DMatrix::identity(m, m)))
            .collect();
        let p = partitioned_inverse_blocks(&fits).unwrap();
        assert_eq!(p.b11, DMatrix::identity(m, m) * 3.0);
        assert_eq!(p.b22, DMatrix::identity(4, 4));
        let mut b12 = DMatrix::zeros(m, 4);
        b12.columns_mut(0, 2).copy_from(&-DMatrix::identity(m, m));
        b12.columns_mut(2, 2).copy_from(&-DMatrix::identity(m, m));
        assert_eq!(p.b12, b12);
    }

    #[test]
    fn partitioned_inverse_of_joint_covariance() {
        let fits = random_fits(3, 1, 13);
        let p = partitioned_inverse_blocks(&fits).unwrap();
        let v0 = &fits[0].v_hat;
        let v: Vec<_> = fits.iter().map(|f| f.v_hat.clone()).collect();
        // cov(c0, delta) = [[V0, 1'(x)V0], [1(x)V0, var(delta)]]
        let m = 3;
        let mut cov = DMatrix::zeros(2 * m, 2 * m);
        cov.view_mut((0, 0), (m, m)).copy_from(v0);
        cov.view_mut((0, m), (m, m)).copy_from(v0);
        cov.view_mut((m, 0), (m, m)).copy_from(v0);
        cov.view_mut((m, m), (m, m)).copy_from(&dense_var_delta(&v));
        let prod = p.assemble() * cov;
        assert!((prod - DMatrix::identity(2 * m, 2 * m)).amax() < 1e-7);
        let sys = assemble_cvs(&fits).unwrap();
        let q = sys.delta_precision();
        let b1 = block_diag(&sys.v_inv[1..]);
        assert_eq!(p.b22, b1);
        assert!((q - b1).amax() > 0.0);
    }

    #[test]
    fn source_order_invariance() {
        let fits = random_fits(3, 3, 14);
        let sys = assemble_cvs(&fits).unwrap();
        let est = cvs_estimate(&sys, &fits[0]).unwrap();
        let perm = vec![fits[0].clone(), fits[3].clone(), fits[1].clone(), fits[2].clone()];
        let sys2 = assemble_cvs(&perm).unwrap();
        let est2 = cvs_estimate(&sys2, &perm[0]).unwrap();
        assert!((est.c - est2.c).amax() < 1e-10);
        assert!((sys.u_star.columns(6, 3) - sys2.u_star.columns(0, 3)).amax() < 1e-12);
    }

    #[test]
    fn singular_block_is_named() {
        let mut fits = random_fits(3, 2, 15);
        fits[2].v_hat = DMatrix::zeros(3, 3);
        match assemble_cvs(&fits) {
            Err(Error::SingularVariance { k }) => assert_eq!(k, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(assemble_cvs(&fits[..1]).is_err());
    }
}
