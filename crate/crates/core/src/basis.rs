//! Orthonormal Fourier basis on [0, 1] with its Gram and roughness matrices.
//!
//! Index 0 is the constant function; indices `2j-1` and `2j` hold
//! `sqrt(2) cos(2 pi j t)` and `sqrt(2) sin(2 pi j t)`. Both the Gram matrix
//! and the second-derivative penalty are built from closed forms.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSystem {
    m: usize,
    psi: DMatrix<f64>,
    w: DMatrix<f64>,
}

/// Builds the Fourier basis with `m` functions.
pub fn fourier_basis(m: usize) -> Result<BasisSystem> {
    if m == 0 {
        return Err(Error::invalid("basis size must be at least 1"));
    }
    let penalty = DVector::from_fn(m, |i, _| {
        let j = frequency(i) as f64;
        16.0 * PI.powi(4) * j.powi(4)
    });
    Ok(BasisSystem {
        m,
        psi: DMatrix::identity(m, m),
        w: DMatrix::from_diagonal(&penalty),
    })
}

/// Basis size used with a grid of `j` points: `1 + 2 floor((j - 1) / 2)`.
pub fn default_m(j: usize) -> Result<usize> {
    if j < 2 {
        return Err(Error::invalid(format!("grid needs at least 2 points, got {j}")));
    }
    Ok(1 + 2 * ((j - 1) / 2))
}

#[inline]
fn frequency(i: usize) -> usize {
    i.div_ceil(2)
}

impl BasisSystem {
    pub fn m(&self) -> usize {
        self.m
    }

    /// Gram matrix of the basis functions.
    pub fn psi(&self) -> &DMatrix<f64> {
        &self.psi
    }

    /// Gram matrix of the second derivatives.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Value of basis function `i` (0-based) at `t`.
    pub fn value(&self, i: usize, t: f64) -> f64 {
        if i == 0 {
            return 1.0;
        }
        let arg = 2.0 * PI * frequency(i) as f64 * t;
        if i % 2 == 1 {
            SQRT_2 * arg.cos()
        } else {
            SQRT_2 * arg.sin()
        }
    }

    /// Evaluation matrix with entry `(j, m) = phi_m(t_j)`.
    pub fn eval(&self, t: &[f64]) -> Result<DMatrix<f64>> {
        if let Some(bad) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::invalid(format!(
                "evaluation point {bad} outside [0, 1]"
            )));
        }
        Ok(DMatrix::from_fn(t.len(), self.m, |j, i| self.value(i, t[j])))
    }

    /// Function value `sum_m c_m phi_m(t)` at each point.
    pub fn eval_function(&self, c: &DVector<f64>, t: &[f64]) -> Result<DVector<f64>> {
        if c.len() != self.m {
            return Err(Error::invalid(format!(
                "coefficient length {} does not match basis size {}",
                c.len(),
                self.m
            )));
        }
        Ok(self.eval(t)? * c)
    }
}

/// Unit-norm shifted Legendre polynomials of orders 1 and 2 on [0, 1].
pub fn legendre_pair(t: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(bad) = t.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::invalid(format!("point {bad} outside [0, 1]")));
    }
    let p1 = t.iter().map(|&x| 3f64.sqrt() * (2.0 * x - 1.0)).collect();
    let p2 = t
        .iter()
        .map(|&x| 5f64.sqrt() * (6.0 * x * x - 6.0 * x + 1.0))
        .collect();
    Ok((p1, p2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{eigen_range, trapezoid};

    fn grid(n: usize) -> Vec<f64> {
        (0..n).map(|j| j as f64 / (n - 1) as f64).collect()
    }

    // Closed-form second derivatives, written independently of `value`.
    fn second_derivative(i: usize, t: f64) -> f64 {
        if i == 0 {
            return 0.0;
        }
        let j = i.div_ceil(2) as f64;
        let w = 2.0 * PI * j;
        if i % 2 == 1 {
            -w * w * SQRT_2 * (w * t).cos()
        } else {
            -w * w * SQRT_2 * (w * t).sin()
        }
    }

    #[test]
    fn zero_size_is_rejected() {
        assert!(matches!(fourier_basis(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constant_basis() {
        let b = fourier_basis(1).unwrap();
        assert_eq!(b.w()[(0, 0)], 0.0);
        assert_eq!(b.psi()[(0, 0)], 1.0);
    }

    #[test]
    fn penalty_for_five_functions() {
        let b = fourier_basis(5).unwrap();
        let s = 16.0 * PI.powi(4);
        let expected = [0.0, s, s, 16.0 * s, 16.0 * s];
        for i in 0..5 {
            assert_eq!(b.w()[(i, i)], expected[i]);
            for k in 0..5 {
                if k != i {
                    assert_eq!(b.w()[(i, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn gram_matches_quadrature() {
        let b = fourier_basis(3).unwrap();
        let t = grid(10_000);
        let phi = b.eval(&t).unwrap();
        for i in 0..3 {
            for k in 0..3 {
                let prod: Vec<f64> = (0..t.len()).map(|j| phi[(j, i)] * phi[(j, k)]).collect();
                let q = trapezoid(&prod);
                let e = if i == k { 1.0 } else { 0.0 };
                assert!((q - e).abs() < 1e-8, "({i},{k}): {q}");
            }
        }
    }

    #[test]
    fn penalty_matches_quadrature() {
        let m = 9;
        let b = fourier_basis(m).unwrap();
        let t = grid(10_000);
        for i in 0..m {
            for k in 0..m {
                let prod: Vec<f64> = t
                    .iter()
                    .map(|&x| second_derivative(i, x) * second_derivative(k, x))
                    .collect();
                let q = trapezoid(&prod);
                let exact = b.w()[(i, k)];
                let scale = exact.abs().max(1.0);
                assert!((q - exact).abs() <= 1e-6 * scale, "({i},{k}): {q} vs {exact}");
            }
        }
    }

    #[test]
    fn eval_known_rows() {
        let b = fourier_basis(3).unwrap();
        let r = b.eval(&[0.0, 0.25]).unwrap();
        assert_eq!(r[(0, 0)], 1.0);
        assert!((r[(0, 1)] - SQRT_2).abs() < 1e-15);
        assert!(r[(0, 2)].abs() < 1e-15);
        assert!((r[(1, 0)] - 1.0).abs() < 1e-15);
        assert!(r[(1, 1)].abs() < 1e-15);
        assert!((r[(1, 2)] - SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn eval_rejects_out_of_range() {
        let b = fourier_basis(3).unwrap();
        assert!(b.eval(&[0.5, 1.01]).is_err());
        assert!(b.eval(&[-1e-9]).is_err());
    }

    #[test]
    fn discrete_gram_on_even_grid() {
        // Both endpoints sample the same periodic point, so the discrete Gram
        // is (J - 1) I plus the rank-one term phi(0) phi(0)'.
        let j = 50;
        let m = default_m(j).unwrap();
        assert_eq!(m, 49);
        let b = fourier_basis(m).unwrap();
        let phi = b.eval(&grid(j)).unwrap();
        let gram = phi.transpose() * &phi;
        let v = b.eval(&[0.0]).unwrap().row(0).transpose();
        let expected = DMatrix::identity(m, m) * (j - 1) as f64 + &v * v.transpose();
        let dev = (&gram - &expected).amax();
        assert!(dev < 1e-9, "max deviation {dev}");
        // deviation of Phi'Phi/J from identity, for the record: the cosine
        // diagonal sits at (J + 1)/J
        let scaled = gram / j as f64;
        assert!((scaled[(1, 1)] - 51.0 / 50.0).abs() < 1e-12);
        assert!((scaled[(2, 2)] - 49.0 / 50.0).abs() < 1e-12);
    }

    #[test]
    fn default_m_values() {
        assert_eq!(default_m(50).unwrap(), 49);
        assert_eq!(default_m(2).unwrap(), 1);
        assert_eq!(default_m(51).unwrap(), 51);
        assert!(default_m(1).is_err());
    }

    #[test]
    fn penalty_rank_is_m_minus_one() {
        for m in [2, 3, 8, 21] {
            let b = fourier_basis(m).unwrap();
            let zeros = b.w().diagonal().iter().filter(|v| **v == 0.0).count();
            assert_eq!(zeros, 1);
            let (lo, _) = eigen_range(b.w());
            assert!(lo >= 0.0);
        }
    }

    #[test]
    fn legendre_values() {
        let (p1, p2) = legendre_pair(&[0.5, 0.0]).unwrap();
        assert!(p1[0].abs() < 1e-15);
        assert!((p2[0] + 5f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((p1[1] + 3f64.sqrt()).abs() < 1e-15);
        assert!((p2[1] - 5f64.sqrt()).abs() < 1e-15);
        assert!(legendre_pair(&[1.5]).is_err());
    }

    #[test]
    fn legendre_orthonormal() {
        let t = grid(100_001);
        let (p1, p2) = legendre_pair(&t).unwrap();
        let ip = |a: &[f64], b: &[f64]| {
            trapezoid(&a.iter().zip(b).map(|(x, y)| x * y).collect::<Vec<_>>())
        };
        assert!((ip(&p1, &p1) - 1.0).abs() < 1e-8);
        assert!((ip(&p2, &p2) - 1.0).abs() < 1e-8);
        assert!(ip(&p1, &p2).abs() < 1e-8);
    }
}
