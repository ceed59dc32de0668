//! Symmetric eigendecomposition and PSD matrix square root.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max |A - A^T| = {0:e})")]
    Asymmetric(f64),
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("jacobi iteration did not converge after {0} sweeps")]
    NoConvergence(usize),
}

/// Absolute symmetry tolerance before scaling by the matrix magnitude.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Above this dimension the decomposition is delegated to nalgebra's
/// implicit QR solver; cyclic Jacobi is O(d^3) per sweep.
pub const JACOBI_MAX_DIM: usize = 128;
const MAX_SWEEPS: usize = 100;

#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    /// Column `i` is the eigenvector of `values[i]`.
    pub vectors: DMatrix<f64>,
}

fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in i + 1..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn check_input(a: &DMatrix<f64>) -> Result<(), LinalgError> {
    if a.nrows() != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let asym = asymmetry(a);
    if asym > SYMMETRY_TOL * max_abs(a).max(1.0) {
        return Err(LinalgError::Asymmetric(asym));
    }
    Ok(())
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<SymEigen, LinalgError> {
    check_input(a)?;
    let n = a.nrows();
    let mut m = symmetrize(a);
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.norm();
    if scale == 0.0 {
        return Ok(SymEigen {
            values: DVector::zeros(n),
            vectors: v,
        });
    }
    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * scale {
            return Ok(SymEigen {
                values: m.diagonal(),
                vectors: v,
            });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // M <- J^T M J, applied to rows then columns p and q.
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(LinalgError::NoConvergence(MAX_SWEEPS))
}

pub fn symmetric_eigen(a: &DMatrix<f64>) -> Result<SymEigen, LinalgError> {
    if a.nrows() <= JACOBI_MAX_DIM {
        return jacobi_eigen(a);
    }
    check_input(a)?;
    let e = nalgebra::SymmetricEigen::new(symmetrize(a));
    Ok(SymEigen {
        values: e.eigenvalues,
        vectors: e.eigenvectors,
    })
}

/// Principal square root of a symmetric PSD matrix, `Q sqrt(max(L, 0)) Q^T`.
///
/// Eigenvalues below `-1e-8 * max(|lambda|_max, 1) * d` mean the input is not
/// PSD and are an error. Eigenvalues within `d * eps * |lambda|_max` of zero are
/// treated as exactly zero so rounding noise in a null space does not turn
/// into `sqrt(noise)`.
pub fn sqrtm_psd(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    let e = symmetric_eigen(a)?;
    let lmax = e.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = -1e-8 * lmax.max(1.0) * n as f64;
    if let Some(&bad) = e.values.iter().find(|&&l| l < floor) {
        return Err(LinalgError::NotPsd(bad));
    }
    let noise = n as f64 * f64::EPSILON * lmax;
    let roots = e.values.map(|l| if l <= noise { 0.0 } else { l.sqrt() });
    let q = &e.vectors;
    let s = q * DMatrix::from_diagonal(&roots) * q.transpose();
    Ok(symmetrize(&s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &b * b.transpose()
    }

    fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn closed_form_roots() {
        let s = sqrtm_psd(&(DMatrix::identity(3, 3) * 4.0)).unwrap();
        assert!(rel_err(&s, &(DMatrix::identity(3, 3) * 2.0)) < 1e-15);
        let s = sqrtm_psd(&DMatrix::from_diagonal(&DVector::from_vec(vec![9.0, 0.0]))).unwrap();
        assert_eq!(s, DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 0.0])));
    }

    #[test]
    fn jacobi_agrees_with_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [1, 2, 5, 17] {
            let a = random_spd(n, &mut rng);
            let mut ours: Vec<f64> = jacobi_eigen(&a).unwrap().values.iter().copied().collect();
            let mut reference: Vec<f64> = nalgebra::SymmetricEigen::new(a.clone()).eigenvalues.iter().copied().collect();
            ours.sort_by(f64::total_cmp);
            reference.sort_by(f64::total_cmp);
            for (x, y) in ours.iter().zip(&reference) {
                assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{n}: {x} vs {y}");
            }
            let e = jacobi_eigen(&a).unwrap();
            let rebuilt = &e.vectors * DMatrix::from_diagonal(&e.values) * e.vectors.transpose();
            assert!(rel_err(&rebuilt, &a) < 1e-12);
        }
    }

    #[test]
    fn squares_back_to_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 8, 32] {
            let a = random_spd(n, &mut rng);
            let s = sqrtm_psd(&a).unwrap();
            assert!(rel_err(&(&s * &s), &a) <= 1e-8);
            assert!(asymmetry(&s) == 0.0);
        }
    }

    #[test]
    fn large_inputs_use_the_fallback_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(JACOBI_MAX_DIM + 2, &mut rng);
        let s = sqrtm_psd(&a).unwrap();
        assert!(rel_err(&(&s * &s), &a) <= 1e-8);
    }

    #[test]
    fn rejects_bad_input() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sqrtm_psd(&asym), Err(LinalgError::Asymmetric(_))));
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sqrtm_psd(&neg), Err(LinalgError::NotPsd(_))));
        let rect = DMatrix::<f64>::zeros(2, 3);
        assert!(matches!(sqrtm_psd(&rect), Err(LinalgError::NotSquare { .. })));
        let nan = DMatrix::from_row_slice(1, 1, &[f64::NAN]);
        assert_eq!(sqrtm_psd(&nan), Err(LinalgError::NonFinite));
        // Rounding-level negativity is clamped, not rejected.
        let tiny = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-12]);
        assert_eq!(sqrtm_psd(&tiny).unwrap()[(1, 1)], 0.0);
    }

    #[test]
    fn symmetry_tolerance_scales_with_magnitude() {
        let a = DMatrix::from_row_slice(2, 2, &[1e6, 1e-4, 0.0, 1e6]);
        assert!(sqrtm_psd(&a).is_ok());
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 1e-8, 0.0, 1.0]);
        assert!(sqrtm_psd(&b).is_err());
    }
}
