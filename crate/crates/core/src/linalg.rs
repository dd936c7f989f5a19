//! Gram matrices and symmetric eigenvalue routines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Tolerance used when checking that an input to [`sym_eigvals`] is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

const JACOBI_OFF_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// `S·Sᵀ` for an r×d factor `S`: an r×r symmetric positive semidefinite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramMatrix {
    order: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    pub fn from_factor(s: &Tensor) -> Self {
        let (r, d) = s.shape();
        let mut out = vec![0.0; r * r];
        gemm(r, d, r, (s.data(), false), (s.data(), true), &mut out, false);
        for i in 0..r {
            for j in 0..i {
                out[i * r + j] = out[j * r + i];
            }
        }
        Self { order: r, values: out }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_raw(self.order, self.order, self.values.clone())
    }

    /// Largest `|G_ij - G_ji|`.
    pub fn asymmetry(&self) -> f64 {
        max_asymmetry(self.order, &self.values)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        jacobi_eigvals(self.order, self.values.clone())
    }
}

/// Gram matrix of `s`; `s` is r×d with r ≤ d.
pub fn gram(s: &Tensor) -> Result<GramMatrix> {
    if s.rows() > s.cols() {
        return Err(Error::Contract(format!(
            "gram factor must be r×d with r ≤ d, got {:?}",
            s.shape()
        )));
    }
    Ok(GramMatrix::from_factor(s))
}

fn max_asymmetry(n: usize, a: &[f64]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst
}

/// Eigenvalues of a symmetric matrix in descending order (cyclic Jacobi).
pub fn sym_eigvals(m: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = m.shape();
    if r != c {
        return Err(Error::Contract(format!("eigenvalues need a square matrix, got {r}x{c}")));
    }
    let asym = max_asymmetry(r, m.data());
    if asym > SYMMETRY_TOL {
        return Err(Error::Contract(format!("matrix is not symmetric (max asymmetry {asym:e})")));
    }
    Ok(jacobi_eigvals(r, m.data().to_vec()))
}

fn off_diagonal_norm(n: usize, a: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += a[i * n + j] * a[i * n + j];
            }
        }
    }
    total.sqrt()
}

fn jacobi_eigvals(n: usize, mut a: Vec<f64>) -> Vec<f64> {
    // The threshold scales with the matrix norm so large-magnitude inputs
    // still terminate on convergence rather than on the sweep cap.
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_diagonal_norm(n, &a) < JACOBI_OFF_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// Singular values in descending order, via the eigenvalues of `mᵀm`.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut mtm = vec![0.0; c * c];
    gemm(c, r, c, (m.data(), true), (m.data(), false), &mut mtm, false);
    for i in 0..c {
        for j in 0..i {
            mtm[i * c + j] = mtm[j * c + i];
        }
    }
    let mut sv: Vec<f64> = jacobi_eigvals(c, mtm).into_iter().map(|v| v.max(0.0).sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_examples() {
        assert_eq!(gram(&Tensor::identity(2)).unwrap().to_tensor(), Tensor::identity(2));
        assert_eq!(gram(&Tensor::zeros(2, 5)).unwrap().to_tensor(), Tensor::zeros(2, 2));
        let s = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(
            gram(&s).unwrap().to_tensor(),
            Tensor::from_rows(&[&[5.0, 11.0], &[11.0, 25.0]]).unwrap()
        );
        assert!(gram(&Tensor::zeros(3, 2)).is_err());
    }

    #[test]
    fn eigen_examples() {
        assert_eq!(sym_eigvals(&Tensor::diag(&[1.0, 3.0])).unwrap(), vec![3.0, 1.0]);
        let m = Tensor::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]).unwrap();
        let e = sym_eigvals(&m).unwrap();
        assert!((e[0] - 3.0).abs() < 1e-14 && (e[1] - 1.0).abs() < 1e-14);
        assert_eq!(sym_eigvals(&Tensor::zeros(3, 3)).unwrap(), vec![0.0; 3]);
        let asym = Tensor::from_rows(&[&[1.0, 2.0], &[0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eigvals(&asym), Err(Error::Contract(_))));
        assert!(sym_eigvals(&Tensor::zeros(2, 3)).is_err());
    }

    #[test]
    fn singular_value_examples() {
        assert_eq!(singular_values(&Tensor::diag(&[2.0, 3.0])), vec![3.0, 2.0]);
        let m = Tensor::from_rows(&[&[0.0, 1.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(singular_values(&m), vec![1.0, 0.0]);
        assert_eq!(singular_values(&Tensor::zeros(2, 4)), vec![0.0; 4]);
    }
}
