//! Symmetric eigendecomposition by cyclic Jacobi rotations, and the PSD
//! matrix square root built on it.

use super::{NumericsError, Tensor};

const MAX_SWEEPS: usize = 100;

/// Eigenvalues and column eigenvectors of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    /// Row-major `d x d`; column `j` is the eigenvector of `values[j]`.
    pub vectors: Vec<f64>,
    pub dim: usize,
}

/// Cyclic Jacobi eigensolver. The input is symmetrized as `(A + A^T) / 2`.
pub fn sym_eigen(a: &Tensor) -> Result<SymEigen, NumericsError> {
    let (n, m) = a.dims2("sym_eigen")?;
    if n != m {
        return Err(NumericsError::shape("sym_eigen", format!("[{n},{m}] is not square")));
    }
    let src = a.data();
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (src[i * n + j] + src[j * n + i]);
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return Ok(SymEigen { values: vec![0.0; n], vectors: v, dim: n });
    }
    let tol = 1e-15 * scale;
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| w[i * n + j] * w[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= tol {
            let values = (0..n).map(|i| w[i * n + i]).collect();
            return Ok(SymEigen { values, vectors: v, dim: n });
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = w[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (w[q * n + q] - w[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(NumericsError::NoConvergence { sweeps: MAX_SWEEPS })
}

impl SymEigen {
    /// `V f(diag) V^T`.
    pub fn reconstruct(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let n = self.dim;
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = (0..n)
                    .map(|k| self.vectors[i * n + k] * fv[k] * self.vectors[j * n + k])
                    .sum();
            }
        }
        Tensor::from_parts(vec![n, n], out)
    }
}

/// Square root of a symmetric positive semi-definite matrix. Negative
/// eigenvalues (round-off on PSD inputs) are clamped to zero.
pub fn sym_sqrt(a: &Tensor) -> Result<Tensor, NumericsError> {
    Ok(sym_eigen(a)?.reconstruct(|l| l.max(0.0).sqrt()))
}

pub fn trace(a: &Tensor) -> f64 {
    let n = a.shape()[0];
    (0..n).map(|i| a.data()[i * n + i]).sum()
}
