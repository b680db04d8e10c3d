//! Cholesky factorization with a diagonal-jitter fallback, and multivariate
//! normal log densities built on it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::special::LN_SQRT_2PI;

/// Lower Cholesky factor `L` of a symmetric positive-definite matrix together
/// with `ln det(LLᵀ)`.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    log_det: f64,
}

impl CholeskyFactor {
    /// Factor `m`; on failure retry once with `1e-10 · trace/K` added to the
    /// diagonal.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Numeric(format!(
                "cannot factor a {}x{} matrix",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("covariance has non-finite entries".into()));
        }
        let chol = match m.clone().cholesky() {
            Some(c) => c,
            None => {
                let k = m.nrows();
                let jitter = 1e-10 * m.trace() / k as f64;
                let mut j = m.clone();
                for i in 0..k {
                    j[(i, i)] += jitter;
                }
                j.cholesky().ok_or_else(|| {
                    Error::Numeric("covariance is not positive definite even after jitter".into())
                })?
            }
        };
        let l = chol.unpack();
        let log_det = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { l, log_det })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `rᵀ (LLᵀ)⁻¹ r` by forward substitution.
    pub fn mahalanobis(&self, r: &[f64]) -> f64 {
        let k = self.dim();
        debug_assert_eq!(r.len(), k);
        let mut z = [0.0_f64; 64];
        let mut heap;
        let z: &mut [f64] = if k <= z.len() {
            &mut z[..k]
        } else {
            heap = vec![0.0; k];
            &mut heap
        };
        let mut acc = 0.0;
        for i in 0..k {
            let mut s = r[i];
            for (j, zj) in z[..i].iter().enumerate() {
                s -= self.l[(i, j)] * zj;
            }
            z[i] = s / self.l[(i, i)];
            acc += z[i] * z[i];
        }
        acc
    }

    /// Log density of `N(mean, LLᵀ)` at `x`.
    pub fn mvn_ln_pdf(&self, x: &[f64], mean: &[f64]) -> f64 {
        let r: Vec<f64> = x.iter().zip(mean).map(|(a, b)| a - b).collect();
        self.mvn_ln_pdf_resid(&r)
    }

    /// Log density of `N(0, LLᵀ)` at the residual `r`.
    pub fn mvn_ln_pdf_resid(&self, r: &[f64]) -> f64 {
        -(self.dim() as f64) * LN_SQRT_2PI - 0.5 * self.log_det - 0.5 * self.mahalanobis(r)
    }
}

/// Multivariate normal log density, factoring `cov` on every call.
pub fn mvn_ln_pdf(x: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<f64> {
    if x.len() != mean.len() || x.len() != cov.nrows() {
        return Err(Error::Precondition(format!(
            "dimension mismatch: x {}, mean {}, cov {}",
            x.len(),
            mean.len(),
            cov.nrows()
        )));
    }
    Ok(CholeskyFactor::new(cov)?.mvn_ln_pdf(x, mean))
}

/// `L · z` for a lower-triangular `L`; used to draw correlated normals.
pub fn lower_mul(l: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    let v = l * DVector::from_column_slice(z);
    v.iter().copied().collect()
}
