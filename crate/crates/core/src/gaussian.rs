//! Information-form multivariate Gaussians.
//!
//! All beliefs and messages in the propagation engine are Gaussians stored as an
//! information vector `η = Λμ` and a precision matrix `Λ = Σ⁻¹`. Products of
//! densities — the hot path of belief propagation — are then plain additions.
//! Values are immutable once constructed and safe to share across threads.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Condition-number ceiling above which a precision matrix is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("precision matrix not invertible (condition number {cond:.3e})")]
    NonInvertible { cond: f64 },
    #[error("keep set empty or out of range for dimension {dim}")]
    BadKeepSet { dim: usize },
}

/// Multivariate Gaussian in information form.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoGaussian {
    eta: DVector<f64>,
    lambda: DMatrix<f64>,
}

impl InfoGaussian {
    /// Builds from information vector and precision matrix.
    /// The precision matrix is symmetrized on construction to contain drift.
    pub fn new(eta: DVector<f64>, lambda: DMatrix<f64>) -> Self {
        assert_eq!(eta.len(), lambda.nrows(), "eta/lambda size mismatch");
        assert_eq!(lambda.nrows(), lambda.ncols(), "lambda must be square");
        let mut sym = lambda;
        symmetrize(&mut sym);
        Self { eta, lambda: sym }
    }

    /// The zero-information message: contributes nothing to any product.
    pub fn vacuous(dim: usize) -> Self {
        Self {
            eta: DVector::zeros(dim),
            lambda: DMatrix::zeros(dim, dim),
        }
    }

    pub fn is_vacuous(&self) -> bool {
        self.eta.iter().all(|v| *v == 0.0) && self.lambda.iter().all(|v| *v == 0.0)
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    pub fn eta(&self) -> &DVector<f64> {
        &self.eta
    }

    pub fn lambda(&self) -> &DMatrix<f64> {
        &self.lambda
    }

    /// Builds from moments (mean, covariance). Covariance must be invertible.
    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Self, GaussianError> {
        if mean.len() != cov.nrows() || cov.nrows() != cov.ncols() {
            return Err(GaussianError::DimensionMismatch {
                left: mean.len(),
                right: cov.nrows(),
            });
        }
        let chol = cov
            .clone()
            .cholesky()
            .ok_or(GaussianError::NonInvertible { cond: f64::INFINITY })?;
        let lambda = chol.inverse();
        let eta = &lambda * mean;
        Ok(Self::new(eta, lambda))
    }

    /// Density product: information adds. Commutative and associative.
    pub fn product(&self, other: &Self) -> Result<Self, GaussianError> {
        if self.dim() != other.dim() {
            return Err(GaussianError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(Self {
            eta: &self.eta + &other.eta,
            lambda: &self.lambda + &other.lambda,
        })
    }

    /// Removes one message from a product of messages (cavity construction).
    pub fn minus(&self, other: &Self) -> Result<Self, GaussianError> {
        if self.dim() != other.dim() {
            return Err(GaussianError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(Self {
            eta: &self.eta - &other.eta,
            lambda: &self.lambda - &other.lambda,
        })
    }

    /// Accumulates another message in place (product without reallocation).
    pub fn accumulate(&mut self, other: &Self) {
        debug_assert_eq!(self.dim(), other.dim());
        self.eta += &other.eta;
        self.lambda += &other.lambda;
    }

    /// Convex blend `(1−β)·self + β·old`, used for message damping.
    pub fn blend(&self, old: &Self, beta: f64) -> Self {
        debug_assert_eq!(self.dim(), old.dim());
        Self {
            eta: &self.eta * (1.0 - beta) + &old.eta * beta,
            lambda: &self.lambda * (1.0 - beta) + &old.lambda * beta,
        }
    }

    /// Converts to moments form: mean solves Λμ = η, covariance is Λ⁻¹.
    /// Rejects precision matrices with condition number above [`MAX_CONDITION`].
    pub fn to_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>), GaussianError> {
        let cond = condition_number(&self.lambda);
        if !cond.is_finite() || cond > MAX_CONDITION {
            return Err(GaussianError::NonInvertible { cond });
        }
        let chol = self
            .lambda
            .clone()
            .cholesky()
            .ok_or(GaussianError::NonInvertible { cond })?;
        let mean = chol.solve(&self.eta);
        let cov = chol.inverse();
        Ok((mean, cov))
    }

    /// Mean only, via Cholesky. `None` when the precision is not positive definite.
    /// This is the engine's fast path; the strict conditioning contract lives in
    /// [`Self::to_moments`].
    pub fn mean(&self) -> Option<DVector<f64>> {
        self.lambda.clone().cholesky().map(|c| c.solve(&self.eta))
    }

    /// Mean, but only when every direction of the state is genuinely
    /// constrained: the smallest eigenvalue of the precision must reach
    /// `tol`. A rank-deficient precision can still pass a float Cholesky on
    /// noise-level pivots and "solve" to an arbitrary point along the
    /// unconstrained directions.
    pub fn mean_if_determined(&self, tol: f64) -> Option<DVector<f64>> {
        if self.lambda.symmetric_eigenvalues().min() < tol {
            return None;
        }
        self.mean().filter(|m| m.iter().all(|v| v.is_finite()))
    }

    /// Marginalizes onto `keep` (Schur complement over the dropped block):
    /// `(η_a − Λ_ab Λ_bb⁻¹ η_b, Λ_aa − Λ_ab Λ_bb⁻¹ Λ_ba)`.
    pub fn marginalize(&self, keep: &[usize]) -> Result<Self, GaussianError> {
        let d = self.dim();
        if keep.is_empty() || keep.iter().any(|&i| i >= d) {
            return Err(GaussianError::BadKeepSet { dim: d });
        }
        let mut is_kept = vec![false; d];
        for &i in keep {
            is_kept[i] = true;
        }
        let drop: Vec<usize> = (0..d).filter(|&i| !is_kept[i]).collect();
        if drop.is_empty() {
            return Ok(self.clone());
        }

        let eta_a = self.eta.select_rows(keep.iter());
        let eta_b = self.eta.select_rows(drop.iter());
        let l_aa = self.lambda.select_rows(keep.iter()).select_columns(keep.iter());
        let l_ab = self.lambda.select_rows(keep.iter()).select_columns(drop.iter());
        let l_bb = self.lambda.select_rows(drop.iter()).select_columns(drop.iter());

        let chol = l_bb.cholesky().ok_or_else(|| GaussianError::NonInvertible {
            cond: f64::INFINITY,
        })?;
        // Λ_bb⁻¹ Λ_ba and Λ_bb⁻¹ η_b in one factorization.
        let solved_ba = chol.solve(&l_ab.transpose());
        let solved_b = chol.solve(&eta_b);

        let eta = eta_a - &l_ab * solved_b;
        let lambda = l_aa - &l_ab * solved_ba;
        Ok(Self::new(eta, lambda))
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Condition number from the singular value spectrum. Zero matrices map to +∞.
fn condition_number(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
