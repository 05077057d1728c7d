//! Closed-form quantities over diagonal Gaussians.
//!
//! Conventions: `cross_entropy(q, p)` is the expected log-density
//! `E_{z~q}[log p(z)]` (a negative number for most inputs), so
//! `cross_entropy(q, p) = -entropy(q) - kl_diag(q, p)`.
//!
//! The repulsive term of the factorized objective,
//! `Γ = E_{q2}[log p2] - E_{q1}[log p1]`, splits into a mismatch
//! `Λ = KL(q2‖p1) - KL(q2‖p2)` and a discrepancy
//! `Δ = E_{q2}[log p1] - E_{q1}[log p1]`. With `p1 = N(0, I)`, `|Δ|` is
//! bounded by `½·W₂² + sqrt(Σ μ₁ⱼ² + σ₁ⱼ²)·W₂` where `W₂ = W₂(q1, q2)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaussianError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("mean and log-variance lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("a diagonal Gaussian needs at least one dimension")]
    Empty,
    #[error("non-finite parameter at index {0}")]
    NonFinite(usize),
    #[error("Lipschitz constant must be finite and non-negative, got {0}")]
    BadLipschitz(f64),
}

pub type Result<T> = std::result::Result<T, GaussianError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mu.len() != log_var.len() {
            return Err(GaussianError::LengthMismatch(mu.len(), log_var.len()));
        }
        if mu.is_empty() {
            return Err(GaussianError::Empty);
        }
        if let Some(i) = mu.iter().chain(&log_var).position(|v| !v.is_finite()) {
            return Err(GaussianError::NonFinite(i % mu.len()));
        }
        Ok(Self { mu, log_var })
    }

    /// From means and standard deviations (all σ > 0).
    pub fn from_std(mu: Vec<f64>, std: &[f64]) -> Result<Self> {
        let log_var = std.iter().map(|s| 2.0 * s.ln()).collect();
        Self::new(mu, log_var)
    }

    /// `N(center·1, I)` in `dim` dimensions.
    pub fn isotropic(center: f64, dim: usize) -> Result<Self> {
        Self::new(vec![center; dim], vec![0.0; dim])
    }

    pub fn standard(dim: usize) -> Result<Self> {
        Self::isotropic(0.0, dim)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn var(&self, j: usize) -> f64 {
        self.log_var[j].exp()
    }

    pub fn std(&self, j: usize) -> f64 {
        (0.5 * self.log_var[j]).exp()
    }

    /// Differential entropy `½ Σ (ln 2π + 1 + log σⱼ²)`.
    pub fn entropy(&self) -> f64 {
        0.5 * self.log_var.iter().map(|lv| (2.0 * PI).ln() + 1.0 + lv).sum::<f64>()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        debug_assert_eq!(z.len(), self.dim());
        -0.5 * z
            .iter()
            .enumerate()
            .map(|(j, &zj)| (2.0 * PI).ln() + self.log_var[j] + (zj - self.mu[j]).powi(2) / self.var(j))
            .sum::<f64>()
    }
}

fn same_dim(a: &DiagGaussian, b: &DiagGaussian) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(GaussianError::DimensionMismatch(a.dim(), b.dim()));
    }
    Ok(())
}

/// `KL(q ‖ p)`.
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    same_dim(q, p)?;
    let sum: f64 = (0..q.dim())
        .map(|j| {
            let vp = p.var(j);
            q.var(j) / vp + (q.mu[j] - p.mu[j]).powi(2) / vp - 1.0 + p.log_var[j] - q.log_var[j]
        })
        .sum();
    Ok(0.5 * sum)
}

/// `E_{z~q}[log p(z)]`.
pub fn cross_entropy(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    same_dim(q, p)?;
    let sum: f64 = (0..q.dim())
        .map(|j| {
            let vp = p.var(j);
            (2.0 * PI).ln() + p.log_var[j] + (q.var(j) + (q.mu[j] - p.mu[j]).powi(2)) / vp
        })
        .sum();
    Ok(-0.5 * sum)
}

/// Mismatch `Λ = KL(q2‖p1) − KL(q2‖p2)`.
pub fn lambda_mismatch(q2: &DiagGaussian, p1: &DiagGaussian, p2: &DiagGaussian) -> Result<f64> {
    same_dim(q2, p1)?;
    same_dim(q2, p2)?;
    Ok(kl_diag(q2, p1)? - kl_diag(q2, p2)?)
}

/// Discrepancy `Δ = E_{q2}[log p1] − E_{q1}[log p1]`.
pub fn delta_discrepancy(q1: &DiagGaussian, q2: &DiagGaussian, p1: &DiagGaussian) -> Result<f64> {
    same_dim(q1, q2)?;
    same_dim(q1, p1)?;
    Ok(cross_entropy(q2, p1)? - cross_entropy(q1, p1)?)
}

/// `W₂(q1, q2)` for diagonal covariances.
pub fn wasserstein2_diag(q1: &DiagGaussian, q2: &DiagGaussian) -> Result<f64> {
    same_dim(q1, q2)?;
    let sq: f64 = (0..q1.dim())
        .map(|j| (q1.mu[j] - q2.mu[j]).powi(2) + (q1.std(j) - q2.std(j)).powi(2))
        .sum();
    Ok(sq.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBound {
    pub abs_delta: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `|Δ| ≤ (L/2)·W₂² + sqrt(Σ μ₁ⱼ² + σ₁ⱼ²)·W₂` with `p1 = N(0, I)`.
///
/// The bound is guaranteed for `L ≥ 1`, the Hessian norm of a standard
/// normal log-density.
pub fn delta_bound_check(q1: &DiagGaussian, q2: &DiagGaussian, lipschitz: f64) -> Result<DeltaBound> {
    same_dim(q1, q2)?;
    if !(lipschitz.is_finite() && lipschitz >= 0.0) {
        return Err(GaussianError::BadLipschitz(lipschitz));
    }
    let p1 = DiagGaussian::standard(q1.dim())?;
    let abs_delta = delta_discrepancy(q1, q2, &p1)?.abs();
    let w2 = wasserstein2_diag(q1, q2)?;
    let second_moment: f64 = (0..q1.dim()).map(|j| q1.mu[j].powi(2) + q1.var(j)).sum();
    let bound = 0.5 * lipschitz * w2 * w2 + second_moment.sqrt() * w2;
    Ok(DeltaBound {
        abs_delta,
        bound,
        holds: abs_delta <= bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub lambda_mismatch: f64,
    pub delta_discrepancy: f64,
    pub gamma: f64,
    pub w2: f64,
    pub bound: f64,
    pub bound_holds: bool,
}

/// `Γ = E_{q2}[log p2] − E_{q1}[log p1]` with its decomposition.
///
/// For a general diagonal `p1` the bound uses `L = max_j 1/σ_{p1,j}²` and
/// `E_{q1}‖∇log p1‖² = Σ ((μ_{q1,j} − μ_{p1,j})² + σ_{q1,j}²)/σ_{p1,j}⁴`,
/// which reduces to the standard-normal form when `p1 = N(0, I)`.
pub fn gamma(q1: &DiagGaussian, q2: &DiagGaussian, p1: &DiagGaussian, p2: &DiagGaussian) -> Result<GammaReport> {
    same_dim(q1, q2)?;
    same_dim(q1, p1)?;
    same_dim(q1, p2)?;
    let gamma = cross_entropy(q2, p2)? - cross_entropy(q1, p1)?;
    let lambda = lambda_mismatch(q2, p1, p2)?;
    let delta = delta_discrepancy(q1, q2, p1)?;
    let w2 = wasserstein2_diag(q1, q2)?;

    let lipschitz = (0..p1.dim()).map(|j| 1.0 / p1.var(j)).fold(0.0, f64::max);
    let grad_moment: f64 = (0..q1.dim())
        .map(|j| ((q1.mu[j] - p1.mu[j]).powi(2) + q1.var(j)) / p1.var(j).powi(2))
        .sum();
    let bound = 0.5 * lipschitz * w2 * w2 + grad_moment.sqrt() * w2;
    Ok(GammaReport {
        lambda_mismatch: lambda,
        delta_discrepancy: delta,
        gamma,
        w2,
        bound,
        bound_holds: delta.abs() <= bound,
    })
}
