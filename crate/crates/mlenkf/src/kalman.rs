//! Exact Kalman filter for linear-Gaussian signal models.
//!
//! For Ψ(u) = A u + ξ with ξ ~ N(0, Σ) and observations y = H u + η,
//! the filtering distribution stays Gaussian and its moments obey the
//! classical predict/update recursion. This is the computable gold
//! standard the ensemble filters are measured against.

use crate::error::{Error, Result};
use crate::harness::{FilterTrace, Method, TraceEpoch};
use crate::linalg::{spd_solve, Matrix, SymMatrix};
use crate::models::ObservationModel;

/// Mean and covariance of a Gaussian state estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMoments {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
}

impl GaussianMoments {
    pub fn new(mean: Vec<f64>, cov: SymMatrix) -> Self {
        assert_eq!(mean.len(), cov.dim(), "mean/covariance dimension mismatch");
        GaussianMoments { mean, cov }
    }

    /// Point mass at `mean`.
    pub fn deterministic(mean: Vec<f64>) -> Self {
        let d = mean.len();
        GaussianMoments {
            mean,
            cov: SymMatrix::zeros(d),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Linear-Gaussian signal dynamics u' = A u + ξ, ξ ~ N(0, Σ).
#[derive(Debug, Clone)]
pub struct LinearSignal {
    pub a: Matrix,
    pub sigma: SymMatrix,
}

impl LinearSignal {
    pub fn new(a: Matrix, sigma: SymMatrix) -> Result<Self> {
        if a.rows() != a.cols() || a.rows() != sigma.dim() {
            return Err(Error::invalid("A and Σ dimensions must agree"));
        }
        Ok(LinearSignal { a, sigma })
    }

    pub fn scalar(a: f64, sigma: f64) -> Self {
        LinearSignal {
            a: Matrix::scalar(a),
            sigma: SymMatrix::scalar(sigma),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }
}

/// Prediction step: mean ← A·mean, cov ← A·cov·Aᵀ + Σ.
pub fn kf_predict(m: &GaussianMoments, sig: &LinearSignal) -> Result<GaussianMoments> {
    if m.dim() != sig.dim() {
        return Err(Error::invalid("moment/signal dimension mismatch"));
    }
    let mean = sig.a.mul_vec(&m.mean);
    let acat = sig.a.matmul(&m.cov.to_matrix()).matmul(&sig.a.transpose());
    let cov = SymMatrix::from_average(&acat).add(&sig.sigma);
    Ok(GaussianMoments { mean, cov })
}

/// Kalman gain for a predicted covariance: K = C Hᵀ (H C Hᵀ + Γ)⁻¹.
pub fn kalman_gain(cov: &SymMatrix, obs: &ObservationModel) -> Result<Matrix> {
    let hc = obs.h().matmul(&cov.to_matrix());
    let s = SymMatrix::from_average(&hc.matmul(&obs.h().transpose())).add(obs.gamma());
    // K = C Hᵀ S⁻¹ = (S⁻¹ H C)ᵀ because C and S are symmetric.
    Ok(spd_solve(&s, &hc)?.transpose())
}

/// Update step. Returns the corrected moments and the Kalman gain.
///
/// The mean is corrected in innovation form m̂ + K(y − Hm̂); the
/// covariance uses (I − KH)Ĉ and is symmetrized to suppress
/// floating-point drift.
pub fn kf_update(
    m: &GaussianMoments,
    obs: &ObservationModel,
    y: &[f64],
) -> Result<(GaussianMoments, Matrix)> {
    if obs.state_dim() != m.dim() || y.len() != obs.obs_dim() {
        return Err(Error::invalid("observation dimension mismatch"));
    }
    let gain = kalman_gain(&m.cov, obs)?;
    let mut innovation = obs.h().mul_vec(&m.mean);
    for (inn, yi) in innovation.iter_mut().zip(y) {
        *inn = yi - *inn;
    }
    let corr = gain.mul_vec(&innovation);
    let mean: Vec<f64> = m.mean.iter().zip(&corr).map(|(a, b)| a + b).collect();
    let ikh = Matrix::identity(m.dim()).sub(&gain.matmul(obs.h()));
    let cov = SymMatrix::from_average(&ikh.matmul(&m.cov.to_matrix()));
    Ok((GaussianMoments { mean, cov }, gain))
}

/// Runs the full predict/update recursion over an observation sequence
/// and records the updated moments per epoch. Deterministic.
pub fn kf_run(
    sig: &LinearSignal,
    obs: &ObservationModel,
    y_seq: &[Vec<f64>],
    init: &GaussianMoments,
) -> Result<FilterTrace> {
    let mut trace = FilterTrace::new(Method::Kalman, init.clone());
    let mut current = init.clone();
    for y in y_seq {
        let predicted = kf_predict(&current, sig)?;
        let (updated, _) = kf_update(&predicted, obs, y)?;
        trace.push(TraceEpoch {
            mean: updated.mean.clone(),
            cov: updated.cov.clone(),
            truncated: false,
        });
        current = updated;
    }
    Ok(trace)
}
