//! Signal and observation models.
//!
//! Two built-in SDE test problems with known exact one-epoch
//! transitions:
//!
//! * Ornstein–Uhlenbeck, du = −u dt + σ dW, whose epoch map is the
//!   linear-Gaussian u′ = e⁻¹ u + ξ with ξ ~ N(0, σ²(1 − e⁻²)/2);
//! * drift-alternating geometric Brownian motion, whose log-process
//!   z = ln u satisfies z′ = z + (−1)ⁿ σ²/2 + ξ with ξ ~ N(0, σ²).
//!
//! The GBM model is integrated numerically in u but filtered in
//! z = ln u, so it carries a coordinate tag that the ensemble filters
//! honor when forming statistics and updates.

use crate::error::{Error, Result};
use crate::linalg::{spd_chol, sym_eigen, Matrix, SymMatrix};
use crate::stochastic::Stream;

/// Integration scheme applied by the level hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    EulerMaruyama,
    /// Euler–Maruyama plus the ½ b b′ (ΔW² − Δt) correction; identical
    /// to Euler–Maruyama under additive noise.
    Milstein,
}

/// Coordinates in which filter statistics and updates are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterCoords {
    /// Statistics on the integrated state itself.
    Identity,
    /// Statistics on ln(u); the integration still acts on u.
    Log,
}

impl FilterCoords {
    /// Maps an integration-coordinate state to filter coordinates.
    pub fn to_filter(self, u: &[f64], out: &mut [f64]) -> Result<()> {
        match self {
            FilterCoords::Identity => out.copy_from_slice(u),
            FilterCoords::Log => {
                for (o, &x) in out.iter_mut().zip(u) {
                    let z = x.ln();
                    if !z.is_finite() {
                        return Err(Error::Overflow(format!(
                            "log transform of non-positive state {x}"
                        )));
                    }
                    *o = z;
                }
            }
        }
        Ok(())
    }

    /// Inverse of [`FilterCoords::to_filter`].
    pub fn from_filter(self, w: &[f64], out: &mut [f64]) {
        match self {
            FilterCoords::Identity => out.copy_from_slice(w),
            FilterCoords::Log => {
                for (o, &z) in out.iter_mut().zip(w) {
                    *o = z.exp();
                }
            }
        }
    }
}

type DriftFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;
type DiffusionFn = dyn Fn(&[f64], usize, &mut [f64]) + Send + Sync;
type DiffusionDerivFn = dyn Fn(&[f64], usize) -> f64 + Send + Sync;
type ExactFn = dyn Fn(&[f64], usize, &mut Stream, &mut [f64]) + Send + Sync;

/// An SDE signal model du = a(u) dt + b(u) dW over each unit epoch,
/// with scalar driving noise.
///
/// The drift may depend on the epoch index (the built-in GBM alternates
/// its drift with epoch parity); within an epoch the dynamics are
/// autonomous.
pub struct SdeModel {
    name: &'static str,
    dim: usize,
    drive_dim: usize,
    scheme: Scheme,
    filter_coords: FilterCoords,
    drift: Box<DriftFn>,
    diffusion: Box<DiffusionFn>,
    diffusion_deriv: Option<Box<DiffusionDerivFn>>,
    exact: Option<Box<ExactFn>>,
}

impl std::fmt::Debug for SdeModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SdeModel")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl SdeModel {
    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn drive_dim(&self) -> usize {
        self.drive_dim
    }

    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn filter_coords(&self) -> FilterCoords {
        self.filter_coords
    }

    #[inline]
    pub fn drift_into(&self, u: &[f64], epoch: usize, out: &mut [f64]) {
        (self.drift)(u, epoch, out)
    }

    #[inline]
    pub fn diffusion_into(&self, u: &[f64], epoch: usize, out: &mut [f64]) {
        (self.diffusion)(u, epoch, out)
    }

    /// Scalar b·b′ input b′ for the Milstein correction, when known
    /// analytically.
    #[inline]
    pub fn diffusion_deriv(&self, u: &[f64], epoch: usize) -> Option<f64> {
        self.diffusion_deriv.as_ref().map(|f| f(u, epoch))
    }

    pub fn has_exact_transition(&self) -> bool {
        self.exact.is_some()
    }

    /// Samples the exact one-epoch transition in *filter* coordinates,
    /// when the model provides one.
    pub fn exact_transition(
        &self,
        state: &[f64],
        epoch: usize,
        stream: &mut Stream,
        out: &mut [f64],
    ) -> Result<()> {
        match &self.exact {
            Some(f) => {
                f(state, epoch, stream, out);
                Ok(())
            }
            None => Err(Error::invalid(format!(
                "model '{}' has no exact transition",
                self.name
            ))),
        }
    }
}

/// One-epoch transition noise variance of the OU map: σ²(1 − e⁻²)/2.
pub fn ou_transition_variance(sigma: f64) -> f64 {
    sigma * sigma * (1.0 - (-2.0_f64).exp()) / 2.0
}

/// Ornstein–Uhlenbeck model du = −u dt + σ dW.
pub fn ou_model(sigma: f64) -> Result<SdeModel> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let trans_std = ou_transition_variance(sigma).sqrt();
    let e_inv = (-1.0_f64).exp();
    Ok(SdeModel {
        name: "ou",
        dim: 1,
        drive_dim: 1,
        scheme: Scheme::Milstein,
        filter_coords: FilterCoords::Identity,
        drift: Box::new(|u, _, out| out[0] = -u[0]),
        diffusion: Box::new(move |_, _, out| out[0] = sigma),
        diffusion_deriv: Some(Box::new(|_, _| 0.0)),
        exact: Some(Box::new(move |u, _, stream, out| {
            out[0] = e_inv * u[0] + trans_std * stream.standard_normal();
        })),
    })
}

/// Drift-alternating geometric Brownian motion:
/// du = σ²u dt + σu dW on even epochs, du = σu dW on odd ones.
pub fn gbm_model(sigma: f64) -> Result<SdeModel> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let sig2 = sigma * sigma;
    Ok(SdeModel {
        name: "gbm",
        dim: 1,
        drive_dim: 1,
        scheme: Scheme::EulerMaruyama,
        filter_coords: FilterCoords::Log,
        drift: Box::new(move |u, epoch, out| {
            out[0] = if epoch % 2 == 0 { sig2 * u[0] } else { 0.0 };
        }),
        diffusion: Box::new(move |u, _, out| out[0] = sigma * u[0]),
        diffusion_deriv: Some(Box::new(move |_, _| sigma)),
        // Exact transition of the log process: z' = z + (−1)ⁿ σ²/2 + σξ.
        exact: Some(Box::new(move |z, epoch, stream, out| {
            let drift = if epoch % 2 == 0 {
                sig2 / 2.0
            } else {
                -sig2 / 2.0
            };
            out[0] = z[0] + drift + sigma * stream.standard_normal();
        })),
    })
}

/// Linear observation map y = H u + η with η ~ N(0, Γ).
#[derive(Debug, Clone)]
pub struct ObservationModel {
    h: Matrix,
    gamma: SymMatrix,
    gamma_chol: Matrix,
    gamma_min: f64,
}

impl ObservationModel {
    pub fn new(h: Matrix, gamma: SymMatrix) -> Result<Self> {
        if h.rows() != gamma.dim() {
            return Err(Error::invalid("H row count must match Γ dimension"));
        }
        let gamma_chol = spd_chol(&gamma)?;
        let gamma_min = sym_eigen(&gamma)?
            .eigenvalues
            .last()
            .copied()
            .unwrap_or(0.0);
        Ok(ObservationModel {
            h,
            gamma,
            gamma_chol,
            gamma_min,
        })
    }

    /// Scalar observation y = h·u + η, η ~ N(0, γ).
    pub fn scalar(h: f64, gamma: f64) -> Result<Self> {
        Self::new(Matrix::scalar(h), SymMatrix::scalar(gamma))
    }

    pub fn h(&self) -> &Matrix {
        &self.h
    }

    pub fn gamma(&self) -> &SymMatrix {
        &self.gamma
    }

    pub fn gamma_chol(&self) -> &Matrix {
        &self.gamma_chol
    }

    /// Smallest eigenvalue of Γ; it lower-bounds the gain denominator.
    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn obs_dim(&self) -> usize {
        self.h.rows()
    }

    pub fn state_dim(&self) -> usize {
        self.h.cols()
    }

    /// Draws one perturbation η ~ N(0, Γ).
    pub fn noise(&self, stream: &mut Stream) -> Vec<f64> {
        crate::stochastic::gaussian(stream, &vec![0.0; self.obs_dim()], &self.gamma_chol)
    }
}

/// Noisy observation of a state: H·u + η with η ~ N(0, Γ) drawn from
/// `stream`.
pub fn observe(u: &[f64], obs: &ObservationModel, stream: &mut Stream) -> Result<Vec<f64>> {
    if u.len() != obs.state_dim() {
        return Err(Error::invalid(format!(
            "state dimension {} does not match H columns {}",
            u.len(),
            obs.state_dim()
        )));
    }
    let mut y = obs.h.mul_vec(u);
    let eta = obs.noise(stream);
    for (yi, ei) in y.iter_mut().zip(&eta) {
        *yi += ei;
    }
    Ok(y)
}
