//! Deterministic, splittable random-number streams and Brownian
//! sampling.
//!
//! Every random draw in the crate flows from a single master seed
//! through a [`StreamKey`]: the (epoch, level, particle, role) tuple is
//! packed injectively into a 256-bit ChaCha key, so distinct keys give
//! independent streams and the same key always replays the same
//! sequence. This makes particle propagation order-independent: a
//! parallel run and a serial run consume identical noise.
//!
//! Standard normals come from the inverse-CDF transform of one uniform
//! draw each, so the draw count per stream is deterministic.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// What a stream is used for. Part of the key, so the same particle can
/// hold independent driving, perturbation, and initialization noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    /// Brownian increments driving the SDE integration.
    Drive,
    /// Perturbed-observation noise in ensemble updates.
    Perturb,
    /// Initial-ensemble sampling.
    Init,
    /// Synthetic truth and observation generation.
    Truth,
}

impl Role {
    fn id(self) -> u64 {
        match self {
            Role::Drive => 0,
            Role::Perturb => 1,
            Role::Init => 2,
            Role::Truth => 3,
        }
    }
}

/// Identifies one independent noise stream within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamKey {
    pub epoch: u64,
    pub level: u64,
    pub particle: u64,
    pub role: Role,
}

impl StreamKey {
    pub fn new(epoch: usize, level: usize, particle: usize, role: Role) -> Self {
        StreamKey {
            epoch: epoch as u64,
            level: level as u64,
            particle: particle as u64,
            role,
        }
    }
}

/// A deterministic random stream tied to one (seed, key) pair.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

/// Derives the stream for `key` under `seed`.
///
/// The four u64 words (seed, epoch, level‖role, particle) are laid out
/// directly as the 32-byte ChaCha key, so the mapping from keys to
/// cipher keys is injective: independence across keys is structural,
/// not probabilistic.
pub fn stream(key: StreamKey, seed: u64) -> Stream {
    let words = [
        seed,
        key.epoch,
        (key.level << 3) | key.role.id(),
        key.particle,
    ];
    let mut bytes = [0u8; 32];
    for (chunk, w) in bytes.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    Stream {
        rng: ChaCha8Rng::from_seed(bytes),
    }
}

impl Stream {
    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw on the open interval (0, 1), using the top 53 bits.
    #[inline]
    pub fn uniform_open01(&mut self) -> f64 {
        const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * SCALE
    }

    /// One standard normal via the inverse CDF; consumes exactly one
    /// u64 from the stream.
    #[inline]
    pub fn standard_normal(&mut self) -> f64 {
        inverse_normal_cdf(self.uniform_open01())
    }

    pub fn fill_standard_normal(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.standard_normal();
        }
    }
}

/// Draws mean + L·z with z standard normal, for a lower-triangular
/// covariance factor L (so the result is N(mean, LLᵀ)).
pub fn gaussian(stream: &mut Stream, mean: &[f64], cov_chol: &Matrix) -> Vec<f64> {
    assert_eq!(
        cov_chol.rows(),
        mean.len(),
        "factor/mean dimension mismatch"
    );
    let d = cov_chol.cols();
    let mut z = vec![0.0; d];
    stream.fill_standard_normal(&mut z);
    let mut out = cov_chol.mul_vec(&z);
    for (o, m) in out.iter_mut().zip(mean) {
        *o += m;
    }
    out
}

/// Brownian increments over one observation epoch, t ∈ (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    dt: f64,
    increments: Vec<f64>,
}

impl BrownianPath {
    pub fn new(dt: f64, increments: Vec<f64>) -> Result<Self> {
        let span = increments.len() as f64 * dt;
        if !(dt > 0.0) || (span - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(format!(
                "path must cover one unit epoch, got {} steps of dt = {dt}",
                increments.len()
            )));
        }
        Ok(BrownianPath { dt, increments })
    }

    #[inline]
    pub fn dt(&self) -> f64 {
        self.dt
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    #[inline]
    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn sum(&self) -> f64 {
        self.increments.iter().sum()
    }
}

/// Draws a fine Brownian path of `n_fine` increments (dt = 1/n_fine)
/// and derives the coarse path whose increment j is the exact partial
/// sum of fine increments [j·ratio, (j+1)·ratio).
///
/// This is the multilevel coupling: fine and coarse integrations of one
/// particle pair consume the same underlying Wiener realization.
pub fn coupled_brownian(
    stream: &mut Stream,
    n_fine: usize,
    ratio: usize,
) -> Result<(BrownianPath, BrownianPath)> {
    if n_fine == 0 || ratio == 0 || !n_fine.is_multiple_of(ratio) {
        return Err(Error::invalid(format!(
            "ratio {ratio} must divide the fine step count {n_fine}"
        )));
    }
    let dt_fine = 1.0 / n_fine as f64;
    let sqrt_dt = dt_fine.sqrt();
    let fine: Vec<f64> = (0..n_fine)
        .map(|_| sqrt_dt * stream.standard_normal())
        .collect();
    let coarse: Vec<f64> = fine.chunks_exact(ratio).map(|c| c.iter().sum()).collect();
    let n_coarse = n_fine / ratio;
    Ok((
        BrownianPath::new(dt_fine, fine)?,
        BrownianPath::new(1.0 / n_coarse as f64, coarse)?,
    ))
}

/// Inverse of the standard normal CDF (Acklam's rational approximation,
/// relative error below 1.2e-9 on (0, 1)); monotone in `p`.
#[allow(clippy::excessive_precision)] // coefficients kept as published
pub fn inverse_normal_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}
