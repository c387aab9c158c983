//! The multilevel ensemble Kalman filter.
//!
//! Moments are estimated by a telescoping sum over a hierarchy of
//! integrator resolutions: level ℓ contributes the difference of sample
//! moments between pairwise-coupled fine (ℓ) and coarse (ℓ−1)
//! particles, with level 0 contributing its plain sample moments.
//! Because the telescoped covariance is a signed combination it can
//! lose positive semidefiniteness, so the gain denominator uses its
//! PSD truncation while the numerator keeps the raw estimate:
//!
//! K = C·Hᵀ·(H·C̃·Hᵀ + Γ)⁻¹,  C̃ = psd_truncate(C).
//!
//! Every pair shares one perturbed observation in the update, which
//! preserves the within-pair coupling that the variance reduction
//! rests on.

use rayon::prelude::*;

use crate::enkf::{correct_member, cov_of, mean_of};
use crate::error::{Error, Result};
use crate::harness::{CostRecord, FilterTrace, Method, TraceEpoch};
use crate::integrate::{
    propagate_in_place, propagate_pair_in_place, CostTally, LevelGrid, StepScratch,
};
use crate::kalman::GaussianMoments;
use crate::linalg::{psd_truncate_flagged, spd_chol, spd_solve, Matrix, SymMatrix};
use crate::models::{FilterCoords, ObservationModel, SdeModel};
use crate::stochastic::{gaussian, stream, Role, StreamKey};

/// Convergence-rate exponents of the solver hierarchy: weak error α,
/// strong coupling variance β, and cost growth γ, with α ≥ min(β, γ)/2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rates {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Rates {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && gamma > 0.0) {
            return Err(Error::invalid("rates must be positive"));
        }
        if alpha < beta.min(gamma) / 2.0 {
            return Err(Error::invalid(
                "rates must satisfy alpha >= min(beta, gamma)/2",
            ));
        }
        Ok(Rates { alpha, beta, gamma })
    }
}

/// Ceiling with a small relative guard, so values that are exact
/// integers up to floating-point rounding of the power laws do not get
/// bumped to the next integer.
fn ceil_guarded(x: f64) -> f64 {
    (x - x.abs() * 1e-12).ceil()
}

/// Number of levels needed for bias N_L^{-α} ≲ ε:
/// L = ⌈ln(1/ε)/(α ln N̂)⌉.
pub fn level_for_epsilon(epsilon: f64, alpha: f64, grid: &LevelGrid) -> usize {
    let raw = (1.0 / epsilon).ln() / (alpha * (grid.nhat() as f64).ln());
    ceil_guarded(raw).max(0.0) as usize
}

/// Level count and per-level sample sizes of a multilevel run.
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    m_per_level: Vec<usize>,
    rates: Rates,
    c_m: f64,
    epsilon: f64,
}

impl Allocation {
    /// Samples per level for a fixed top level L:
    /// M_ℓ = ⌈c_M · N_ℓ^{−(β+2γ)/3} · F⌉ with
    /// F = N_L^{2α} (β > γ), L²N_L^{2α} (β = γ),
    /// N_L^{2α + 2(γ−β)/3} (β < γ), clamped to at least one sample.
    pub fn with_level(level: usize, rates: Rates, grid: &LevelGrid, c_m: f64) -> Result<Self> {
        if !(c_m > 0.0) {
            return Err(Error::invalid("sample multiplier must be positive"));
        }
        let n_top = grid.steps(level) as f64;
        let factor = if rates.beta > rates.gamma {
            n_top.powf(2.0 * rates.alpha)
        } else if rates.beta == rates.gamma {
            (level as f64).powi(2) * n_top.powf(2.0 * rates.alpha)
        } else {
            n_top.powf(2.0 * rates.alpha + 2.0 * (rates.gamma - rates.beta) / 3.0)
        };
        let exponent = -(rates.beta + 2.0 * rates.gamma) / 3.0;
        let m_per_level = (0..=level)
            .map(|l| {
                let n_l = grid.steps(l) as f64;
                ceil_guarded(c_m * n_l.powf(exponent) * factor).max(1.0) as usize
            })
            .collect();
        Ok(Allocation {
            m_per_level,
            rates,
            c_m,
            epsilon: n_top.powf(-rates.alpha),
        })
    }

    /// Allocation for a target accuracy ε.
    pub fn for_epsilon(epsilon: f64, rates: Rates, grid: &LevelGrid, c_m: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        let level = level_for_epsilon(epsilon, rates.alpha, grid);
        let mut alloc = Self::with_level(level, rates, grid, c_m)?;
        alloc.epsilon = epsilon;
        Ok(alloc)
    }

    /// Allocation for a per-epoch cost budget: the deepest hierarchy
    /// whose predicted substep count Σ M_ℓ(N_ℓ + N_{ℓ−1}) fits within
    /// the budget. Monotone: a larger budget never shrinks the level
    /// count or any M_ℓ.
    pub fn for_budget(budget: f64, rates: Rates, grid: &LevelGrid, c_m: f64) -> Result<Self> {
        if !(budget >= 1.0) {
            return Err(Error::invalid("budget must be at least 1"));
        }
        let mut chosen = Self::with_level(0, rates, grid, c_m)?;
        for level in 1..=60 {
            let candidate = Self::with_level(level, rates, grid, c_m)?;
            if candidate.cost_per_epoch(grid) as f64 <= budget {
                chosen = candidate;
            } else {
                break;
            }
        }
        Ok(chosen)
    }

    /// Top level L.
    pub fn max_level(&self) -> usize {
        self.m_per_level.len() - 1
    }

    pub fn m_per_level(&self) -> &[usize] {
        &self.m_per_level
    }

    pub fn rates(&self) -> Rates {
        self.rates
    }

    pub fn c_m(&self) -> f64 {
        self.c_m
    }

    /// The accuracy this allocation targets (N_L^{-α} when built from a
    /// level or budget).
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Predicted integrator substeps per epoch:
    /// Σ_ℓ M_ℓ (N_ℓ + N_{ℓ−1}) with N_{−1} := 0.
    pub fn cost_per_epoch(&self, grid: &LevelGrid) -> u64 {
        self.m_per_level
            .iter()
            .enumerate()
            .map(|(l, &m)| {
                let work = grid.steps(l) + if l > 0 { grid.steps(l - 1) } else { 0 };
                m as u64 * work as u64
            })
            .sum()
    }
}

/// All coupled pairs of one level: fine states at resolution ℓ, coarse
/// states at ℓ−1, stored flat. At level 0 the coarse slab holds the
/// conventional zero states and is never read.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelSlab {
    fine: Vec<f64>,
    coarse: Vec<f64>,
    members: usize,
}

impl LevelSlab {
    pub fn members(&self) -> usize {
        self.members
    }

    pub fn fine(&self) -> &[f64] {
        &self.fine
    }

    pub fn coarse(&self) -> &[f64] {
        &self.coarse
    }
}

/// The multilevel ensemble {[v^ℓ_i, v^{ℓ−1}_i]}_{i≤M_ℓ, ℓ≤L}.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelEnsemble {
    dim: usize,
    slabs: Vec<LevelSlab>,
}

impl MultilevelEnsemble {
    /// Initializes every pair at states drawn i.i.d. from the initial
    /// law (fine and coarse of a pair share the draw, so pairs start
    /// exactly coupled). A zero covariance replicates the mean.
    pub fn sample_init(
        alloc: &Allocation,
        init: &GaussianMoments,
        coords: FilterCoords,
        seed: u64,
    ) -> Result<Self> {
        let dim = init.dim();
        let chol = if init.cov.is_zero() {
            None
        } else {
            Some(spd_chol(&init.cov)?)
        };
        let mut deterministic = vec![0.0; dim];
        coords.from_filter(&init.mean, &mut deterministic);

        let slabs = alloc
            .m_per_level()
            .iter()
            .enumerate()
            .map(|(level, &members)| {
                let mut fine = vec![0.0; members * dim];
                for (i, member) in fine.chunks_exact_mut(dim).enumerate() {
                    match &chol {
                        None => member.copy_from_slice(&deterministic),
                        Some(l) => {
                            let mut s = stream(StreamKey::new(0, level, i, Role::Init), seed);
                            let w = gaussian(&mut s, &init.mean, l);
                            coords.from_filter(&w, member);
                        }
                    }
                }
                let coarse = if level == 0 {
                    vec![0.0; members * dim]
                } else {
                    fine.clone()
                };
                LevelSlab {
                    fine,
                    coarse,
                    members,
                }
            })
            .collect();
        Ok(MultilevelEnsemble { dim, slabs })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn levels(&self) -> &[LevelSlab] {
        &self.slabs
    }

    pub fn max_level(&self) -> usize {
        self.slabs.len() - 1
    }

    /// Builds a single-level ensemble (L = 0) from explicit members;
    /// mostly useful in tests of the telescoping identities.
    pub fn from_level_members(levels: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)>, dim: usize) -> Self {
        let slabs = levels
            .into_iter()
            .enumerate()
            .map(|(level, (fines, coarses))| {
                let members = fines.len();
                assert!(level == 0 || coarses.len() == members);
                let mut fine = Vec::with_capacity(members * dim);
                for f in &fines {
                    fine.extend_from_slice(f);
                }
                let coarse = if level == 0 {
                    vec![0.0; members * dim]
                } else {
                    let mut c = Vec::with_capacity(members * dim);
                    for s in &coarses {
                        c.extend_from_slice(s);
                    }
                    c
                };
                LevelSlab {
                    fine,
                    coarse,
                    members,
                }
            })
            .collect();
        MultilevelEnsemble { dim, slabs }
    }

    /// Applies the coordinate map to every live state in place (the
    /// dead coarse slab of level 0 is skipped).
    fn transform(&mut self, coords: FilterCoords, to_filter: bool) -> Result<()> {
        if coords == FilterCoords::Identity {
            return Ok(());
        }
        let dim = self.dim;
        let mut buf = vec![0.0; dim];
        for (level, slab) in self.slabs.iter_mut().enumerate() {
            for member in slab.fine.chunks_exact_mut(dim) {
                if to_filter {
                    coords.to_filter(member, &mut buf)?;
                } else {
                    coords.from_filter(member, &mut buf);
                }
                member.copy_from_slice(&buf);
            }
            if level > 0 {
                for member in slab.coarse.chunks_exact_mut(dim) {
                    if to_filter {
                        coords.to_filter(member, &mut buf)?;
                    } else {
                        coords.from_filter(member, &mut buf);
                    }
                    member.copy_from_slice(&buf);
                }
            }
        }
        Ok(())
    }
}

/// Multilevel mean: Σ_ℓ E_{M_ℓ}[fine_ℓ − coarse_ℓ], with the coarse
/// term absent at level 0.
pub fn ml_mean(e: &MultilevelEnsemble) -> Vec<f64> {
    let dim = e.dim;
    let mut acc = mean_of(&e.slabs[0].fine, dim);
    for slab in &e.slabs[1..] {
        let fine = mean_of(&slab.fine, dim);
        let coarse = mean_of(&slab.coarse, dim);
        for ((a, f), c) in acc.iter_mut().zip(&fine).zip(&coarse) {
            *a += f - c;
        }
    }
    acc
}

/// Multilevel covariance: Σ_ℓ (cov_{M_ℓ}[fine_ℓ] − cov_{M_ℓ}[coarse_ℓ]).
/// Symmetric by construction but possibly indefinite.
pub fn ml_cov(e: &MultilevelEnsemble) -> SymMatrix {
    let dim = e.dim;
    let mut acc = cov_of(&e.slabs[0].fine, dim);
    for slab in &e.slabs[1..] {
        let fine = cov_of(&slab.fine, dim);
        let coarse = cov_of(&slab.coarse, dim);
        acc = acc.add(&fine.sub(&coarse));
    }
    acc
}

/// Multilevel Kalman gain K = C·Hᵀ·(H·C̃·Hᵀ + Γ)⁻¹ with C̃ the PSD
/// truncation of C. The raw covariance stays in the numerator; only the
/// denominator is stabilized, and Γ SPD keeps the solve well-posed for
/// any symmetric C.
pub fn ml_gain(c_ml: &SymMatrix, obs: &ObservationModel) -> Result<Matrix> {
    Ok(ml_gain_flagged(c_ml, obs)?.0)
}

/// [`ml_gain`] plus a flag recording whether truncation modified the
/// covariance.
pub fn ml_gain_flagged(c_ml: &SymMatrix, obs: &ObservationModel) -> Result<(Matrix, bool)> {
    let (truncated, flag) = psd_truncate_flagged(c_ml)?;
    let h = obs.h();
    let s_raw = h.matmul(&truncated.to_matrix()).matmul(&h.transpose());
    let s = SymMatrix::from_average(&s_raw).add(obs.gamma());
    let hc = h.matmul(&c_ml.to_matrix());
    let gain = spd_solve(&s, &hc)?.transpose();
    Ok((gain, flag))
}

/// Corrects every pair with a shared perturbed observation:
/// ỹ^ℓ_i = y + η^ℓ_i, then fine and coarse both move by
/// (I − KH)·v + K·ỹ^ℓ_i. States are expected in filter coordinates.
pub fn ml_update(
    e: &mut MultilevelEnsemble,
    gain: &Matrix,
    obs: &ObservationModel,
    y: &[f64],
    epoch: usize,
    seed: u64,
) {
    let dim = e.dim;
    let ikh = Matrix::identity(dim).sub(&gain.matmul(obs.h()));
    for (level, slab) in e.slabs.iter_mut().enumerate() {
        let has_coarse = level > 0;
        let coarse = &mut slab.coarse;
        slab.fine
            .par_chunks_mut(dim)
            .zip(coarse.par_chunks_mut(dim))
            .enumerate()
            .for_each_init(
                || vec![0.0; dim],
                |scratch, (i, (fine, coarse))| {
                    let mut s = stream(StreamKey::new(epoch, level, i, Role::Perturb), seed);
                    let mut ytilde = obs.noise(&mut s);
                    for (yt, yi) in ytilde.iter_mut().zip(y) {
                        *yt += yi;
                    }
                    scratch.copy_from_slice(fine);
                    correct_member(&ikh, gain, scratch, &ytilde, fine);
                    if has_coarse {
                        scratch.copy_from_slice(coarse);
                        correct_member(&ikh, gain, scratch, &ytilde, coarse);
                    }
                },
            );
    }
}

/// Multilevel empirical-measure estimate:
/// Σ_ℓ (1/M_ℓ) Σ_i [φ(fine_{ℓ,i}) − φ(coarse_{ℓ,i})], coarse term
/// absent at level 0. φ ≡ 1 integrates to exactly 1.
pub fn ml_estimate(e: &MultilevelEnsemble, phi: impl Fn(&[f64]) -> f64) -> f64 {
    let dim = e.dim;
    let mut total = 0.0;
    for (level, slab) in e.slabs.iter().enumerate() {
        let mut sum = 0.0;
        if level == 0 {
            for f in slab.fine.chunks_exact(dim) {
                sum += phi(f);
            }
        } else {
            for (f, c) in slab
                .fine
                .chunks_exact(dim)
                .zip(slab.coarse.chunks_exact(dim))
            {
                sum += phi(f) - phi(c);
            }
        }
        total += sum / slab.members as f64;
    }
    total
}

/// One MLEnKF predict/update transition, in place.
///
/// All pairs on all levels are propagated in parallel (level 0 fines
/// via Ψ⁰, pairs via the coupled scheme), statistics are telescoped in
/// fixed level/member order, and the update shares one perturbed
/// observation per pair. Returns the post-update multilevel moments in
/// filter coordinates plus the truncation flag.
#[allow(clippy::too_many_arguments)]
pub fn mlenkf_step(
    e: &mut MultilevelEnsemble,
    model: &SdeModel,
    grid: &LevelGrid,
    obs: &ObservationModel,
    y: &[f64],
    epoch: usize,
    seed: u64,
    tally: &CostTally,
) -> Result<(Vec<f64>, SymMatrix, bool)> {
    if y.len() != obs.obs_dim() {
        return Err(Error::invalid("observation dimension mismatch"));
    }
    let dim = e.dim;
    let coords = model.filter_coords();

    // predict
    for (level, slab) in e.slabs.iter_mut().enumerate() {
        if level == 0 {
            let steps = grid.steps(0);
            let results: Result<Vec<()>> = slab
                .fine
                .par_chunks_mut(dim)
                .enumerate()
                .map_init(
                    || StepScratch::new(dim),
                    |scratch, (i, member)| {
                        let mut s = stream(StreamKey::new(epoch, 0, i, Role::Drive), seed);
                        propagate_in_place(model, steps, member, epoch, &mut s, scratch, tally)
                    },
                )
                .collect();
            results?;
        } else {
            let coarse = &mut slab.coarse;
            let results: Result<Vec<()>> = slab
                .fine
                .par_chunks_mut(dim)
                .zip(coarse.par_chunks_mut(dim))
                .enumerate()
                .map_init(
                    || (StepScratch::new(dim), StepScratch::new(dim)),
                    |(sf, sc), (i, (fine, coarse))| {
                        let mut s = stream(StreamKey::new(epoch, level, i, Role::Drive), seed);
                        propagate_pair_in_place(
                            model, grid, level, fine, coarse, epoch, &mut s, sf, sc, tally,
                        )
                    },
                )
                .collect();
            results?;
        }
    }

    // moments and gain in filter coordinates
    e.transform(coords, true)?;
    let cov = ml_cov(e);
    let (gain, truncated) = ml_gain_flagged(&cov, obs)?;
    ml_update(e, &gain, obs, y, epoch, seed);
    let mean_updated = ml_mean(e);
    let cov_updated = ml_cov(e);
    e.transform(coords, false)?;
    Ok((mean_updated, cov_updated, truncated))
}

/// Full MLEnKF run: persistent multilevel ensemble across all epochs,
/// per-epoch updated moments, raw (untruncated) covariance estimates,
/// and cost accounting.
#[allow(clippy::too_many_arguments)]
pub fn mlenkf_run(
    alloc: &Allocation,
    model: &SdeModel,
    grid: &LevelGrid,
    obs: &ObservationModel,
    y_seq: &[Vec<f64>],
    init: &GaussianMoments,
    seed: u64,
) -> Result<(FilterTrace, CostRecord)> {
    let start = std::time::Instant::now();
    let tally = CostTally::new();
    let mut e = MultilevelEnsemble::sample_init(alloc, init, model.filter_coords(), seed)?;
    let mut trace = FilterTrace::new(Method::Mlenkf, init.clone());
    for (epoch, y) in y_seq.iter().enumerate() {
        let (mean, cov, truncated) = mlenkf_step(&mut e, model, grid, obs, y, epoch, seed, &tally)?;
        trace.push(TraceEpoch {
            mean,
            cov,
            truncated,
        });
    }
    let cost = CostRecord {
        substeps: tally.total(),
        wall_seconds: start.elapsed().as_secs_f64(),
        ensemble_sizes: alloc.m_per_level().to_vec(),
    };
    Ok((trace, cost))
}
