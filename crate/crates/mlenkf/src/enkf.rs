//! Single-level ensemble Kalman filter with perturbed observations.
//!
//! The filter propagates M particles through the level-L solution
//! operator, forms sample moments with 1/M normalization, and corrects
//! every member with its own independently perturbed observation
//! y + η_i. In the linear-Gaussian case the empirical measure converges
//! to the Kalman filtering distribution at the Monte Carlo rate
//! M^{-1/2}.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::harness::{CostRecord, FilterTrace, Method, TraceEpoch};
use crate::integrate::{propagate_in_place, CostTally, LevelGrid, StepScratch};
use crate::kalman::GaussianMoments;
use crate::linalg::{spd_chol, Matrix, SymMatrix};
use crate::models::{FilterCoords, ObservationModel, SdeModel};
use crate::multilevel::ml_gain_flagged;
use crate::stochastic::{gaussian, stream, Role, StreamKey};

/// How ensemble members advance over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    /// Numerical integration with the level's uniform step count.
    Numerical,
    /// The model's exact one-epoch transition (no discretization bias);
    /// counted as one substep per member.
    Exact,
}

/// An ensemble of particle states at a fixed resolution level, stored
/// flat in integration coordinates (members × dim, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    level: usize,
    data: Vec<f64>,
}

impl Ensemble {
    /// All members at the same state.
    pub fn constant(state: &[f64], members: usize, level: usize) -> Self {
        let mut data = Vec::with_capacity(state.len() * members);
        for _ in 0..members {
            data.extend_from_slice(state);
        }
        Ensemble {
            dim: state.len(),
            level,
            data,
        }
    }

    /// Draws members i.i.d. from the initial law (in filter
    /// coordinates), keyed by particle index so the draw order never
    /// matters. A zero covariance replicates the mean exactly.
    pub fn sample_init(
        init: &GaussianMoments,
        members: usize,
        level: usize,
        coords: FilterCoords,
        seed: u64,
    ) -> Result<Self> {
        let d = init.dim();
        let mut e = Ensemble::constant(&vec![0.0; d], members, level);
        if init.cov.is_zero() {
            let mut u = vec![0.0; d];
            coords.from_filter(&init.mean, &mut u);
            for member in e.members_mut() {
                member.copy_from_slice(&u);
            }
            return Ok(e);
        }
        let chol = spd_chol(&init.cov)?;
        for (i, member) in e.members_mut().enumerate() {
            let mut s = stream(StreamKey::new(0, level, i, Role::Init), seed);
            let w = gaussian(&mut s, &init.mean, &chol);
            coords.from_filter(&w, member);
        }
        Ok(e)
    }

    pub fn from_members(members: &[&[f64]], level: usize) -> Self {
        assert!(!members.is_empty());
        let dim = members[0].len();
        let mut data = Vec::with_capacity(dim * members.len());
        for m in members {
            assert_eq!(m.len(), dim);
            data.extend_from_slice(m);
        }
        Ensemble { dim, level, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn member(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn members(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn members_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.data.chunks_exact_mut(self.dim)
    }

    pub(crate) fn raw_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Sample mean (1/M) Σ v_i over flat member storage.
pub(crate) fn mean_of(data: &[f64], dim: usize) -> Vec<f64> {
    let m = data.len() / dim;
    assert!(m >= 1, "empty ensemble");
    let mut sums = vec![0.0; dim];
    for member in data.chunks_exact(dim) {
        for (s, v) in sums.iter_mut().zip(member) {
            *s += v;
        }
    }
    let inv = m as f64;
    sums.iter_mut().for_each(|s| *s /= inv);
    sums
}

/// Sample covariance with 1/M normalization (not the unbiased
/// 1/(M−1)); computed in centered form, which is algebraically
/// E[vvᵀ] − E[v]E[v]ᵀ but keeps the result PSD.
pub(crate) fn cov_of(data: &[f64], dim: usize) -> SymMatrix {
    let m = data.len() / dim;
    assert!(m >= 1, "empty ensemble");
    let mean = mean_of(data, dim);
    let mut acc = vec![0.0; dim * dim];
    for member in data.chunks_exact(dim) {
        for i in 0..dim {
            let di = member[i] - mean[i];
            for j in i..dim {
                acc[i * dim + j] += di * (member[j] - mean[j]);
            }
        }
    }
    let inv = m as f64;
    SymMatrix::from_fn(dim, |i, j| acc[i * dim + j] / inv)
}

/// Sample mean of the ensemble.
pub fn sample_mean(e: &Ensemble) -> Vec<f64> {
    mean_of(&e.data, e.dim)
}

/// Sample covariance of the ensemble (1/M normalization).
pub fn sample_cov(e: &Ensemble) -> SymMatrix {
    cov_of(&e.data, e.dim)
}

/// Empirical-measure estimate (1/M) Σ φ(v_i); φ sees the stored
/// (integration-coordinate) member states.
pub fn enkf_estimate(e: &Ensemble, phi: impl Fn(&[f64]) -> f64) -> f64 {
    let sum: f64 = e.members().map(phi).sum();
    sum / e.len() as f64
}

/// Writes ikh·w + gain·ỹ into `out`; the literal corrected-member
/// formula (I − KH)v̂ + Kỹ shared by the single-level and multilevel
/// updates.
pub(crate) fn correct_member(
    ikh: &Matrix,
    gain: &Matrix,
    w: &[f64],
    ytilde: &[f64],
    out: &mut [f64],
) {
    let d = w.len();
    for i in 0..d {
        let mut acc = 0.0;
        for k in 0..d {
            acc += ikh.get(i, k) * w[k];
        }
        for (j, yt) in ytilde.iter().enumerate() {
            acc += gain.get(i, j) * yt;
        }
        out[i] = acc;
    }
}

/// One EnKF predict/update transition.
///
/// Prediction runs in parallel over members with per-particle keyed
/// streams; the update forms the sample-moment gain once and then
/// corrects each member with its own perturbed observation. Returns the
/// post-update sample moments in filter coordinates, plus whether the
/// gain denominator was truncated (never happens for a single-level
/// PSD covariance; reported for trace symmetry with the multilevel
/// filter).
#[allow(clippy::too_many_arguments)]
pub fn enkf_step(
    e: &mut Ensemble,
    model: &SdeModel,
    grid: &LevelGrid,
    obs: &ObservationModel,
    y: &[f64],
    epoch: usize,
    seed: u64,
    prop: Propagation,
    tally: &CostTally,
) -> Result<(Vec<f64>, SymMatrix, bool)> {
    if y.len() != obs.obs_dim() {
        return Err(Error::invalid("observation dimension mismatch"));
    }
    let dim = e.dim;
    let level = e.level;
    let coords = model.filter_coords();
    let steps = grid.steps(level);

    // predict
    let results: Result<Vec<()>> = e
        .raw_mut()
        .par_chunks_mut(dim)
        .enumerate()
        .map_init(
            || (StepScratch::new(dim), vec![0.0; dim]),
            |(scratch, wbuf), (i, member)| {
                let mut s = stream(StreamKey::new(epoch, level, i, Role::Drive), seed);
                match prop {
                    Propagation::Numerical => {
                        propagate_in_place(model, steps, member, epoch, &mut s, scratch, tally)
                    }
                    Propagation::Exact => {
                        coords.to_filter(member, wbuf)?;
                        let w_in = wbuf.clone();
                        model.exact_transition(&w_in, epoch, &mut s, wbuf)?;
                        coords.from_filter(wbuf, member);
                        tally.add(1);
                        Ok(())
                    }
                }
            },
        )
        .collect();
    results?;

    // statistics in filter coordinates
    let mut w = vec![0.0; e.data.len()];
    for (wm, um) in w.chunks_exact_mut(dim).zip(e.members()) {
        coords.to_filter(um, wm)?;
    }
    let cov = cov_of(&w, dim);
    let (gain, truncated) = ml_gain_flagged(&cov, obs)?;
    let ikh = Matrix::identity(dim).sub(&gain.matmul(obs.h()));

    // perturbed-observation correction
    w.par_chunks_mut(dim).enumerate().for_each_init(
        || vec![0.0; dim],
        |scratch, (i, wm)| {
            let mut s = stream(StreamKey::new(epoch, level, i, Role::Perturb), seed);
            let mut ytilde = obs.noise(&mut s);
            for (yt, yi) in ytilde.iter_mut().zip(y) {
                *yt += yi;
            }
            scratch.copy_from_slice(wm);
            correct_member(&ikh, &gain, scratch, &ytilde, wm);
        },
    );

    let mean = mean_of(&w, dim);
    let cov_updated = cov_of(&w, dim);
    for (um, wm) in e.raw_mut().chunks_exact_mut(dim).zip(w.chunks_exact(dim)) {
        coords.from_filter(wm, um);
    }
    Ok((mean, cov_updated, truncated))
}

/// Updated sample moments of the ensemble in filter coordinates.
pub fn filter_moments(e: &Ensemble, coords: FilterCoords) -> Result<(Vec<f64>, SymMatrix)> {
    let dim = e.dim;
    let mut w = vec![0.0; e.data.len()];
    for (wm, um) in w.chunks_exact_mut(dim).zip(e.members()) {
        coords.to_filter(um, wm)?;
    }
    Ok((mean_of(&w, dim), cov_of(&w, dim)))
}

/// Full EnKF run over an observation sequence, tracing updated sample
/// moments per epoch.
#[allow(clippy::too_many_arguments)]
pub fn enkf_run(
    model: &SdeModel,
    grid: &LevelGrid,
    obs: &ObservationModel,
    y_seq: &[Vec<f64>],
    init: &GaussianMoments,
    members: usize,
    level: usize,
    seed: u64,
    prop: Propagation,
) -> Result<(FilterTrace, CostRecord)> {
    let start = std::time::Instant::now();
    let tally = CostTally::new();
    let mut e = Ensemble::sample_init(init, members, level, model.filter_coords(), seed)?;
    let mut trace = FilterTrace::new(Method::Enkf, init.clone());
    for (epoch, y) in y_seq.iter().enumerate() {
        let (mean, cov, truncated) =
            enkf_step(&mut e, model, grid, obs, y, epoch, seed, prop, &tally)?;
        trace.push(TraceEpoch {
            mean,
            cov,
            truncated,
        });
    }
    let cost = CostRecord {
        substeps: tally.total(),
        wall_seconds: start.elapsed().as_secs_f64(),
        ensemble_sizes: vec![members],
    };
    Ok((trace, cost))
}

/// Budget mapping for benchmarks: a prescribed per-epoch cost J buys
/// M = ⌈c·J^{2/3}⌉ members integrated with ⌈c·J^{1/3}⌉ uniform steps
/// (so the time step shrinks like J^{-1/3}).
pub fn size_for_budget(budget: f64, c: f64) -> Result<(usize, usize)> {
    if !(budget >= 1.0) || !(c > 0.0) {
        return Err(Error::invalid(
            "budget must be >= 1 and multiplier positive",
        ));
    }
    let members = (c * budget.powf(2.0 / 3.0)).ceil().max(1.0) as usize;
    let steps = (c * budget.powf(1.0 / 3.0)).ceil().max(1.0) as usize;
    Ok((members, steps))
}

/// Accuracy mapping: ε buys M = ⌈c·ε⁻²⌉ members at the first level
/// whose bias N_L^{-α} reaches ε.
pub fn size_for_epsilon(
    epsilon: f64,
    c: f64,
    alpha: f64,
    grid: &LevelGrid,
) -> Result<(usize, usize)> {
    if !(epsilon > 0.0) || !(c > 0.0) || !(alpha > 0.0) {
        return Err(Error::invalid(
            "epsilon, multiplier, and alpha must be positive",
        ));
    }
    let members = (c * epsilon.powi(-2)).ceil().max(1.0) as usize;
    let level = crate::multilevel::level_for_epsilon(epsilon, alpha, grid);
    Ok((members, level))
}
