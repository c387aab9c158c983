//! The hierarchy of one-epoch solution operators Ψ^ℓ.
//!
//! Level ℓ integrates the SDE over t ∈ (0, 1) with `n0 · nhat^ℓ`
//! uniform Euler–Maruyama or Milstein steps. Coupled fine/coarse pairs
//! are advanced from one Brownian realization: the fine path is drawn
//! and the coarse increments are its exact partial sums, which is what
//! buys the strong coupling rate β.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::models::{Scheme, SdeModel};
use crate::stochastic::{BrownianPath, Stream};

/// Uniform-step refinement hierarchy: level ℓ uses `n0 · nhat^ℓ` steps
/// per observation epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelGrid {
    n0: usize,
    nhat: usize,
}

impl LevelGrid {
    pub fn new(n0: usize, nhat: usize) -> Result<Self> {
        if n0 < 1 {
            return Err(Error::invalid("n0 must be at least 1"));
        }
        if nhat < 2 {
            return Err(Error::invalid("refinement factor nhat must be at least 2"));
        }
        Ok(LevelGrid { n0, nhat })
    }

    pub fn n0(&self) -> usize {
        self.n0
    }

    pub fn nhat(&self) -> usize {
        self.nhat
    }

    /// Steps per epoch at level ℓ.
    pub fn steps(&self, level: usize) -> usize {
        self.n0 * self.nhat.pow(level as u32)
    }

    pub fn dt(&self, level: usize) -> f64 {
        1.0 / self.steps(level) as f64
    }
}

/// Running tally of integrator substeps, the machine-independent cost
/// unit. Atomic so concurrent particle propagation can share one tally;
/// the total is exact regardless of scheduling.
#[derive(Debug, Default)]
pub struct CostTally {
    substeps: AtomicU64,
}

impl CostTally {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&self, steps: u64) {
        self.substeps.fetch_add(steps, Ordering::Relaxed);
    }

    pub fn total(&self) -> u64 {
        self.substeps.load(Ordering::Relaxed)
    }
}

/// A fine/coarse particle pair sharing one driving realization. At
/// level 0 the coarse slot holds the conventional zero state and is
/// never propagated or read.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledPair {
    pub fine: Vec<f64>,
    pub coarse: Vec<f64>,
    pub level: usize,
}

impl CoupledPair {
    /// A coupled pair at the shared initial state.
    pub fn at_state(state: &[f64], level: usize) -> Self {
        CoupledPair {
            fine: state.to_vec(),
            coarse: if level == 0 {
                vec![0.0; state.len()]
            } else {
                state.to_vec()
            },
            level,
        }
    }
}

/// Reusable per-worker buffers for drift/diffusion evaluations.
#[derive(Debug, Clone)]
pub struct StepScratch {
    drift: Vec<f64>,
    diffusion: Vec<f64>,
}

impl StepScratch {
    pub fn new(dim: usize) -> Self {
        StepScratch {
            drift: vec![0.0; dim],
            diffusion: vec![0.0; dim],
        }
    }
}

#[inline]
fn step_in_place(
    model: &SdeModel,
    scheme: Scheme,
    u: &mut [f64],
    epoch: usize,
    dt: f64,
    dw: f64,
    scratch: &mut StepScratch,
) -> Result<()> {
    model.drift_into(u, epoch, &mut scratch.drift);
    model.diffusion_into(u, epoch, &mut scratch.diffusion);
    let correction = match scheme {
        Scheme::EulerMaruyama => 0.0,
        Scheme::Milstein => {
            if u.len() != 1 {
                return Err(Error::invalid(
                    "Milstein correction requires a scalar model",
                ));
            }
            let deriv = model.diffusion_deriv(u, epoch).ok_or_else(|| {
                Error::invalid("Milstein scheme needs an analytic diffusion derivative")
            })?;
            0.5 * scratch.diffusion[0] * deriv * (dw * dw - dt)
        }
    };
    let mut finite = true;
    for i in 0..u.len() {
        u[i] += scratch.drift[i] * dt + scratch.diffusion[i] * dw;
        if i == 0 {
            u[0] += correction;
        }
        finite &= u[i].is_finite();
    }
    if !finite {
        return Err(Error::Overflow(format!(
            "state became non-finite at dt = {dt}"
        )));
    }
    Ok(())
}

/// One Euler–Maruyama step: u + a(u)·dt + b(u)·dW.
pub fn em_step(model: &SdeModel, u: &[f64], epoch: usize, dt: f64, dw: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut out = u.to_vec();
    let mut scratch = StepScratch::new(u.len());
    step_in_place(
        model,
        Scheme::EulerMaruyama,
        &mut out,
        epoch,
        dt,
        dw,
        &mut scratch,
    )?;
    Ok(out)
}

/// One Milstein step: the Euler–Maruyama step plus ½ b b′ (dW² − dt).
/// Scalar models only; under additive noise (b′ = 0) it reduces to
/// [`em_step`] exactly.
pub fn milstein_step(
    model: &SdeModel,
    u: &[f64],
    epoch: usize,
    dt: f64,
    dw: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt must be positive"));
    }
    let mut out = u.to_vec();
    let mut scratch = StepScratch::new(u.len());
    step_in_place(
        model,
        Scheme::Milstein,
        &mut out,
        epoch,
        dt,
        dw,
        &mut scratch,
    )?;
    Ok(out)
}

/// Advances a state in place over one epoch, drawing increments from
/// `stream` at the level's resolution. Records the substeps in `tally`.
pub(crate) fn propagate_in_place(
    model: &SdeModel,
    steps: usize,
    u: &mut [f64],
    epoch: usize,
    stream: &mut Stream,
    scratch: &mut StepScratch,
    tally: &CostTally,
) -> Result<()> {
    let dt = 1.0 / steps as f64;
    let sqrt_dt = dt.sqrt();
    let scheme = model.scheme();
    for _ in 0..steps {
        let dw = sqrt_dt * stream.standard_normal();
        step_in_place(model, scheme, u, epoch, dt, dw, scratch)?;
    }
    tally.add(steps as u64);
    Ok(())
}

/// Advances fine and coarse states of one pair in place from a single
/// stream: the fine path is drawn increment by increment, and each
/// block of `nhat` fine increments is summed into one coarse increment
/// before the coarse state takes its step. Bit-identical to drawing the
/// fine path up front and summing blocks.
#[allow(clippy::too_many_arguments)]
pub(crate) fn propagate_pair_in_place(
    model: &SdeModel,
    grid: &LevelGrid,
    level: usize,
    fine: &mut [f64],
    coarse: &mut [f64],
    epoch: usize,
    stream: &mut Stream,
    scratch_fine: &mut StepScratch,
    scratch_coarse: &mut StepScratch,
    tally: &CostTally,
) -> Result<()> {
    debug_assert!(level >= 1);
    let n_fine = grid.steps(level);
    let n_coarse = grid.steps(level - 1);
    let ratio = grid.nhat();
    let dt_fine = 1.0 / n_fine as f64;
    let dt_coarse = 1.0 / n_coarse as f64;
    let sqrt_dt = dt_fine.sqrt();
    let scheme = model.scheme();
    for _ in 0..n_coarse {
        let mut block = 0.0;
        for _ in 0..ratio {
            let dw = sqrt_dt * stream.standard_normal();
            block += dw;
            step_in_place(model, scheme, fine, epoch, dt_fine, dw, scratch_fine)?;
        }
        step_in_place(
            model,
            scheme,
            coarse,
            epoch,
            dt_coarse,
            block,
            scratch_coarse,
        )?;
    }
    tally.add((n_fine + n_coarse) as u64);
    Ok(())
}

/// Applies Ψ^ℓ to a state: `steps(ℓ)` integrator steps over one epoch
/// along the given path.
pub fn propagate_level(
    model: &SdeModel,
    grid: &LevelGrid,
    level: usize,
    u: &[f64],
    epoch: usize,
    path: &BrownianPath,
    tally: &CostTally,
) -> Result<Vec<f64>> {
    let steps = grid.steps(level);
    if path.len() != steps {
        return Err(Error::invalid(format!(
            "path has {} increments but level {level} needs {steps}",
            path.len()
        )));
    }
    let dt = grid.dt(level);
    let mut out = u.to_vec();
    let mut scratch = StepScratch::new(u.len());
    let scheme = model.scheme();
    for &dw in path.increments() {
        step_in_place(model, scheme, &mut out, epoch, dt, dw, &mut scratch)?;
    }
    tally.add(steps as u64);
    Ok(out)
}

/// Propagates a coupled pair one epoch forward: the fine member along a
/// freshly drawn fine path, the coarse member along its exact
/// block-summed coarsening of the same realization.
pub fn propagate_pair(
    model: &SdeModel,
    grid: &LevelGrid,
    pair: &CoupledPair,
    epoch: usize,
    stream: &mut Stream,
    tally: &CostTally,
) -> Result<CoupledPair> {
    if pair.level < 1 {
        return Err(Error::invalid("coupled propagation needs level >= 1"));
    }
    let dim = pair.fine.len();
    let mut out = pair.clone();
    let mut scratch_fine = StepScratch::new(dim);
    let mut scratch_coarse = StepScratch::new(dim);
    propagate_pair_in_place(
        model,
        grid,
        pair.level,
        &mut out.fine,
        &mut out.coarse,
        epoch,
        stream,
        &mut scratch_fine,
        &mut scratch_coarse,
        tally,
    )?;
    Ok(out)
}
