//! Experiment drivers: synthetic truth generation, RMSE against the
//! Kalman gold standard, level-decay rate estimation, and
//! cost-vs-accuracy benchmark sweeps.

use std::io::Write;

use rayon::prelude::*;

use crate::enkf::{self, enkf_run, Propagation};
use crate::error::{Error, Result};
use crate::integrate::{propagate_pair_in_place, CostTally, LevelGrid, StepScratch};
use crate::kalman::{kf_predict, kf_run, kf_update, GaussianMoments, LinearSignal};
use crate::linalg::{spectral_norm, SymMatrix};
use crate::models::{
    gbm_model, observe, ou_model, ou_transition_variance, ObservationModel, SdeModel,
};
use crate::multilevel::{mlenkf_run, Allocation, Rates};
use crate::stochastic::{stream, Role, StreamKey};

/// Which filter produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Kalman,
    Enkf,
    Mlenkf,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Kalman => "kalman",
            Method::Enkf => "enkf",
            Method::Mlenkf => "mlenkf",
        }
    }
}

/// Per-epoch updated moment estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEpoch {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    /// Whether the gain denominator was PSD-truncated this epoch.
    pub truncated: bool,
}

/// Moment estimates over a filter run: the initial moments plus one
/// entry per observation epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterTrace {
    pub method: Method,
    pub initial: GaussianMoments,
    pub epochs: Vec<TraceEpoch>,
}

impl FilterTrace {
    pub fn new(method: Method, initial: GaussianMoments) -> Self {
        FilterTrace {
            method,
            initial,
            epochs: Vec::new(),
        }
    }

    pub fn push(&mut self, epoch: TraceEpoch) {
        self.epochs.push(epoch);
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }
}

/// Cost accounting for one filter run. Substeps are integrator steps
/// (the machine-independent unit); wall time is informational only.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub substeps: u64,
    pub wall_seconds: f64,
    /// Allocation snapshot: per-level sizes for MLEnKF, [M] for EnKF.
    pub ensemble_sizes: Vec<usize>,
}

/// A positive (x, y) sample for log-log rate fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatePoint {
    pub x: f64,
    pub y: f64,
}

/// Which trace field an error measure compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceField {
    Mean,
    Cov,
}

/// Root mean square error between two traces over the selected field:
/// sqrt(Σ_n |ref_n − est_n|² / N). Means use the Euclidean norm,
/// covariances the induced 2-norm.
pub fn rmse(est: &FilterTrace, reference: &FilterTrace, field: TraceField) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::invalid("traces have different lengths"));
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for (e, r) in est.epochs.iter().zip(&reference.epochs) {
        let err = match field {
            TraceField::Mean => e
                .mean
                .iter()
                .zip(&r.mean)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            TraceField::Cov => spectral_norm(&e.cov.sub(&r.cov))?,
        };
        acc += err * err;
    }
    Ok((acc / est.len() as f64).sqrt())
}

/// Least-squares slope of log y against log x.
pub fn fit_rate(points: &[RatePoint]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("need at least two points to fit a rate"));
    }
    if points.iter().any(|p| !(p.x > 0.0) || !(p.y > 0.0)) {
        return Err(Error::invalid("rate fitting needs positive coordinates"));
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for p in points {
        let (lx, ly) = (p.x.ln(), p.y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    if denom.abs() < 1e-300 {
        return Err(Error::invalid("degenerate abscissae in rate fit"));
    }
    Ok((n * sxy - sx * sy) / denom)
}

/// Standard normal CDF via the Abramowitz–Stegun 26.2.17 rational
/// approximation (absolute error below 7.5e-8, comfortably inside the
/// 1e-7 needed for reference probabilities here).
pub fn normal_cdf(x: f64) -> f64 {
    if x == 0.0 {
        return 0.5;
    }
    if x < 0.0 {
        return 1.0 - normal_cdf(-x);
    }
    const P: f64 = 0.2316419;
    const B: [f64; 5] = [
        0.319381530,
        -0.356563782,
        1.781477937,
        -1.821255978,
        1.330274429,
    ];
    let t = 1.0 / (1.0 + P * x);
    let poly = t * (B[0] + t * (B[1] + t * (B[2] + t * (B[3] + t * B[4]))));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    1.0 - pdf * poly
}

/// Reference exceedance probability P(X > threshold) for
/// X ~ N(m, c): 1 − Φ((threshold − m)/√c).
pub fn exceedance_ref(m: f64, c: f64, threshold: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::invalid("variance must be positive"));
    }
    Ok(1.0 - normal_cdf((threshold - m) / c.sqrt()))
}

/// The two benchmark SDE test problems with their observation noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Ou,
    Gbm,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Ou => "ou",
            ModelKind::Gbm => "gbm",
        }
    }
}

/// A fully specified filtering problem: signal model, observation
/// model, hierarchy, and rate exponents, with the experiment defaults
/// of each test problem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Problem {
    pub kind: ModelKind,
    pub sigma: f64,
    pub gamma: f64,
    pub h: f64,
}

impl Problem {
    /// OU defaults: σ = 0.5, Γ = 0.04, identity observation.
    pub fn ou() -> Self {
        Problem {
            kind: ModelKind::Ou,
            sigma: 0.5,
            gamma: 0.04,
            h: 1.0,
        }
    }

    /// GBM defaults: σ = 1/4, Γ = 1/16, identity observation of ln u.
    pub fn gbm() -> Self {
        Problem {
            kind: ModelKind::Gbm,
            sigma: 0.25,
            gamma: 0.0625,
            h: 1.0,
        }
    }

    pub fn model(&self) -> Result<SdeModel> {
        match self.kind {
            ModelKind::Ou => ou_model(self.sigma),
            ModelKind::Gbm => gbm_model(self.sigma),
        }
    }

    pub fn observation(&self) -> Result<ObservationModel> {
        ObservationModel::scalar(self.h, self.gamma)
    }

    /// Default step hierarchy: Δt_ℓ = 2^{−(ℓ+1)} for OU and the finer
    /// 2^{−(3+ℓ)} for the less stable GBM problem.
    pub fn default_grid(&self) -> LevelGrid {
        match self.kind {
            ModelKind::Ou => LevelGrid::new(2, 2).expect("static grid"),
            ModelKind::Gbm => LevelGrid::new(8, 2).expect("static grid"),
        }
    }

    /// Solver rate exponents: (α, β, γ) = (1, 2, 1) for the Milstein
    /// scheme on OU (additive noise), (1, 1, 1) for Euler–Maruyama on
    /// GBM.
    pub fn default_rates(&self) -> Rates {
        match self.kind {
            ModelKind::Ou => Rates::new(1.0, 2.0, 1.0).expect("static rates"),
            ModelKind::Gbm => Rates::new(1.0, 1.0, 1.0).expect("static rates"),
        }
    }

    pub fn default_epochs(&self) -> usize {
        match self.kind {
            ModelKind::Ou => 100,
            ModelKind::Gbm => 200,
        }
    }

    /// Initial moments in filter coordinates: the prescribed u(0) = 1
    /// means the filter starts from the point mass at 1 (OU) or at
    /// z = ln 1 = 0 (GBM).
    pub fn initial_moments(&self) -> GaussianMoments {
        match self.kind {
            ModelKind::Ou => GaussianMoments::deterministic(vec![1.0]),
            ModelKind::Gbm => GaussianMoments::deterministic(vec![0.0]),
        }
    }

    /// The exactly computable reference filter. For OU this is the
    /// Kalman filter on u' = e⁻¹u + ξ; for GBM it is the Kalman filter
    /// on the log process with unit dynamics, the known alternating
    /// drift applied as a mean offset in prediction, and Σ = σ².
    pub fn gold_standard(&self, y_seq: &[Vec<f64>]) -> Result<FilterTrace> {
        let obs = self.observation()?;
        let init = self.initial_moments();
        match self.kind {
            ModelKind::Ou => {
                let sig =
                    LinearSignal::scalar((-1.0_f64).exp(), ou_transition_variance(self.sigma));
                kf_run(&sig, &obs, y_seq, &init)
            }
            ModelKind::Gbm => {
                let sig = LinearSignal::scalar(1.0, self.sigma * self.sigma);
                let mut trace = FilterTrace::new(Method::Kalman, init.clone());
                let mut current = init;
                for (epoch, y) in y_seq.iter().enumerate() {
                    let mut predicted = kf_predict(&current, &sig)?;
                    let offset = if epoch % 2 == 0 { 1.0 } else { -1.0 };
                    predicted.mean[0] += offset * self.sigma * self.sigma / 2.0;
                    let (updated, _) = kf_update(&predicted, &obs, y)?;
                    trace.push(TraceEpoch {
                        mean: updated.mean.clone(),
                        cov: updated.cov.clone(),
                        truncated: false,
                    });
                    current = updated;
                }
                Ok(trace)
            }
        }
    }
}

/// Generates one synthetic truth realization and its noisy
/// observations, using the model's exact transition from the prescribed
/// initial state (u(0) = 1, i.e. the zero state in log coordinates).
/// Returns the truth states and observations at times 1..=epochs, both
/// in filter coordinates.
pub fn synthesize(
    model: &SdeModel,
    obs: &ObservationModel,
    epochs: usize,
    seed: u64,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if !model.has_exact_transition() {
        return Err(Error::invalid(format!(
            "model '{}' has no exact transition to synthesize from",
            model.name()
        )));
    }
    let dim = model.dim();
    let mut state = vec![0.0; dim];
    model
        .filter_coords()
        .to_filter(&vec![1.0; dim], &mut state)?;
    let mut truth = Vec::with_capacity(epochs);
    let mut observations = Vec::with_capacity(epochs);
    let mut next = vec![0.0; dim];
    for epoch in 0..epochs {
        let mut signal_stream = stream(StreamKey::new(epoch, 0, 0, Role::Truth), seed);
        model.exact_transition(&state, epoch, &mut signal_stream, &mut next)?;
        state.copy_from_slice(&next);
        let mut obs_stream = stream(StreamKey::new(epoch, 0, 1, Role::Truth), seed);
        let y = observe(&state, obs, &mut obs_stream)?;
        truth.push(state.clone());
        observations.push(y);
    }
    Ok((truth, observations))
}

/// One level's coupled-difference statistics from the decay estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub level: usize,
    pub steps: usize,
    /// |E[φ(Ψ^ℓ) − φ(Ψ^{ℓ−1})]|
    pub weak_diff: f64,
    /// ‖φ(Ψ^ℓ) − φ(Ψ^{ℓ−1})‖_p for each requested p.
    pub coupled_norms: Vec<f64>,
}

/// Monte Carlo estimates of the per-level weak difference and coupled
/// L^p differences of an observable over one epoch, from the fixed
/// initial state u(0) = 1.
pub fn level_decay_table(
    model: &SdeModel,
    grid: &LevelGrid,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    level_max: usize,
    samples: usize,
    ps: &[f64],
    seed: u64,
) -> Result<Vec<DecayRow>> {
    if level_max < 1 {
        return Err(Error::invalid("need at least one coupled level"));
    }
    if samples < 1000 {
        return Err(Error::invalid(
            "decay estimation needs at least 1000 samples",
        ));
    }
    let dim = model.dim();
    let tally = CostTally::new();
    let mut rows = Vec::with_capacity(level_max);
    for level in 1..=level_max {
        // parallel propagation into an indexed buffer, sequential
        // fixed-order reduction afterwards
        let diffs: Result<Vec<f64>> = (0..samples)
            .into_par_iter()
            .map_init(
                || {
                    (
                        StepScratch::new(dim),
                        StepScratch::new(dim),
                        vec![1.0; dim],
                        vec![1.0; dim],
                    )
                },
                |(sf, sc, fine, coarse), i| {
                    fine.iter_mut().for_each(|v| *v = 1.0);
                    coarse.iter_mut().for_each(|v| *v = 1.0);
                    let mut s = stream(StreamKey::new(0, level, i, Role::Drive), seed);
                    propagate_pair_in_place(
                        model, grid, level, fine, coarse, 0, &mut s, sf, sc, &tally,
                    )?;
                    Ok(phi(fine) - phi(coarse))
                },
            )
            .collect();
        let diffs = diffs?;
        let m = samples as f64;
        let weak_diff = (diffs.iter().sum::<f64>() / m).abs();
        let coupled_norms = ps
            .iter()
            .map(|&p| (diffs.iter().map(|d| d.abs().powf(p)).sum::<f64>() / m).powf(1.0 / p))
            .collect();
        rows.push(DecayRow {
            level,
            steps: grid.steps(level),
            weak_diff,
            coupled_norms,
        });
    }
    Ok(rows)
}

/// Fits the weak (α̂) and strong (β̂) decay exponents of an observable:
/// α̂ from |E[φ(Ψ^ℓ) − φ(Ψ^{ℓ−1})]| ~ N_ℓ^{−α} and β̂ from
/// ‖φ(Ψ^ℓ) − φ(Ψ^{ℓ−1})‖_p ~ N_ℓ^{−β/2}.
pub fn level_decay(
    model: &SdeModel,
    grid: &LevelGrid,
    phi: &(dyn Fn(&[f64]) -> f64 + Sync),
    level_max: usize,
    samples: usize,
    p: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let rows = level_decay_table(model, grid, phi, level_max, samples, &[p], seed)?;
    let weak: Vec<RatePoint> = rows
        .iter()
        .map(|r| RatePoint {
            x: r.steps as f64,
            y: r.weak_diff,
        })
        .collect();
    let strong: Vec<RatePoint> = rows
        .iter()
        .map(|r| RatePoint {
            x: r.steps as f64,
            y: r.coupled_norms[0],
        })
        .collect();
    let alpha_hat = -fit_rate(&weak)?;
    let beta_hat = -2.0 * fit_rate(&strong)?;
    Ok((alpha_hat, beta_hat))
}

/// Configuration of one cost-vs-accuracy benchmark sweep.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub problem: Problem,
    pub epochs: usize,
    pub grid: LevelGrid,
    pub rates: Rates,
    /// Per-epoch substep budgets, swept geometrically.
    pub budgets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub c_m: f64,
}

impl BenchmarkConfig {
    /// Sweep defaults for a problem: a geometric budget ladder and ten
    /// replicate seeds.
    pub fn defaults(
        problem: Problem,
        budget_min: f64,
        budget_max: f64,
        points: usize,
        seeds: usize,
        seed0: u64,
    ) -> Result<Self> {
        if !(budget_min >= 1.0) || budget_max < budget_min || points < 2 {
            return Err(Error::invalid("bad budget sweep parameters"));
        }
        let ratio = (budget_max / budget_min).powf(1.0 / (points - 1) as f64);
        let budgets = (0..points)
            .map(|k| budget_min * ratio.powi(k as i32))
            .collect();
        Ok(BenchmarkConfig {
            epochs: problem.default_epochs(),
            grid: problem.default_grid(),
            rates: problem.default_rates(),
            problem,
            budgets,
            seeds: (0..seeds as u64).map(|k| seed0.wrapping_add(k)).collect(),
            c_m: 1.0,
        })
    }
}

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub method: Method,
    pub budget: f64,
    pub substeps: u64,
    pub wall_seconds: f64,
    pub rmse_mean: f64,
    pub rmse_cov: f64,
    pub seed: u64,
}

/// Runs the benchmark sweep: for every (budget, seed) cell both filters
/// run against the same observation realization and are scored against
/// the gold standard. Rows are ordered by (method, budget, seed).
pub fn benchmark(config: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    let model = config.problem.model()?;
    let obs = config.problem.observation()?;
    let init = config.problem.initial_moments();

    // one observation realization and gold standard per seed
    let per_seed: Result<Vec<(u64, Vec<Vec<f64>>, FilterTrace)>> = config
        .seeds
        .iter()
        .map(|&seed| {
            let (_, y_seq) = synthesize(&model, &obs, config.epochs, seed)?;
            let gold = config.problem.gold_standard(&y_seq)?;
            Ok((seed, y_seq, gold))
        })
        .collect();
    let per_seed = per_seed?;

    let cells: Vec<(usize, f64)> = per_seed
        .iter()
        .enumerate()
        .flat_map(|(si, _)| config.budgets.iter().map(move |&b| (si, b)))
        .collect();

    let rows: Result<Vec<Vec<BenchmarkRow>>> = cells
        .par_iter()
        .map(|&(si, budget)| {
            let (seed, y_seq, gold) = &per_seed[si];
            let mut out = Vec::with_capacity(2);

            let (members, steps) = enkf::size_for_budget(budget, 1.0)?;
            let enkf_grid = LevelGrid::new(steps, config.grid.nhat())?;
            let (trace, cost) = enkf_run(
                &model,
                &enkf_grid,
                &obs,
                y_seq,
                &init,
                members,
                0,
                *seed,
                Propagation::Numerical,
            )?;
            out.push(BenchmarkRow {
                method: Method::Enkf,
                budget,
                substeps: cost.substeps,
                wall_seconds: cost.wall_seconds,
                rmse_mean: rmse(&trace, gold, TraceField::Mean)?,
                rmse_cov: rmse(&trace, gold, TraceField::Cov)?,
                seed: *seed,
            });

            let alloc = Allocation::for_budget(budget, config.rates, &config.grid, config.c_m)?;
            let (trace, cost) =
                mlenkf_run(&alloc, &model, &config.grid, &obs, y_seq, &init, *seed)?;
            out.push(BenchmarkRow {
                method: Method::Mlenkf,
                budget,
                substeps: cost.substeps,
                wall_seconds: cost.wall_seconds,
                rmse_mean: rmse(&trace, gold, TraceField::Mean)?,
                rmse_cov: rmse(&trace, gold, TraceField::Cov)?,
                seed: *seed,
            });
            Ok(out)
        })
        .collect();

    let mut rows: Vec<BenchmarkRow> = rows?.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.budget, a.seed)
            .partial_cmp(&(b.method.as_str(), b.budget, b.seed))
            .unwrap()
    });
    Ok(rows)
}

/// Formats a real in decimal notation with 17 significant digits, the
/// benchmark CSV convention.
pub fn fmt_real(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (16 - exp).clamp(0, 60) as usize;
    format!("{x:.decimals$}")
}

/// Writes benchmark rows as CSV with the stable header
/// `method,budget,substeps,wall_seconds,rmse_mean,rmse_cov,seed`.
pub fn write_benchmark_csv(rows: &[BenchmarkRow], out: &mut dyn Write) -> Result<()> {
    writeln!(
        out,
        "method,budget,substeps,wall_seconds,rmse_mean,rmse_cov,seed"
    )?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.method.as_str(),
            fmt_real(r.budget),
            r.substeps,
            fmt_real(r.wall_seconds),
            fmt_real(r.rmse_mean),
            fmt_real(r.rmse_cov),
            r.seed
        )?;
    }
    Ok(())
}

/// Writes a moment trace as CSV: the initial moments as epoch 0, then
/// one row per observation epoch.
pub fn write_trace_csv(trace: &FilterTrace, out: &mut dyn Write) -> Result<()> {
    let d = trace.initial.dim();
    let mut header = String::from("epoch");
    for i in 0..d {
        header.push_str(&format!(",mean_{i}"));
    }
    for i in 0..d {
        for j in 0..d {
            header.push_str(&format!(",cov_{i}_{j}"));
        }
    }
    header.push_str(",truncated");
    writeln!(out, "{header}")?;

    let write_row = |out: &mut dyn Write,
                     epoch: usize,
                     mean: &[f64],
                     cov: &SymMatrix,
                     truncated: bool|
     -> Result<()> {
        let mut line = epoch.to_string();
        for v in mean {
            line.push(',');
            line.push_str(&fmt_real(*v));
        }
        for i in 0..d {
            for j in 0..d {
                line.push(',');
                line.push_str(&fmt_real(cov.get(i, j)));
            }
        }
        line.push(',');
        line.push_str(if truncated { "1" } else { "0" });
        writeln!(out, "{line}")?;
        Ok(())
    };

    write_row(out, 0, &trace.initial.mean, &trace.initial.cov, false)?;
    for (k, e) in trace.epochs.iter().enumerate() {
        write_row(out, k + 1, &e.mean, &e.cov, e.truncated)?;
    }
    Ok(())
}

/// Writes level-decay rows as CSV:
/// `observable,p,level,steps,weak_diff,coupled_norm`.
pub fn write_decay_csv(
    observable: &str,
    ps: &[f64],
    rows: &[DecayRow],
    out: &mut dyn Write,
) -> Result<()> {
    writeln!(out, "observable,p,level,steps,weak_diff,coupled_norm")?;
    for (pi, p) in ps.iter().enumerate() {
        for r in rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                observable,
                fmt_real(*p),
                r.level,
                r.steps,
                fmt_real(r.weak_diff),
                fmt_real(r.coupled_norms[pi])
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_trace(means: &[f64]) -> FilterTrace {
        let mut t = FilterTrace::new(Method::Kalman, GaussianMoments::deterministic(vec![0.0]));
        for &m in means {
            t.push(TraceEpoch {
                mean: vec![m],
                cov: SymMatrix::scalar(0.0),
                truncated: false,
            });
        }
        t
    }

    #[test]
    fn rmse_basics() {
        let a = scalar_trace(&[1.0, 2.0]);
        assert_eq!(rmse(&a, &a, TraceField::Mean).unwrap(), 0.0);

        let b = scalar_trace(&[1.5, 2.5]);
        assert!((rmse(&a, &b, TraceField::Mean).unwrap() - 0.5).abs() < 1e-15);

        let zero = scalar_trace(&[0.0, 0.0]);
        let est = scalar_trace(&[3.0, 4.0]);
        let want = (25.0_f64 / 2.0).sqrt();
        assert!((rmse(&est, &zero, TraceField::Mean).unwrap() - want).abs() < 1e-12);

        let short = scalar_trace(&[1.0]);
        assert!(rmse(&a, &short, TraceField::Mean).is_err());
    }

    #[test]
    fn rmse_is_permutation_invariant() {
        let a = scalar_trace(&[1.0, 2.0, 3.0]);
        let b = scalar_trace(&[0.0, 0.0, 0.0]);
        let a_perm = scalar_trace(&[3.0, 1.0, 2.0]);
        assert!(
            (rmse(&a, &b, TraceField::Mean).unwrap()
                - rmse(&a_perm, &b, TraceField::Mean).unwrap())
            .abs()
                < 1e-15
        );
    }

    #[test]
    fn fit_rate_exact_power_law() {
        let points: Vec<RatePoint> = [1.0, 10.0, 100.0]
            .iter()
            .map(|&x: &f64| RatePoint { x, y: x.powf(-0.5) })
            .collect();
        assert!((fit_rate(&points).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_two_points() {
        let points = [RatePoint { x: 1.0, y: 1.0 }, RatePoint { x: 4.0, y: 2.0 }];
        assert!((fit_rate(&points).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn fit_rate_with_multiplicative_noise() {
        let mut s = stream(StreamKey::new(0, 0, 0, Role::Init), 31);
        let points: Vec<RatePoint> = (1..=20)
            .map(|k| {
                let x = 1.5_f64.powi(k);
                let noise = 1.0 + 0.01 * s.standard_normal();
                RatePoint {
                    x,
                    y: 3.0 * noise / x,
                }
            })
            .collect();
        let slope = fit_rate(&points).unwrap();
        assert!((slope + 1.0).abs() < 0.05, "slope {slope}");
    }

    #[test]
    fn fit_rate_rejects_bad_input() {
        assert!(fit_rate(&[RatePoint { x: 1.0, y: 1.0 }]).is_err());
        assert!(fit_rate(&[RatePoint { x: 1.0, y: 1.0 }, RatePoint { x: 2.0, y: -1.0 }]).is_err());
    }

    #[test]
    fn normal_cdf_reference_values() {
        assert_eq!(normal_cdf(0.0), 0.5);
        assert!((normal_cdf(1e-12) - 0.5).abs() < 1e-7);
        assert!((normal_cdf(3.0) - 0.9986501019683699).abs() < 1e-7);
        assert!((normal_cdf(-3.0) - 0.0013498980316301).abs() < 1e-7);
        assert!((normal_cdf(1.0) - 0.8413447460685429).abs() < 1e-7);
    }

    #[test]
    fn exceedance_examples() {
        assert!((exceedance_ref(0.1, 0.5, 0.1).unwrap() - 0.5).abs() < 1e-9);
        let c = 0.3_f64;
        let up = exceedance_ref(3.0 * c.sqrt(), c, 0.0).unwrap();
        assert!((up - 0.99865).abs() < 1e-4, "{up}");
        let down = exceedance_ref(-3.0 * c.sqrt(), c, 0.0).unwrap();
        assert!((down - 0.00135).abs() < 1e-4, "{down}");
        assert!(exceedance_ref(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn synthesize_is_deterministic_and_replayable() {
        let p = Problem::ou();
        let model = p.model().unwrap();
        let obs = p.observation().unwrap();
        let (t1, y1) = synthesize(&model, &obs, 16, 5).unwrap();
        let (t2, y2) = synthesize(&model, &obs, 16, 5).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(y1, y2);
        let (t3, _) = synthesize(&model, &obs, 16, 6).unwrap();
        assert_ne!(t1, t3);

        // replay the recursion by hand
        let mut state = vec![1.0];
        for (epoch, truth) in t1.iter().enumerate() {
            let mut s = stream(StreamKey::new(epoch, 0, 0, Role::Truth), 5);
            let mut next = vec![0.0];
            model
                .exact_transition(&state, epoch, &mut s, &mut next)
                .unwrap();
            assert_eq!(&next, truth);
            state = next;
        }
    }

    #[test]
    fn synthesize_observations_carry_truth_plus_noise() {
        let p = Problem::ou();
        let model = p.model().unwrap();
        let obs = p.observation().unwrap();
        let (truth, ys) = synthesize(&model, &obs, 8, 2).unwrap();
        for (epoch, (t, y)) in truth.iter().zip(&ys).enumerate() {
            let mut s = stream(StreamKey::new(epoch, 0, 1, Role::Truth), 2);
            let eta = obs.noise(&mut s)[0];
            assert_eq!(y[0], t[0] + eta);
        }
    }

    #[test]
    fn gbm_gold_standard_matches_hand_recursion() {
        let p = Problem::gbm();
        let model = p.model().unwrap();
        let obs = p.observation().unwrap();
        let (_, y_seq) = synthesize(&model, &obs, 32, 3).unwrap();
        let trace = p.gold_standard(&y_seq).unwrap();

        let (sig2, gamma) = (p.sigma * p.sigma, p.gamma);
        let (mut m, mut c) = (0.0_f64, 0.0_f64);
        for (epoch, y) in y_seq.iter().enumerate() {
            let drift = if epoch % 2 == 0 {
                sig2 / 2.0
            } else {
                -sig2 / 2.0
            };
            let mp = m + drift;
            let cp = c + sig2;
            let k = cp / (cp + gamma);
            m = mp + k * (y[0] - mp);
            c = (1.0 - k) * cp;
            let row = &trace.epochs[epoch];
            assert!((row.mean[0] - m).abs() < 1e-10, "mean at {epoch}");
            assert!((row.cov.as_scalar() - c).abs() < 1e-10, "cov at {epoch}");
        }
    }

    #[test]
    fn benchmark_single_cell_row_count() {
        let mut cfg = BenchmarkConfig::defaults(Problem::ou(), 32.0, 32.0, 2, 1, 0).unwrap();
        cfg.budgets = vec![32.0];
        cfg.epochs = 4;
        let rows = benchmark(&cfg).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].method, Method::Enkf);
        assert_eq!(rows[1].method, Method::Mlenkf);
        assert!(rows.iter().all(|r| r.substeps > 0));
    }

    #[test]
    fn fmt_real_significant_digits() {
        assert_eq!(fmt_real(0.0), "0");
        assert_eq!(fmt_real(123.456), "123.45600000000000");
        assert_eq!(fmt_real(0.5), "0.50000000000000000");
        assert_eq!(fmt_real(-2.0), "-2.0000000000000000");
        // round-trips through decimal text
        for &x in &[1.0 / 3.0, 2.0_f64.sqrt() * 1e-5, 123456.789] {
            let parsed: f64 = fmt_real(x).parse().unwrap();
            assert_eq!(parsed, x, "{x} did not round-trip");
        }
    }

    #[test]
    fn trace_csv_shape() {
        let trace = scalar_trace(&[0.25, -0.5]);
        let mut buf = Vec::new();
        write_trace_csv(&trace, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch,mean_0,cov_0_0,truncated");
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("0,"));
        assert!(lines[2].starts_with("1,0.25"));
    }
}
