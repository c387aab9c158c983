//! Acceptance suite: end-to-end checks of the library's headline
//! claims, one test per criterion. Each test prints a PASS line with
//! the measured quantities (visible with `--nocapture`) and panics
//! with the same detail on failure.
//!
//! Run with: cargo test -p mlenkf --test acceptance -- --nocapture

use mlenkf::enkf::{enkf_run, Propagation};
use mlenkf::harness::{
    benchmark, fit_rate, level_decay, level_decay_table, synthesize, BenchmarkConfig, Method,
    Problem, RatePoint, TraceField,
};
use mlenkf::integrate::LevelGrid;
use mlenkf::kalman::kalman_gain;
use mlenkf::linalg::{operator_norm, psd_truncate, spectral_norm, Matrix, SymMatrix};
use mlenkf::models::ObservationModel;
use mlenkf::multilevel::{
    ml_estimate, ml_gain, mlenkf_run, mlenkf_step, Allocation, MultilevelEnsemble, Rates,
};
use mlenkf::stochastic::{coupled_brownian, stream, Role, StreamKey};

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Small deterministic generator for the randomized lemma instances.
struct TestRng(u64);

impl TestRng {
    fn next_f64(&mut self) -> f64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (self.0 >> 11) as f64 / (1u64 << 53) as f64
    }

    fn centered(&mut self) -> f64 {
        2.0 * self.next_f64() - 1.0
    }

    fn sym(&mut self, d: usize, scale: f64) -> SymMatrix {
        SymMatrix::from_fn(d, |_, _| scale * self.centered())
    }

    fn spd(&mut self, d: usize) -> SymMatrix {
        let b = Matrix::from_fn(d, d, |_, _| self.centered());
        let g = b.matmul(&b.transpose());
        SymMatrix::from_average(&g).add(&SymMatrix::identity(d).scale(0.05))
    }
}

/// Criterion 1: the PSD-truncation bound |C̃ − C_ml| ≤ |C_ml − C| and
/// the gain-continuity bound |K_ml − K| ≤ (|H|/γ_min)(1 + 2|KH|)|C_ml − C|
/// hold on 1000 randomized instances each, dimensions 1–8, relative
/// tolerance 1e-9.
#[test]
fn lemma_property_suite() {
    let mut rng = TestRng(0x1234_5678_9abc_def0);
    let rel = 1.0 + 1e-9;

    for case in 0..1000 {
        let d = 1 + case % 8;
        let c_ml = rng.sym(d, 2.0);
        let c_psd = rng.spd(d);
        let lhs = spectral_norm(&psd_truncate(&c_ml).unwrap().sub(&c_ml)).unwrap();
        let rhs = spectral_norm(&c_ml.sub(&c_psd)).unwrap();
        assert!(
            lhs <= rhs * rel + 1e-15,
            "truncation bound violated at case {case}: {lhs} > {rhs}"
        );
    }

    for case in 0..1000 {
        let d = 1 + case % 8;
        let m = 1 + case % d.max(1);
        let c = rng.spd(d);
        let c_ml = rng.sym(d, 2.0);
        let h = Matrix::from_fn(m, d, |_, _| rng.centered());
        let gamma = rng.spd(m);
        let obs = ObservationModel::new(h.clone(), gamma).unwrap();

        let k = kalman_gain(&c, &obs).unwrap();
        let k_ml = ml_gain(&c_ml, &obs).unwrap();

        let kh_norm = operator_norm(&k.matmul(&h)).unwrap();
        let bound = operator_norm(&h).unwrap() / obs.gamma_min() * (1.0 + 2.0 * kh_norm);
        let lhs = operator_norm(&k_ml.sub(&k)).unwrap();
        let rhs = bound * spectral_norm(&c_ml.sub(&c)).unwrap();
        assert!(
            lhs <= rhs * rel + 1e-12,
            "gain continuity violated at case {case} (d={d}, m={m}): {lhs} > {rhs}"
        );
    }
    println!("[acceptance] lemma bounds: PASS (1000 truncation + 1000 gain-continuity instances, dims 1-8)");
}

/// Criterion 2: on the linear-Gaussian OU problem (σ = 0.5, Γ = 0.04)
/// the EnKF posterior mean and covariance converge to the exact Kalman
/// filter at the Monte Carlo rate: fitted slope −0.5 ± 0.1 in M over
/// M ∈ {10², 10³, 10⁴, 10⁵}, median over 20 seeds.
#[test]
fn enkf_converges_to_kalman_in_ensemble_size() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = LevelGrid::new(1, 2).unwrap(); // unused by exact propagation
    let init = problem.initial_moments();
    let epochs = 100;
    let sizes = [100usize, 1_000, 10_000, 100_000];

    use rayon::prelude::*;
    let slopes: Vec<(f64, f64)> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let (_, y_seq) = synthesize(&model, &obs, epochs, seed).unwrap();
            let gold = problem.gold_standard(&y_seq).unwrap();
            let mut mean_points = Vec::new();
            let mut cov_points = Vec::new();
            for &m in &sizes {
                let (trace, _) = enkf_run(
                    &model,
                    &grid,
                    &obs,
                    &y_seq,
                    &init,
                    m,
                    0,
                    seed,
                    Propagation::Exact,
                )
                .unwrap();
                mean_points.push(RatePoint {
                    x: m as f64,
                    y: mlenkf::harness::rmse(&trace, &gold, TraceField::Mean).unwrap(),
                });
                cov_points.push(RatePoint {
                    x: m as f64,
                    y: mlenkf::harness::rmse(&trace, &gold, TraceField::Cov).unwrap(),
                });
            }
            (
                fit_rate(&mean_points).unwrap(),
                fit_rate(&cov_points).unwrap(),
            )
        })
        .collect();
    let mean_slope = median(slopes.iter().map(|s| s.0).collect());
    let cov_slope = median(slopes.iter().map(|s| s.1).collect());
    for (name, slope) in [("mean", mean_slope), ("cov", cov_slope)] {
        assert!(
            (slope + 0.5).abs() <= 0.1,
            "EnKF {name} convergence slope {slope:.3} outside -0.5 +/- 0.1"
        );
    }
    println!(
        "[acceptance] EnKF -> KF convergence: PASS (median slopes mean {mean_slope:.3}, cov {cov_slope:.3}; target -0.5 +/- 0.1)"
    );
}

fn sweep_slopes(
    problem: Problem,
    epochs: usize,
    levels: std::ops::RangeInclusive<usize>,
    seeds: usize,
) -> (f64, f64, f64, f64) {
    let grid = problem.default_grid();
    let rates = problem.default_rates();
    let budgets: Vec<f64> = levels
        .map(|l| {
            Allocation::with_level(l, rates, &grid, 1.0)
                .unwrap()
                .cost_per_epoch(&grid) as f64
        })
        .collect();
    let decades = (budgets.last().unwrap() / budgets[0]).log10();
    assert!(
        decades >= 3.0,
        "budget sweep spans only {decades:.2} decades"
    );

    let config = BenchmarkConfig {
        problem,
        epochs,
        grid,
        rates,
        budgets,
        seeds: (0..seeds as u64).collect(),
        c_m: 1.0,
    };
    let rows = benchmark(&config).unwrap();

    let slope_for = |method: Method, field: TraceField| -> f64 {
        let per_seed: Vec<f64> = config
            .seeds
            .iter()
            .map(|&seed| {
                let points: Vec<RatePoint> = rows
                    .iter()
                    .filter(|r| r.method == method && r.seed == seed)
                    .map(|r| RatePoint {
                        x: r.substeps as f64,
                        y: match field {
                            TraceField::Mean => r.rmse_mean,
                            TraceField::Cov => r.rmse_cov,
                        },
                    })
                    .collect();
                fit_rate(&points).unwrap()
            })
            .collect();
        median(per_seed)
    };

    (
        slope_for(Method::Mlenkf, TraceField::Mean),
        slope_for(Method::Mlenkf, TraceField::Cov),
        slope_for(Method::Enkf, TraceField::Mean),
        slope_for(Method::Enkf, TraceField::Cov),
    )
}

/// Criterion 3: on the OU problem over a budget sweep of at least three
/// decades, RMSE against the Kalman gold standard decays with realized
/// substeps at slope −0.5 ± 0.15 for MLEnKF and −1/3 ± 0.1 for EnKF,
/// for the mean and covariance fields separately, median over 10 seeds.
#[test]
fn ou_cost_error_rates() {
    let (ml_mean, ml_cov, en_mean, en_cov) = sweep_slopes(Problem::ou(), 100, 1..=8, 10);
    for (name, slope) in [("mean", ml_mean), ("cov", ml_cov)] {
        assert!(
            (slope + 0.5).abs() <= 0.15,
            "MLEnKF {name} cost-error slope {slope:.3} outside -0.5 +/- 0.15"
        );
    }
    for (name, slope) in [("mean", en_mean), ("cov", en_cov)] {
        assert!(
            (slope + 1.0 / 3.0).abs() <= 0.1,
            "EnKF {name} cost-error slope {slope:.3} outside -0.333 +/- 0.1"
        );
    }
    println!(
        "[acceptance] OU cost-vs-error rates: PASS (MLEnKF mean {ml_mean:.3}, cov {ml_cov:.3}; EnKF mean {en_mean:.3}, cov {en_cov:.3})"
    );
}

/// Criterion 4: coupled level-decay estimates reproduce the solver
/// rates: OU (Milstein, additive noise) α̂ ∈ [0.8, 1.2] and
/// β̂ ∈ [1.7, 2.3]; GBM (Euler–Maruyama) β̂ ∈ [0.7, 1.3]; and for the
/// exceedance indicator the strong rate β̂(p) is non-increasing over
/// p ∈ {2, 4, 8}.
#[test]
fn level_decay_rates() {
    let samples = 100_000;
    let identity = |v: &[f64]| v[0];

    let ou = Problem::ou();
    let (alpha_hat, beta_hat) = level_decay(
        &ou.model().unwrap(),
        &ou.default_grid(),
        &identity,
        6,
        samples,
        2.0,
        11,
    )
    .unwrap();
    assert!(
        (0.8..=1.2).contains(&alpha_hat),
        "OU weak rate {alpha_hat:.3} outside [0.8, 1.2]"
    );
    assert!(
        (1.7..=2.3).contains(&beta_hat),
        "OU strong rate {beta_hat:.3} outside [1.7, 2.3]"
    );

    let gbm = Problem::gbm();
    let (_, gbm_beta) = level_decay(
        &gbm.model().unwrap(),
        &gbm.default_grid(),
        &identity,
        6,
        samples,
        2.0,
        11,
    )
    .unwrap();
    assert!(
        (0.7..=1.3).contains(&gbm_beta),
        "GBM strong rate {gbm_beta:.3} outside [0.7, 1.3]"
    );

    let indicator = |v: &[f64]| if v[0] > 0.1 { 1.0 } else { 0.0 };
    let ps = [2.0, 4.0, 8.0];
    let rows = level_decay_table(
        &ou.model().unwrap(),
        &ou.default_grid(),
        &indicator,
        6,
        samples,
        &ps,
        11,
    )
    .unwrap();
    let betas: Vec<f64> = (0..ps.len())
        .map(|pi| {
            let points: Vec<RatePoint> = rows
                .iter()
                .map(|r| RatePoint {
                    x: r.steps as f64,
                    y: r.coupled_norms[pi],
                })
                .collect();
            -2.0 * fit_rate(&points).unwrap()
        })
        .collect();
    for w in betas.windows(2) {
        assert!(
            w[1] <= w[0] + 1e-9,
            "indicator strong rate must not increase with p: {betas:?}"
        );
    }
    println!(
        "[acceptance] level-decay rates: PASS (OU alpha {alpha_hat:.3}, beta {beta_hat:.3}; GBM beta {gbm_beta:.3}; indicator beta(p) {betas:?})"
    );
}

/// Criterion 5: exact structural reductions. MLEnKF at L = 0 is
/// bit-identical to the EnKF under shared seeds; coarse Brownian
/// increments are exact partial sums of fine ones; the multilevel
/// empirical measure integrates φ ≡ 1 to exactly one; and filter runs
/// replay bit-exactly across thread counts.
#[test]
fn exact_reductions() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = problem.default_grid();
    let rates = problem.default_rates();
    let init = problem.initial_moments();
    let (_, y_seq) = synthesize(&model, &obs, 25, 3).unwrap();

    // L = 0 degeneration: same seeds, same trajectories, bit-exact
    let alloc = Allocation::with_level(0, rates, &grid, 50.0).unwrap();
    assert_eq!(alloc.max_level(), 0);
    let members = alloc.m_per_level()[0];
    let (ml_trace, ml_cost) = mlenkf_run(&alloc, &model, &grid, &obs, &y_seq, &init, 3).unwrap();
    let (en_trace, en_cost) = enkf_run(
        &model,
        &grid,
        &obs,
        &y_seq,
        &init,
        members,
        0,
        3,
        Propagation::Numerical,
    )
    .unwrap();
    assert_eq!(
        ml_trace.epochs, en_trace.epochs,
        "L = 0 multilevel trace must equal the EnKF trace bit-exactly"
    );
    assert_eq!(ml_cost.substeps, en_cost.substeps);

    // coarse increments are exact partial sums
    let mut s = stream(StreamKey::new(0, 3, 5, Role::Drive), 17);
    let (fine, coarse) = coupled_brownian(&mut s, 64, 4).unwrap();
    for (j, c) in coarse.increments().iter().enumerate() {
        let block: f64 = fine.increments()[j * 4..(j + 1) * 4].iter().sum();
        assert_eq!(*c, block, "coarse increment {j} is not the exact block sum");
    }

    // multilevel measure normalization after real filtering steps
    let alloc = Allocation::with_level(3, rates, &grid, 1.0).unwrap();
    let mut ensemble =
        MultilevelEnsemble::sample_init(&alloc, &init, model.filter_coords(), 3).unwrap();
    let tally = mlenkf::integrate::CostTally::new();
    for (epoch, y) in y_seq.iter().take(3).enumerate() {
        mlenkf_step(&mut ensemble, &model, &grid, &obs, y, epoch, 3, &tally).unwrap();
    }
    assert_eq!(ml_estimate(&ensemble, |_| 1.0), 1.0);

    // replay determinism across thread counts
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap();
        pool.install(|| mlenkf_run(&alloc, &model, &grid, &obs, &y_seq, &init, 3).unwrap())
    };
    let (t1, c1) = run(1);
    let (t4, c4) = run(4);
    assert_eq!(t1.epochs, t4.epochs, "trace depends on thread count");
    assert_eq!(c1.substeps, c4.substeps);

    println!("[acceptance] exact reductions: PASS (L=0 bit-identity over {} epochs with M={members}, coarse sums exact, ml_estimate(1)=1, 1-thread == 4-thread replay)", y_seq.len());
}

/// Criterion 6: the GBM pipeline. The log-space gold standard matches
/// an independently hand-rolled scalar Kalman recursion to 1e-10 over
/// 200 epochs, and the cost-error sweep shows MLEnKF decaying at slope
/// ≤ −0.4 with EnKF in [−0.45, −0.22].
#[test]
fn gbm_pipeline() {
    let problem = Problem::gbm();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let epochs = 200;
    let (_, y_seq) = synthesize(&model, &obs, epochs, 29).unwrap();
    let trace = problem.gold_standard(&y_seq).unwrap();

    // independent scalar recursion in log space: z' = z ± σ²/2 + ξ,
    // observed with variance Γ
    let sig2 = problem.sigma * problem.sigma;
    let (mut m, mut c) = (0.0_f64, 0.0_f64);
    for (epoch, y) in y_seq.iter().enumerate() {
        let predicted_mean = m + if epoch % 2 == 0 {
            sig2 / 2.0
        } else {
            -sig2 / 2.0
        };
        let predicted_cov = c + sig2;
        let k = predicted_cov / (predicted_cov + problem.gamma);
        m = predicted_mean + k * (y[0] - predicted_mean);
        c = (1.0 - k) * predicted_cov;
        let row = &trace.epochs[epoch];
        assert!(
            (row.mean[0] - m).abs() <= 1e-10,
            "gold-standard mean diverges at epoch {epoch}"
        );
        assert!(
            (row.cov.get(0, 0) - c).abs() <= 1e-10,
            "gold-standard covariance diverges at epoch {epoch}"
        );
    }

    let (ml_mean, ml_cov, en_mean, en_cov) = sweep_slopes(problem, epochs, 1..=4, 10);
    for (name, slope) in [("mean", ml_mean), ("cov", ml_cov)] {
        assert!(
            slope <= -0.4,
            "GBM MLEnKF {name} slope {slope:.3} slower than -0.4"
        );
    }
    for (name, slope) in [("mean", en_mean), ("cov", en_cov)] {
        assert!(
            (-0.45..=-0.22).contains(&slope),
            "GBM EnKF {name} slope {slope:.3} outside [-0.45, -0.22]"
        );
    }
    println!(
        "[acceptance] GBM pipeline: PASS (gold standard matches hand recursion to 1e-10 over {epochs} epochs; MLEnKF mean {ml_mean:.3}, cov {ml_cov:.3}; EnKF mean {en_mean:.3}, cov {en_cov:.3})"
    );
}

/// Criterion 7: sample-size allocation reproduces the hand-derived
/// tables exactly, and the top level always keeps at least one pair.
#[test]
fn allocation_arithmetic() {
    let grid = LevelGrid::new(2, 2).unwrap();

    let rates = Rates::new(1.0, 2.0, 1.0).unwrap();
    let alloc = Allocation::with_level(3, rates, &grid, 1.0).unwrap();
    assert_eq!(alloc.m_per_level(), &[102, 41, 16, 7]);

    let rates_eq = Rates::new(1.0, 1.0, 1.0).unwrap();
    let alloc_eq = Allocation::with_level(2, rates_eq, &grid, 1.0).unwrap();
    assert_eq!(alloc_eq.m_per_level(), &[128, 64, 32]);

    for k in 1..=12 {
        let eps = 0.5_f64.powi(k);
        let alloc = Allocation::for_epsilon(eps, rates, &grid, 1.0).unwrap();
        assert!(alloc.m_per_level().iter().all(|&m| m >= 1));
        assert!(*alloc.m_per_level().last().unwrap() >= 1);
    }
    println!("[acceptance] allocation arithmetic: PASS (hand tables match exactly; M_L >= 1 over 12 epsilon dyads)");
}
