//! Cross-filter oracle checks: one ensemble transition against the
//! exact Kalman moments, coupling persistence through updates, and
//! replay determinism of full runs.

use mlenkf::enkf::{enkf_step, sample_cov, sample_mean, Ensemble, Propagation};
use mlenkf::harness::{fit_rate, synthesize, Problem, RatePoint};
use mlenkf::integrate::{CostTally, LevelGrid};
use mlenkf::kalman::{kf_predict, kf_update, GaussianMoments, LinearSignal};
use mlenkf::linalg::SymMatrix;
use mlenkf::models::ou_transition_variance;
use mlenkf::multilevel::{ml_mean, mlenkf_run, mlenkf_step, Allocation, MultilevelEnsemble};

/// One EnKF transition with exact linear propagation must land within
/// Monte Carlo error of the exact Kalman predict/update moments.
#[test]
fn enkf_step_matches_kalman_oracle() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = LevelGrid::new(1, 2).unwrap();
    let members = 100_000;
    let y = vec![0.3];

    let init = GaussianMoments::new(vec![0.5], SymMatrix::scalar(0.09));
    let sig = LinearSignal::scalar((-1.0_f64).exp(), ou_transition_variance(problem.sigma));
    let predicted = kf_predict(&init, &sig).unwrap();
    let (oracle, _) = kf_update(&predicted, &obs, &y).unwrap();

    let mut e = Ensemble::sample_init(&init, members, 0, model.filter_coords(), 13).unwrap();
    let tally = CostTally::new();
    let (mean, cov, _) = enkf_step(
        &mut e,
        &model,
        &grid,
        &obs,
        &y,
        0,
        13,
        Propagation::Exact,
        &tally,
    )
    .unwrap();

    // three Monte Carlo standard errors: sd/sqrt(M) for the mean,
    // sd²·sqrt(2/M) for the scalar variance
    let sd = oracle.cov.as_scalar().sqrt();
    let mean_tol = 3.0 * sd / (members as f64).sqrt();
    let cov_tol = 3.0 * oracle.cov.as_scalar() * (2.0 / members as f64).sqrt();
    let mean_err = (mean[0] - oracle.mean[0]).abs();
    let cov_err = (cov.as_scalar() - oracle.cov.as_scalar()).abs();
    assert!(
        mean_err <= mean_tol,
        "mean error {mean_err:.2e} > {mean_tol:.2e}"
    );
    assert!(
        cov_err <= cov_tol,
        "cov error {cov_err:.2e} > {cov_tol:.2e}"
    );
    assert_eq!(sample_mean(&e)[0], mean[0]);
    assert_eq!(sample_cov(&e).as_scalar(), cov.as_scalar());
}

/// One multilevel transition from a deterministic start must land
/// within its own estimated standard error (plus a discretization
/// allowance) of the exact Kalman update.
#[test]
fn mlenkf_step_matches_kalman_oracle() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = problem.default_grid();
    let rates = problem.default_rates();
    let init = problem.initial_moments();
    let y = vec![0.2];

    let sig = LinearSignal::scalar((-1.0_f64).exp(), ou_transition_variance(problem.sigma));
    let predicted = kf_predict(&init, &sig).unwrap();
    let (oracle, _) = kf_update(&predicted, &obs, &y).unwrap();

    let alloc = Allocation::with_level(7, rates, &grid, 1.0).unwrap();
    let mut e = MultilevelEnsemble::sample_init(&alloc, &init, model.filter_coords(), 31).unwrap();
    let tally = CostTally::new();
    let (mean, _, _) = mlenkf_step(&mut e, &model, &grid, &obs, &y, 0, 31, &tally).unwrap();
    assert_eq!(mean, ml_mean(&e));

    // estimated variance of the telescoped mean: Σ_ℓ Var(diff_ℓ)/M_ℓ
    let mut var = 0.0;
    for (level, slab) in e.levels().iter().enumerate() {
        let m = slab.members() as f64;
        let diffs: Vec<f64> = if level == 0 {
            slab.fine().to_vec()
        } else {
            slab.fine()
                .iter()
                .zip(slab.coarse())
                .map(|(f, c)| f - c)
                .collect()
        };
        let mu = diffs.iter().sum::<f64>() / m;
        let v = diffs.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / m;
        var += v / m;
    }
    let se = var.sqrt();
    let bias_allowance = 1e-3; // weak error of the level-7 solver
    let err = (mean[0] - oracle.mean[0]).abs();
    assert!(
        err <= 3.0 * se + bias_allowance,
        "multilevel mean error {err:.3e} exceeds 3 SE {:.3e} + {bias_allowance:.0e}",
        3.0 * se
    );
}

/// The within-pair coupling must survive measurement updates: after
/// several filtered epochs the pair spread still shrinks with level at
/// close to the strong rate.
#[test]
fn coupling_persists_through_updates() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = problem.default_grid();
    let rates = problem.default_rates();
    let init = problem.initial_moments();
    let (_, y_seq) = synthesize(&model, &obs, 5, 41).unwrap();

    let alloc = Allocation::with_level(5, rates, &grid, 4.0).unwrap();
    let mut e = MultilevelEnsemble::sample_init(&alloc, &init, model.filter_coords(), 41).unwrap();
    let tally = CostTally::new();
    for (epoch, y) in y_seq.iter().enumerate() {
        mlenkf_step(&mut e, &model, &grid, &obs, y, epoch, 41, &tally).unwrap();
    }

    let points: Vec<RatePoint> = e.levels()[1..]
        .iter()
        .enumerate()
        .map(|(idx, slab)| {
            let level = idx + 1;
            let mean_sq = slab
                .fine()
                .iter()
                .zip(slab.coarse())
                .map(|(f, c)| (f - c) * (f - c))
                .sum::<f64>()
                / slab.members() as f64;
            RatePoint {
                x: grid.steps(level) as f64,
                y: mean_sq.sqrt(),
            }
        })
        .collect();
    let slope = fit_rate(&points).unwrap();
    let limit = -rates.beta / 2.0 + 0.3;
    assert!(
        slope <= limit,
        "post-update coupling decays at {slope:.3}, needs <= {limit:.2}"
    );
}

/// Full runs replay bit-exactly under the same master seed and diverge
/// under a different one.
#[test]
fn runs_replay_bit_exactly() {
    let problem = Problem::ou();
    let model = problem.model().unwrap();
    let obs = problem.observation().unwrap();
    let grid = problem.default_grid();
    let init = problem.initial_moments();
    let (_, y_seq) = synthesize(&model, &obs, 12, 8).unwrap();

    let alloc = Allocation::for_epsilon(0.05, problem.default_rates(), &grid, 1.0).unwrap();
    let (a, _) = mlenkf_run(&alloc, &model, &grid, &obs, &y_seq, &init, 8).unwrap();
    let (b, _) = mlenkf_run(&alloc, &model, &grid, &obs, &y_seq, &init, 8).unwrap();
    assert_eq!(a.epochs, b.epochs);
    let (c, _) = mlenkf_run(&alloc, &model, &grid, &obs, &y_seq, &init, 9).unwrap();
    assert_ne!(a.epochs, c.epochs);
}
