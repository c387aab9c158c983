//! Command-line front end: runs the Kalman gold standard, the single-
//! and multilevel ensemble filters, the cost-vs-accuracy benchmark
//! sweep, and the level-decay rate estimator, emitting plot-ready CSV.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mlenkf::config::{parse_config, RunConfig};
use mlenkf::enkf::{enkf_run, size_for_budget, size_for_epsilon, Propagation};
use mlenkf::harness::{
    benchmark, level_decay_table, synthesize, write_benchmark_csv, write_decay_csv,
    write_trace_csv, BenchmarkConfig, DecayRow, RatePoint,
};
use mlenkf::integrate::LevelGrid;
use mlenkf::multilevel::{mlenkf_run, Allocation};

#[derive(Parser)]
#[command(
    name = "mlenkf",
    version,
    about = "Kalman, EnKF, and multilevel EnKF filtering benchmarks",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Exact Kalman gold-standard trace for the configured problem
    Kalman(RunArgs),
    /// Single-level ensemble Kalman filter run (trace CSV)
    Enkf(RunArgs),
    /// Multilevel ensemble Kalman filter run (trace CSV)
    Mlenkf(RunArgs),
    /// Cost-vs-accuracy sweep over both ensemble filters (rows CSV)
    Benchmark(RunArgs),
    /// Coupled level-decay estimates of the weak and strong rates
    Rates(RunArgs),
}

impl Command {
    fn args(&self) -> &RunArgs {
        match self {
            Command::Kalman(a)
            | Command::Enkf(a)
            | Command::Mlenkf(a)
            | Command::Benchmark(a)
            | Command::Rates(a) => a,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::Kalman(_) => "kalman",
            Command::Enkf(_) => "enkf",
            Command::Mlenkf(_) => "mlenkf",
            Command::Benchmark(_) => "benchmark",
            Command::Rates(_) => "rates",
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Flat key/value config file (section.key = value)
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides run.seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV path; stdout when omitted (overrides run.out)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-epoch substep budget; overrides allocation.budget
    #[arg(long, conflicts_with = "epsilon")]
    budget: Option<f64>,
    /// Target accuracy; overrides allocation.epsilon
    #[arg(long)]
    epsilon: Option<f64>,
    /// Optional JSON run-manifest path (config echo + version)
    #[arg(long)]
    manifest: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        // a reader closing stdout early (e.g. `| head`) is not a failure
        Err(mlenkf::Error::Io(e)) if e.kind() == std::io::ErrorKind::BrokenPipe => {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn load_config(args: &RunArgs) -> Result<RunConfig, mlenkf::Error> {
    let text = fs::read_to_string(&args.config)?;
    let mut cfg = parse_config(&text)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out = Some(out.clone());
    }
    if let Some(eps) = args.epsilon {
        cfg.epsilon = Some(eps);
        cfg.budget = None;
    }
    if let Some(budget) = args.budget {
        cfg.budget = Some(budget);
        cfg.epsilon = None;
    }
    Ok(cfg)
}

fn with_output(
    path: Option<&Path>,
    f: impl FnOnce(&mut dyn Write) -> Result<(), mlenkf::Error>,
) -> Result<(), mlenkf::Error> {
    match path {
        Some(p) => {
            let mut file = std::io::BufWriter::new(fs::File::create(p)?);
            f(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn write_manifest(path: &Path, subcommand: &str, cfg: &RunConfig) -> Result<(), mlenkf::Error> {
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "model": cfg.model.as_str(),
        "sigma": cfg.sigma,
        "gamma": cfg.gamma,
        "h": cfg.h,
        "epochs": cfg.epochs,
        "seed": cfg.seed,
        "hierarchy": { "n0": cfg.n0, "nhat": cfg.nhat },
        "rates": { "alpha": cfg.alpha, "beta": cfg.beta, "gamma": cfg.gamma_rate },
        "epsilon": cfg.epsilon,
        "budget": cfg.budget,
        "c_m": cfg.c_m,
    });
    fs::write(
        path,
        format!("{}\n", serde_json::to_string_pretty(&manifest).unwrap()),
    )?;
    Ok(())
}

fn run(command: &Command) -> Result<(), mlenkf::Error> {
    let args = command.args();
    let cfg = load_config(args)?;
    if let Some(path) = &args.manifest {
        write_manifest(path, command.name(), &cfg)?;
    }
    let problem = cfg.problem();
    let model = problem.model()?;
    let obs = problem.observation()?;
    let out = cfg.out.clone();

    match command {
        Command::Kalman(_) => {
            let (_, y_seq) = synthesize(&model, &obs, cfg.epochs, cfg.seed)?;
            let trace = problem.gold_standard(&y_seq)?;
            with_output(out.as_deref(), |w| write_trace_csv(&trace, w))
        }
        Command::Enkf(_) => {
            let (_, y_seq) = synthesize(&model, &obs, cfg.epochs, cfg.seed)?;
            let (members, grid, level) = enkf_sizing(&cfg)?;
            let (trace, cost) = enkf_run(
                &model,
                &grid,
                &obs,
                &y_seq,
                &problem.initial_moments(),
                members,
                level,
                cfg.seed,
                Propagation::Numerical,
            )?;
            eprintln!(
                "enkf: M = {members}, steps = {}, substeps = {}",
                grid.steps(level),
                cost.substeps
            );
            with_output(out.as_deref(), |w| write_trace_csv(&trace, w))
        }
        Command::Mlenkf(_) => {
            cfg.validate_mlenkf_driver()?;
            let grid = cfg.grid()?;
            let rates = cfg.rates()?;
            let alloc = match (cfg.epsilon, cfg.budget) {
                (Some(eps), _) => Allocation::for_epsilon(eps, rates, &grid, cfg.c_m)?,
                (None, Some(budget)) => Allocation::for_budget(budget, rates, &grid, cfg.c_m)?,
                (None, None) => unreachable!("validated above"),
            };
            let (_, y_seq) = synthesize(&model, &obs, cfg.epochs, cfg.seed)?;
            let (trace, cost) = mlenkf_run(
                &alloc,
                &model,
                &grid,
                &obs,
                &y_seq,
                &problem.initial_moments(),
                cfg.seed,
            )?;
            eprintln!(
                "mlenkf: L = {}, M = {:?}, substeps = {}",
                alloc.max_level(),
                alloc.m_per_level(),
                cost.substeps
            );
            with_output(out.as_deref(), |w| write_trace_csv(&trace, w))
        }
        Command::Benchmark(_) => {
            let bench = BenchmarkConfig {
                problem,
                epochs: cfg.epochs,
                grid: cfg.grid()?,
                rates: cfg.rates()?,
                budgets: geometric_budgets(
                    cfg.bench_budget_min,
                    cfg.bench_budget_max,
                    cfg.bench_budget_count,
                )?,
                seeds: (0..cfg.bench_seeds as u64)
                    .map(|k| cfg.seed.wrapping_add(k))
                    .collect(),
                c_m: cfg.c_m,
            };
            let rows = benchmark(&bench)?;
            with_output(out.as_deref(), |w| write_benchmark_csv(&rows, w))
        }
        Command::Rates(_) => {
            let grid = cfg.grid()?;
            let ps = [2.0, 4.0, 8.0];
            let identity = |v: &[f64]| v[0];
            let indicator = |v: &[f64]| if v[0] > 0.1 { 1.0 } else { 0.0 };
            let id_rows = level_decay_table(
                &model,
                &grid,
                &identity,
                cfg.decay_level_max,
                cfg.decay_samples,
                &ps,
                cfg.seed,
            )?;
            let ind_rows = level_decay_table(
                &model,
                &grid,
                &indicator,
                cfg.decay_level_max,
                cfg.decay_samples,
                &ps,
                cfg.seed,
            )?;
            print_decay_summary("identity", &ps, &id_rows);
            print_decay_summary("exceed_0.1", &ps, &ind_rows);
            with_output(out.as_deref(), |w| {
                write_decay_csv("identity", &ps, &id_rows, w)?;
                for (pi, p) in ps.iter().enumerate() {
                    for r in &ind_rows {
                        writeln!(
                            w,
                            "exceed_0.1,{},{},{},{},{}",
                            mlenkf::harness::fmt_real(*p),
                            r.level,
                            r.steps,
                            mlenkf::harness::fmt_real(r.weak_diff),
                            mlenkf::harness::fmt_real(r.coupled_norms[pi])
                        )?;
                    }
                }
                Ok(())
            })
        }
    }
}

fn enkf_sizing(cfg: &RunConfig) -> Result<(usize, LevelGrid, usize), mlenkf::Error> {
    if let (Some(members), Some(steps)) = (cfg.enkf_members, cfg.enkf_steps) {
        return Ok((members, LevelGrid::new(steps, cfg.nhat)?, 0));
    }
    if let Some(budget) = cfg.budget {
        let (members, steps) = size_for_budget(budget, cfg.c_m)?;
        return Ok((members, LevelGrid::new(steps, cfg.nhat)?, 0));
    }
    if let Some(eps) = cfg.epsilon {
        let grid = cfg.grid()?;
        let (members, level) = size_for_epsilon(eps, cfg.c_m, cfg.alpha, &grid)?;
        return Ok((members, grid, level));
    }
    Err(mlenkf::Error::InvalidInput(
        "enkf needs allocation.budget, allocation.epsilon, or enkf.members + enkf.steps".into(),
    ))
}

fn geometric_budgets(min: f64, max: f64, count: usize) -> Result<Vec<f64>, mlenkf::Error> {
    // `!(min >= 1.0)` also rejects NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    if !(min >= 1.0) || max < min || count < 1 {
        return Err(mlenkf::Error::InvalidInput(
            "benchmark budgets need 1 <= budget_min <= budget_max and a positive count".into(),
        ));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let ratio = (max / min).powf(1.0 / (count - 1) as f64);
    Ok((0..count).map(|k| min * ratio.powi(k as i32)).collect())
}

fn print_decay_summary(observable: &str, ps: &[f64], rows: &[DecayRow]) {
    let weak: Vec<RatePoint> = rows
        .iter()
        .map(|r| RatePoint {
            x: r.steps as f64,
            y: r.weak_diff,
        })
        .collect();
    match mlenkf::harness::fit_rate(&weak) {
        Ok(slope) => eprintln!("{observable}: alpha_hat = {:.3}", -slope),
        Err(_) => eprintln!("{observable}: alpha_hat unavailable (non-positive weak differences)"),
    }
    for (pi, p) in ps.iter().enumerate() {
        let strong: Vec<RatePoint> = rows
            .iter()
            .map(|r| RatePoint {
                x: r.steps as f64,
                y: r.coupled_norms[pi],
            })
            .collect();
        match mlenkf::harness::fit_rate(&strong) {
            Ok(slope) => eprintln!("{observable}: beta_hat(p={p}) = {:.3}", -2.0 * slope),
            Err(_) => eprintln!("{observable}: beta_hat(p={p}) unavailable"),
        }
    }
}
