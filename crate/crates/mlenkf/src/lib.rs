//! Multilevel ensemble Kalman filtering for SDE state-space models.
//!
//! This crate implements three filters for discretely observed SDE
//! signals, plus the machinery to benchmark them against each other:
//!
//! * [`kalman`] — the exact Kalman filter for linear-Gaussian models,
//!   used as the gold standard;
//! * [`enkf`] — the single-level ensemble Kalman filter with perturbed
//!   observations;
//! * [`multilevel`] — the multilevel EnKF, whose moment estimators are
//!   telescoping sums over a hierarchy of integrator resolutions with
//!   pairwise-coupled fine/coarse particles.
//!
//! Supporting layers: [`linalg`] (small symmetric eigen/Cholesky work
//! and PSD truncation), [`stochastic`] (keyed, replayable noise streams
//! and coupled Brownian paths), [`models`] (Ornstein–Uhlenbeck and
//! drift-alternating geometric Brownian motion with exact transitions),
//! [`integrate`] (the Ψ^ℓ solution-operator hierarchy), [`harness`]
//! (synthetic data, RMSE, rate fitting, benchmark sweeps), and
//! [`config`] (flat key/value run configuration).
//!
//! Everything is deterministic given a master seed: noise streams are
//! keyed by (epoch, level, particle, role), so results do not depend on
//! thread count or scheduling.
//!
//! ```
//! use mlenkf::harness::{synthesize, Problem, rmse, TraceField};
//! use mlenkf::multilevel::{mlenkf_run, Allocation};
//!
//! let problem = Problem::ou();
//! let model = problem.model()?;
//! let obs = problem.observation()?;
//! let grid = problem.default_grid();
//! let (_truth, ys) = synthesize(&model, &obs, 20, 7)?;
//!
//! let alloc = Allocation::for_epsilon(0.05, problem.default_rates(), &grid, 1.0)?;
//! let (trace, cost) = mlenkf_run(&alloc, &model, &grid, &obs, &ys, &problem.initial_moments(), 7)?;
//! let gold = problem.gold_standard(&ys)?;
//! let err = rmse(&trace, &gold, TraceField::Mean)?;
//! assert!(err.is_finite() && cost.substeps > 0);
//! # Ok::<(), mlenkf::Error>(())
//! ```

// validations use `!(x > 0.0)` deliberately so NaN is rejected too, and
// the dense matrix kernels index by (i, j, k) on purpose
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]
#![allow(clippy::type_complexity)]

pub mod config;
pub mod enkf;
mod error;
pub mod harness;
pub mod integrate;
pub mod kalman;
pub mod linalg;
pub mod models;
pub mod multilevel;
pub mod stochastic;

pub use error::{Error, Result};
