//! Flat key/value run configuration.
//!
//! The format is `section.key = value`, one setting per line, with `#`
//! comments and UTF-8 text. Unknown keys are rejected and every
//! constraint violation names the offending key and line, so a typo
//! fails loudly instead of silently falling back to a default.
//!
//! Only `model.type` is required; everything else defaults to the
//! experiment parameters of the chosen test problem.

use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::harness::{ModelKind, Problem};
use crate::integrate::LevelGrid;
use crate::multilevel::Rates;

/// A validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub sigma: f64,
    pub gamma: f64,
    pub h: f64,
    pub epochs: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub n0: usize,
    pub nhat: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma_rate: f64,
    pub epsilon: Option<f64>,
    pub budget: Option<f64>,
    pub c_m: f64,
    /// EnKF ensemble size / step count when given explicitly instead of
    /// derived from a budget.
    pub enkf_members: Option<usize>,
    pub enkf_steps: Option<usize>,
    pub bench_budget_min: f64,
    pub bench_budget_max: f64,
    pub bench_budget_count: usize,
    pub bench_seeds: usize,
    pub decay_samples: usize,
    pub decay_level_max: usize,
}

impl RunConfig {
    pub fn problem(&self) -> Problem {
        Problem {
            kind: self.model,
            sigma: self.sigma,
            gamma: self.gamma,
            h: self.h,
        }
    }

    pub fn grid(&self) -> Result<LevelGrid> {
        LevelGrid::new(self.n0, self.nhat)
    }

    pub fn rates(&self) -> Result<Rates> {
        Rates::new(self.alpha, self.beta, self.gamma_rate)
    }

    /// A multilevel run needs exactly one driver, epsilon or budget
    /// (flags may have filled one in after parsing).
    pub fn validate_mlenkf_driver(&self) -> Result<()> {
        match (self.epsilon, self.budget) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            (None, None) => Err(Error::invalid(
                "mlenkf needs exactly one of allocation.epsilon or allocation.budget (or the --epsilon/--budget flag)",
            )),
            (Some(_), Some(_)) => Err(Error::invalid(
                "allocation.epsilon and allocation.budget are mutually exclusive",
            )),
        }
    }
}

fn err_at(line: usize, message: impl Into<String>) -> Error {
    Error::Config {
        line,
        message: message.into(),
    }
}

struct RawValue<'a> {
    text: &'a str,
    line: usize,
}

/// Parses and validates a flat-key config document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut entries: Vec<(&str, RawValue)> = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw_line.find('#') {
            Some(pos) => &raw_line[..pos],
            None => raw_line,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err_at(line_no, format!("expected `key = value`, got `{line}`")))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(err_at(line_no, "empty key"));
        }
        if value.is_empty() {
            return Err(err_at(line_no, format!("key `{key}` has no value")));
        }
        if entries.iter().any(|(k, _)| *k == key) {
            return Err(err_at(line_no, format!("duplicate key `{key}`")));
        }
        entries.push((
            key,
            RawValue {
                text: value,
                line: line_no,
            },
        ));
    }

    let take = |key: &str| -> Option<&RawValue> {
        entries.iter().find(|(k, _)| *k == key).map(|(_, v)| v)
    };
    let parse_f64 =
        |key: &str| -> Result<Option<f64>> {
            match take(key) {
                None => Ok(None),
                Some(v) => v.text.parse::<f64>().map(Some).map_err(|_| {
                    err_at(v.line, format!("key `{key}`: `{}` is not a number", v.text))
                }),
            }
        };
    let parse_usize = |key: &str| -> Result<Option<usize>> {
        match take(key) {
            None => Ok(None),
            Some(v) => v.text.parse::<usize>().map(Some).map_err(|_| {
                err_at(
                    v.line,
                    format!("key `{key}`: `{}` is not a non-negative integer", v.text),
                )
            }),
        }
    };
    let parse_u64 = |key: &str| -> Result<Option<u64>> {
        match take(key) {
            None => Ok(None),
            Some(v) => v.text.parse::<u64>().map(Some).map_err(|_| {
                err_at(
                    v.line,
                    format!("key `{key}`: `{}` is not a 64-bit integer", v.text),
                )
            }),
        }
    };

    const KNOWN: &[&str] = &[
        "model.type",
        "model.sigma",
        "obs.gamma",
        "obs.h",
        "run.epochs",
        "run.seed",
        "run.out",
        "hierarchy.n0",
        "hierarchy.nhat",
        "rates.alpha",
        "rates.beta",
        "rates.gamma",
        "allocation.epsilon",
        "allocation.budget",
        "allocation.c_m",
        "enkf.members",
        "enkf.steps",
        "benchmark.budget_min",
        "benchmark.budget_max",
        "benchmark.budget_count",
        "benchmark.seeds",
        "decay.samples",
        "decay.level_max",
    ];
    for (key, v) in &entries {
        if !KNOWN.contains(key) {
            return Err(err_at(v.line, format!("unknown key `{key}`")));
        }
    }

    let model_raw =
        take("model.type").ok_or_else(|| err_at(0, "missing required key `model.type`"))?;
    let model = match model_raw.text {
        "ou" => ModelKind::Ou,
        "gbm" => ModelKind::Gbm,
        other => {
            return Err(err_at(
                model_raw.line,
                format!("key `model.type`: expected `ou` or `gbm`, got `{other}`"),
            ))
        }
    };
    let defaults = match model {
        ModelKind::Ou => Problem::ou(),
        ModelKind::Gbm => Problem::gbm(),
    };
    let default_rates = defaults.default_rates();
    let default_grid = defaults.default_grid();

    let check_positive = |key: &str, value: f64| -> Result<f64> {
        if value > 0.0 {
            Ok(value)
        } else {
            let line = take(key).map(|v| v.line).unwrap_or(0);
            Err(err_at(
                line,
                format!("key `{key}` must be positive, got {value}"),
            ))
        }
    };

    let sigma = check_positive(
        "model.sigma",
        parse_f64("model.sigma")?.unwrap_or(defaults.sigma),
    )?;
    let gamma = check_positive(
        "obs.gamma",
        parse_f64("obs.gamma")?.unwrap_or(defaults.gamma),
    )?;
    let h = parse_f64("obs.h")?.unwrap_or(defaults.h);
    let epochs = parse_usize("run.epochs")?.unwrap_or_else(|| defaults.default_epochs());
    let seed = parse_u64("run.seed")?.unwrap_or(0);
    let out = take("run.out").map(|v| PathBuf::from(v.text));
    let n0 = parse_usize("hierarchy.n0")?.unwrap_or(default_grid.n0());
    let nhat = parse_usize("hierarchy.nhat")?.unwrap_or(default_grid.nhat());
    let alpha = check_positive(
        "rates.alpha",
        parse_f64("rates.alpha")?.unwrap_or(default_rates.alpha),
    )?;
    let beta = check_positive(
        "rates.beta",
        parse_f64("rates.beta")?.unwrap_or(default_rates.beta),
    )?;
    let gamma_rate = check_positive(
        "rates.gamma",
        parse_f64("rates.gamma")?.unwrap_or(default_rates.gamma),
    )?;
    let epsilon = parse_f64("allocation.epsilon")?
        .map(|v| check_positive("allocation.epsilon", v))
        .transpose()?;
    let budget = parse_f64("allocation.budget")?
        .map(|v| check_positive("allocation.budget", v))
        .transpose()?;
    let c_m = check_positive(
        "allocation.c_m",
        parse_f64("allocation.c_m")?.unwrap_or(1.0),
    )?;
    let enkf_members = parse_usize("enkf.members")?;
    let enkf_steps = parse_usize("enkf.steps")?;
    let bench_budget_min = parse_f64("benchmark.budget_min")?.unwrap_or(32.0);
    let bench_budget_max = parse_f64("benchmark.budget_max")?.unwrap_or(1.0e6);
    let bench_budget_count = parse_usize("benchmark.budget_count")?.unwrap_or(8);
    let bench_seeds = parse_usize("benchmark.seeds")?.unwrap_or(10);
    let decay_samples = parse_usize("decay.samples")?.unwrap_or(100_000);
    let decay_level_max = parse_usize("decay.level_max")?.unwrap_or(6);

    let config = RunConfig {
        model,
        sigma,
        gamma,
        h,
        epochs,
        seed,
        out,
        n0,
        nhat,
        alpha,
        beta,
        gamma_rate,
        epsilon,
        budget,
        c_m,
        enkf_members,
        enkf_steps,
        bench_budget_min,
        bench_budget_max,
        bench_budget_count,
        bench_seeds,
        decay_samples,
        decay_level_max,
    };
    // surface grid/rate constraint violations with the config, not at
    // first use
    config.grid().map_err(|e| err_at(0, e.to_string()))?;
    config.rates().map_err(|e| err_at(0, e.to_string()))?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_ou_experiment_defaults() {
        let cfg = parse_config("model.type = ou\nmodel.sigma = 0.5\nobs.gamma = 0.04\n").unwrap();
        assert_eq!(cfg.model, ModelKind::Ou);
        assert_eq!(cfg.sigma, 0.5);
        assert_eq!(cfg.gamma, 0.04);
        assert_eq!(cfg.epochs, 100);
        assert_eq!((cfg.n0, cfg.nhat), (2, 2));
        assert_eq!((cfg.alpha, cfg.beta, cfg.gamma_rate), (1.0, 2.0, 1.0));
    }

    #[test]
    fn gbm_defaults_differ() {
        let cfg = parse_config("model.type = gbm\n").unwrap();
        assert_eq!(cfg.sigma, 0.25);
        assert_eq!(cfg.gamma, 0.0625);
        assert_eq!(cfg.epochs, 200);
        assert_eq!(cfg.n0, 8);
        assert_eq!((cfg.alpha, cfg.beta, cfg.gamma_rate), (1.0, 1.0, 1.0));
    }

    #[test]
    fn missing_model_type_is_named() {
        let err = parse_config("model.sigma = 0.5\n").unwrap_err();
        assert!(err.to_string().contains("model.type"), "{err}");
    }

    #[test]
    fn negative_gamma_is_a_constraint_violation() {
        let err = parse_config("model.type = ou\nobs.gamma = -1\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("obs.gamma"), "{text}");
        assert!(text.contains("line 2"), "{text}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_line() {
        let err = parse_config("model.type = ou\nmodle.sigma = 0.5\n").unwrap_err();
        let text = err.to_string();
        assert!(text.contains("unknown key"), "{text}");
        assert!(text.contains("line 2"), "{text}");
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let cfg = parse_config("# experiment\n\nmodel.type = ou # trailing note\n").unwrap();
        assert_eq!(cfg.model, ModelKind::Ou);
    }

    #[test]
    fn malformed_line_is_reported() {
        let err = parse_config("model.type = ou\njust words\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let err = parse_config("model.type = ou\nmodel.type = gbm\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn epsilon_budget_exclusivity() {
        let both =
            parse_config("model.type = ou\nallocation.epsilon = 0.1\nallocation.budget = 100\n")
                .unwrap();
        assert!(both.validate_mlenkf_driver().is_err());
        let neither = parse_config("model.type = ou\n").unwrap();
        assert!(neither.validate_mlenkf_driver().is_err());
        let one = parse_config("model.type = ou\nallocation.epsilon = 0.1\n").unwrap();
        assert!(one.validate_mlenkf_driver().is_ok());
    }
}
