//! `key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to the defaults of [`ExperimentConfig`]; unknown or repeated keys are
//! errors. [`render`] writes every key in a fixed order, and parsing the
//! rendered text gives back the same settings.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::str::FromStr;

use opo_core::diffopt::BlackboxConfig;
use opo_core::solvers::Neighborhood;
use opo_core::training::{ExperimentConfig, LossMode, PiMode, WeightMode};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown config key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: config key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: invalid value `{value}` for `{key}`: {reason}")]
    Value {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Experiment settings plus CLI-only knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub experiment: ExperimentConfig,
    /// Number of best random-search seeds kept as warm starts.
    pub top: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            top: 4,
        }
    }
}

pub const KEYS: &[&str] = &[
    "k",
    "h",
    "d_model",
    "blocks",
    "heads",
    "flatten_class_token",
    "pi_init_lo",
    "pi_init_hi",
    "lr_w",
    "lr_pi",
    "batch_size",
    "patience",
    "max_epochs",
    "mask_ratio",
    "loss",
    "pi",
    "w",
    "seed",
    "search_seeds",
    "top",
    "lambda",
    "sigma",
    "samples",
    "pfyl_seed",
    "solver_budget_ms",
    "neighborhood",
    "num_classes",
    "train_size",
    "val_size",
    "test_size",
    "data_seed",
];

pub fn parse_loss(v: &str) -> Result<LossMode, String> {
    match v.to_ascii_lowercase().as_str() {
        "pfl" => Ok(LossMode::Pfl),
        "dfl" => Ok(LossMode::Dfl),
        _ => Err("expected `pfl` or `dfl`".into()),
    }
}

pub fn parse_pi(v: &str) -> Result<PiMode, String> {
    match v.to_ascii_lowercase().as_str() {
        "fixed" => Ok(PiMode::Fixed),
        "learnt" | "learned" => Ok(PiMode::Learnt),
        _ => Err("expected `fixed` or `learnt`".into()),
    }
}

pub fn parse_w(v: &str) -> Result<WeightMode, String> {
    match v.to_ascii_lowercase().as_str() {
        "finetune" | "fine-tune" => Ok(WeightMode::Finetune),
        "joint" => Ok(WeightMode::Joint),
        _ => Err("expected `finetune` or `joint`".into()),
    }
}

pub fn loss_name(m: LossMode) -> &'static str {
    match m {
        LossMode::Pfl => "pfl",
        LossMode::Dfl => "dfl",
    }
}

pub fn pi_name(m: PiMode) -> &'static str {
    match m {
        PiMode::Fixed => "fixed",
        PiMode::Learnt => "learnt",
    }
}

pub fn w_name(m: WeightMode) -> &'static str {
    match m {
        WeightMode::Finetune => "finetune",
        WeightMode::Joint => "joint",
    }
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| e.to_string())
}

fn boolean(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

fn set(s: &mut Settings, key: &str, v: &str) -> Result<(), String> {
    let e = &mut s.experiment;
    match key {
        "k" => e.k = num(v)?,
        "h" => e.h = num(v)?,
        "d_model" => e.d_model = num(v)?,
        "blocks" => e.blocks = num(v)?,
        "heads" => e.heads = num(v)?,
        "flatten_class_token" => e.flatten_class_token = boolean(v)?,
        "pi_init_lo" => e.pi_init.0 = num(v)?,
        "pi_init_hi" => e.pi_init.1 = num(v)?,
        "lr_w" => e.lr_w = num(v)?,
        "lr_pi" => e.lr_pi = num(v)?,
        "batch_size" => e.batch_size = num(v)?,
        "patience" => e.patience = num(v)?,
        "max_epochs" => e.max_epochs = num(v)?,
        "mask_ratio" => e.mask_ratio = num(v)?,
        "loss" => e.loss = parse_loss(v)?,
        "pi" => e.pi_mode = parse_pi(v)?,
        "w" => e.w_mode = parse_w(v)?,
        "seed" => e.seed = num(v)?,
        "search_seeds" => e.search_seeds = num(v)?,
        "top" => s.top = num(v)?,
        "lambda" => e.blackbox = BlackboxConfig::new(num(v)?).map_err(|x| x.to_string())?,
        "sigma" => e.pfyl.sigma = num(v)?,
        "samples" => e.pfyl.num_samples = num(v)?,
        "pfyl_seed" => e.pfyl.seed = num(v)?,
        "solver_budget_ms" => e.solver_budget_ms = num(v)?,
        "neighborhood" => {
            e.neighborhood = match v {
                "4" => Neighborhood::Four,
                "8" => Neighborhood::Eight,
                _ => return Err("expected 4 or 8".into()),
            }
        }
        "num_classes" => e.num_classes = num(v)?,
        "train_size" => e.train_size = num(v)?,
        "val_size" => e.val_size = num(v)?,
        "test_size" => e.test_size = num(v)?,
        "data_seed" => e.data_seed = num(v)?,
        _ => unreachable!("key list and setter agree"),
    }
    Ok(())
}

pub fn parse(text: &str) -> Result<Settings, ConfigError> {
    let mut s = Settings::default();
    let mut seen = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line,
            text: body.to_string(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
            });
        }
        set(&mut s, key, value).map_err(|reason| ConfigError::Value {
            line,
            key: key.to_string(),
            value: value.to_string(),
            reason,
        })?;
    }
    s.experiment
        .validate()
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    if s.top == 0 {
        return Err(ConfigError::Invalid("top must be at least 1".into()));
    }
    Ok(s)
}

/// Every key with its value, one per line, in [`KEYS`] order.
pub fn render(s: &Settings) -> String {
    let e = &s.experiment;
    let mut out = String::new();
    for key in KEYS {
        let v = match *key {
            "k" => e.k.to_string(),
            "h" => e.h.to_string(),
            "d_model" => e.d_model.to_string(),
            "blocks" => e.blocks.to_string(),
            "heads" => e.heads.to_string(),
            "flatten_class_token" => e.flatten_class_token.to_string(),
            "pi_init_lo" => e.pi_init.0.to_string(),
            "pi_init_hi" => e.pi_init.1.to_string(),
            "lr_w" => e.lr_w.to_string(),
            "lr_pi" => e.lr_pi.to_string(),
            "batch_size" => e.batch_size.to_string(),
            "patience" => e.patience.to_string(),
            "max_epochs" => e.max_epochs.to_string(),
            "mask_ratio" => e.mask_ratio.to_string(),
            "loss" => loss_name(e.loss).into(),
            "pi" => pi_name(e.pi_mode).into(),
            "w" => w_name(e.w_mode).into(),
            "seed" => e.seed.to_string(),
            "search_seeds" => e.search_seeds.to_string(),
            "top" => s.top.to_string(),
            "lambda" => e.blackbox.lambda.to_string(),
            "sigma" => e.pfyl.sigma.to_string(),
            "samples" => e.pfyl.num_samples.to_string(),
            "pfyl_seed" => e.pfyl.seed.to_string(),
            "solver_budget_ms" => e.solver_budget_ms.to_string(),
            "neighborhood" => match e.neighborhood {
                Neighborhood::Four => "4".into(),
                Neighborhood::Eight => "8".into(),
            },
            "num_classes" => e.num_classes.to_string(),
            "train_size" => e.train_size.to_string(),
            "val_size" => e.val_size.to_string(),
            "test_size" => e.test_size.to_string(),
            "data_seed" => e.data_seed.to_string(),
            _ => unreachable!(),
        };
        let _ = writeln!(out, "{key} = {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_comments() {
        let s = parse("# desk scale\n\nk = 4 # grid\nh = 3\nloss = dfl\n").unwrap();
        assert_eq!(s.experiment.k, 4);
        assert_eq!(s.experiment.h, 3);
        assert_eq!(s.experiment.loss, LossMode::Dfl);
        assert_eq!(s.experiment.lr_w, 3e-4);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse("lr_Wx = 0.1").unwrap_err();
        assert!(err.to_string().contains("lr_Wx"), "{err}");
        assert!(matches!(err, ConfigError::UnknownKey { line: 1, .. }));
    }

    #[test]
    fn rejects_bad_values_and_repeats() {
        assert!(matches!(parse("k = six"), Err(ConfigError::Value { .. })));
        assert!(matches!(parse("k = 4\nk = 5"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(parse("just words"), Err(ConfigError::Syntax { .. })));
        assert!(matches!(parse("h = 36"), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn render_round_trips() {
        let mut s = Settings::default();
        s.experiment.lr_pi = 7e-4;
        s.experiment.loss = LossMode::Dfl;
        s.experiment.pi_mode = PiMode::Learnt;
        s.experiment.neighborhood = Neighborhood::Four;
        s.top = 3;
        assert_eq!(parse(&render(&s)).unwrap(), s);
    }
}
