//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::cluster::{ClusteringConfig, InitPolicy};
use crate::distill::{LossWeights, DEFAULT_TAU_S, DEFAULT_TAU_T};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitPolicyName {
    TopK,
    Multinomial,
}

impl InitPolicyName {
    pub fn as_str(self) -> &'static str {
        match self {
            InitPolicyName::TopK => "top_k",
            InitPolicyName::Multinomial => "multinomial",
        }
    }
}

impl FromStr for InitPolicyName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "top_k" => Ok(InitPolicyName::TopK),
            "multinomial" => Ok(InitPolicyName::Multinomial),
            other => Err(format!("unknown init_policy {other:?} (expected top_k or multinomial)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub k_start: usize,
    pub lambda: f64,
    pub lambda_pos: f64,
    pub tau_t: f64,
    pub tau_s: f64,
    pub alpha: f64,
    pub init_policy: InitPolicyName,
    pub seed: u64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let c = ClusteringConfig::default();
        Self {
            k_start: c.k_start,
            lambda: c.lambda,
            lambda_pos: c.lambda_pos,
            tau_t: DEFAULT_TAU_T,
            tau_s: DEFAULT_TAU_S,
            alpha: LossWeights::default().alpha,
            init_policy: InitPolicyName::TopK,
            seed: 0,
            tol: c.tol,
            max_iter: c.max_iter,
        }
    }
}

pub const KEYS: [&str; 10] = [
    "k_start",
    "lambda",
    "lambda_pos",
    "tau_t",
    "tau_s",
    "alpha",
    "init_policy",
    "seed",
    "tol",
    "max_iter",
];

fn parse_value<T: FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Parse {
        line,
        msg: format!("{key}: {e}"),
    })
}

impl RunConfig {
    /// Parses a config document. Blank lines and `#` comments are skipped;
    /// missing keys keep their defaults; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected key = value, found {body:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let known = KEYS.iter().find(|k| **k == key).ok_or_else(|| Error::Parse {
                line,
                msg: format!("unknown key {key:?}"),
            })?;
            if seen.contains(known) {
                return Err(Error::Parse {
                    line,
                    msg: format!("duplicate key {key:?}"),
                });
            }
            seen.push(known);
            match key {
                "k_start" => cfg.k_start = parse_value(line, key, value)?,
                "lambda" => cfg.lambda = parse_value(line, key, value)?,
                "lambda_pos" => cfg.lambda_pos = parse_value(line, key, value)?,
                "tau_t" => cfg.tau_t = parse_value(line, key, value)?,
                "tau_s" => cfg.tau_s = parse_value(line, key, value)?,
                "alpha" => cfg.alpha = parse_value(line, key, value)?,
                "init_policy" => cfg.init_policy = parse_value(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "tol" => cfg.tol = parse_value(line, key, value)?,
                "max_iter" => cfg.max_iter = parse_value(line, key, value)?,
                _ => unreachable!("key list checked above"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau_t", self.tau_t), ("tau_s", self.tau_s)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        LossWeights::new(self.alpha)?;
        if self.k_start < 2 {
            return Err(Error::Config(format!(
                "k_start must be at least 2, got {}",
                self.k_start
            )));
        }
        if !(self.lambda_pos.is_finite() && self.lambda_pos >= 0.0) {
            return Err(Error::Config(format!(
                "lambda_pos must be nonnegative, got {}",
                self.lambda_pos
            )));
        }
        self.clustering().sinkhorn_params().validate()
    }

    pub fn clustering(&self) -> ClusteringConfig {
        ClusteringConfig {
            k_start: self.k_start,
            lambda: self.lambda,
            lambda_pos: self.lambda_pos,
            init: match self.init_policy {
                InitPolicyName::TopK => InitPolicy::TopK,
                InitPolicyName::Multinomial => InitPolicy::Multinomial { seed: self.seed },
            },
            tol: self.tol,
            max_iter: self.max_iter,
            ..ClusteringConfig::default()
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha }
    }

    /// Canonical text form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "k_start = {}", self.k_start);
        let _ = writeln!(s, "lambda = {}", self.lambda);
        let _ = writeln!(s, "lambda_pos = {}", self.lambda_pos);
        let _ = writeln!(s, "tau_t = {}", self.tau_t);
        let _ = writeln!(s, "tau_s = {}", self.tau_s);
        let _ = writeln!(s, "alpha = {}", self.alpha);
        let _ = writeln!(s, "init_policy = {}", self.init_policy.as_str());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "tol = {}", self.tol);
        let _ = writeln!(s, "max_iter = {}", self.max_iter);
        s
    }
}
