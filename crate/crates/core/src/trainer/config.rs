use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use crate::error::{HcwError, Result};
use crate::qopt::Hierarchy;
use crate::sc_loss::ScLossConfig;

/// The three ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Conventional concept whitening: no child terms, no semantic loss.
    PlainCw,
    /// Hierarchical alignment objective.
    Hastcw,
    /// Hierarchical alignment plus the semantic-constraint loss.
    HastcwSc,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::PlainCw => "plain_cw",
            Self::Hastcw => "hastcw",
            Self::HastcwSc => "hastcw_sc",
        }
    }

    pub fn hierarchy(self) -> Hierarchy {
        match self {
            Self::PlainCw => Hierarchy::Flat,
            Self::Hastcw | Self::HastcwSc => Hierarchy::Tree,
        }
    }

    pub fn uses_sc_loss(self) -> bool {
        self == Self::HastcwSc
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainMode {
    type Err = HcwError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain_cw" => Ok(Self::PlainCw),
            "hastcw" => Ok(Self::Hastcw),
            "hastcw_sc" => Ok(Self::HastcwSc),
            other => Err(HcwError::validation(format!(
                "unknown mode {other:?} (expected plain_cw, hastcw or hastcw_sc)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Mini-batches between rotation updates.
    pub t_thre: usize,
    pub ema_decay: f64,
    pub eps: f64,
    pub mode: TrainMode,
    pub seed: u64,
    pub sc: ScLossConfig,
    pub pool_window: usize,
    pub latent_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            lr: 0.01,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            t_thre: 30,
            ema_decay: crate::hcw::DEFAULT_EMA_DECAY,
            eps: crate::linalg::DEFAULT_EPS,
            mode: TrainMode::HastcwSc,
            seed: 0,
            sc: ScLossConfig::default(),
            pool_window: crate::hcw::DEFAULT_POOL_WINDOW,
            latent_dim: 32,
        }
    }
}

pub const CONFIG_KEYS: [&str; 18] = [
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "t_thre",
    "ema_decay",
    "eps",
    "mode",
    "seed",
    "sc.alpha",
    "sc.beta",
    "sc.margin_brother",
    "sc.margin_cousin",
    "sc.reduction",
    "pool_window",
    "latent_dim",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| HcwError::validation(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    /// Sets one key. Unknown keys are validation errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "beta1" => self.beta1 = parse_value(key, value)?,
            "beta2" => self.beta2 = parse_value(key, value)?,
            "t_thre" => self.t_thre = parse_value(key, value)?,
            "ema_decay" => self.ema_decay = parse_value(key, value)?,
            "eps" => self.eps = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "sc.alpha" => self.sc.alpha = parse_value(key, value)?,
            "sc.beta" => self.sc.beta = parse_value(key, value)?,
            "sc.margin_brother" => self.sc.margin_brother = parse_value(key, value)?,
            "sc.margin_cousin" => self.sc.margin_cousin = parse_value(key, value)?,
            "sc.reduction" => self.sc.reduction = value.parse()?,
            "pool_window" => self.pool_window = parse_value(key, value)?,
            "latent_dim" => self.latent_dim = parse_value(key, value)?,
            other => {
                return Err(HcwError::validation(format!(
                    "unknown config key {other:?}"
                )))
            }
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; repeating a key is an error.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = BTreeSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                HcwError::validation(format!("config line {}: expected key = value", no + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(HcwError::validation(format!(
                    "config line {}: duplicate key {key}",
                    no + 1
                )));
            }
            cfg.set(key, value)
                .map_err(|e| HcwError::validation(format!("config line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn value_of(&self, key: &str) -> String {
        match key {
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "t_thre" => self.t_thre.to_string(),
            "ema_decay" => self.ema_decay.to_string(),
            "eps" => self.eps.to_string(),
            "mode" => self.mode.to_string(),
            "seed" => self.seed.to_string(),
            "sc.alpha" => self.sc.alpha.to_string(),
            "sc.beta" => self.sc.beta.to_string(),
            "sc.margin_brother" => self.sc.margin_brother.to_string(),
            "sc.margin_cousin" => self.sc.margin_cousin.to_string(),
            "sc.reduction" => self.sc.reduction.to_string(),
            "pool_window" => self.pool_window.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            _ => String::new(),
        }
    }

    /// Every key, one `key = value` line each; parses back to `self`.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k} = {}\n", self.value_of(k)))
            .collect()
    }

    /// Single-line summary used in report headers.
    pub fn summary(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|k| format!("{k}={}", self.value_of(k)))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(HcwError::validation(msg));
        if self.t_thre < 1 {
            return fail("t_thre must be >= 1".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return fail(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            ));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return fail(format!("eps must be >= 0, got {}", self.eps));
        }
        if self.pool_window < 1 {
            return fail("pool_window must be >= 1".into());
        }
        if self.latent_dim < 1 {
            return fail("latent_dim must be >= 1".into());
        }
        self.sc.validate()
    }
}
