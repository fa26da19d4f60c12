//! Experiment configuration: flat `key=value` text, one key per line,
//! `#` comments. No schema language; unknown keys are rejected so typos
//! surface as config errors instead of silently using defaults.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("missing config key `{0}`")]
    MissingKey(&'static str),
    #[error("config key `{key}` has invalid value `{value}`: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config line {line} is not `key=value`: `{text}`")]
    BadLine { line: usize, text: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    SoftEntropy,
    Compressibility,
}

impl LossMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossMode::SoftEntropy => "soft_entropy",
            LossMode::Compressibility => "compressibility",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "soft_entropy" => Some(LossMode::SoftEntropy),
            "compressibility" => Some(LossMode::Compressibility),
            _ => None,
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How per-site entropy losses combine into the network regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerWeighting {
    /// Plain sum over sites.
    Uniform,
    /// Sites weighted by their share of activation elements.
    BySize,
}

impl LayerWeighting {
    pub fn as_str(&self) -> &'static str {
        match self {
            LayerWeighting::Uniform => "uniform",
            LayerWeighting::BySize => "by_size",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub loss_mode: LossMode,
    pub bits: u8,
    pub temperature: f64,
    pub subsample_fraction: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub arch: String,
    // Optional keys with defaults.
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub synthetic_n: usize,
    pub lambda_grid: Vec<f64>,
    pub loss_modes: Vec<LossMode>,
    pub layer_weighting: LayerWeighting,
    pub robustness_runs: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 0.1,
            loss_mode: LossMode::SoftEntropy,
            bits: 4,
            temperature: 10.0,
            subsample_fraction: 0.25,
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 4e-5,
            epochs: 10,
            batch_size: 64,
            seed: 1,
            arch: "toy-cnn-v1".to_string(),
            pretrain_epochs: 10,
            pretrain_lr: 0.05,
            synthetic_n: 5000,
            lambda_grid: vec![0.0, 0.01, 0.03, 0.1, 0.3],
            loss_modes: vec![LossMode::SoftEntropy, LossMode::Compressibility],
            layer_weighting: LayerWeighting::Uniform,
            robustness_runs: 5,
        }
    }
}

const REQUIRED_KEYS: &[&str] = &[
    "lambda",
    "loss_mode",
    "bits",
    "temperature",
    "subsample_fraction",
    "lr",
    "momentum",
    "weight_decay",
    "epochs",
    "batch_size",
    "seed",
    "arch",
];

const OPTIONAL_KEYS: &[&str] = &[
    "pretrain_epochs",
    "pretrain_lr",
    "synthetic_n",
    "lambda_grid",
    "loss_modes",
    "layer_weighting",
    "robustness_runs",
];

impl TrainingConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self, ConfigError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line: i + 1,
                    text: raw.to_string(),
                });
            };
            map.insert(key.trim().to_string(), value.trim().to_string());
        }
        Self::from_map(map)
    }

    fn from_map(map: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        for key in map.keys() {
            if !REQUIRED_KEYS.contains(&key.as_str()) && !OPTIONAL_KEYS.contains(&key.as_str()) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let get = |key: &'static str| -> Result<&String, ConfigError> {
            map.get(key).ok_or(ConfigError::MissingKey(key))
        };
        let bad = |key: &str, value: &str, reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };

        fn num<T: std::str::FromStr>(
            key: &str,
            value: &str,
        ) -> Result<T, ConfigError> {
            value.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: value.to_string(),
                reason: "not a valid number".to_string(),
            })
        }

        let defaults = TrainingConfig::default();

        let lambda: f64 = num("lambda", get("lambda")?)?;
        if lambda < 0.0 || !lambda.is_finite() {
            return Err(bad("lambda", get("lambda")?, "must be >= 0"));
        }
        let loss_mode_str = get("loss_mode")?;
        let loss_mode = LossMode::parse(loss_mode_str).ok_or_else(|| {
            bad(
                "loss_mode",
                loss_mode_str,
                "expected soft_entropy or compressibility",
            )
        })?;
        let bits: u8 = num("bits", get("bits")?)?;
        if !(1..=8).contains(&bits) {
            return Err(bad("bits", get("bits")?, "must be in [1, 8]"));
        }
        let temperature: f64 = num("temperature", get("temperature")?)?;
        if temperature <= 0.0 {
            return Err(bad("temperature", get("temperature")?, "must be > 0"));
        }
        let subsample_fraction: f64 = num("subsample_fraction", get("subsample_fraction")?)?;
        if !(subsample_fraction > 0.0 && subsample_fraction <= 1.0) {
            return Err(bad(
                "subsample_fraction",
                get("subsample_fraction")?,
                "must be in (0, 1]",
            ));
        }
        let lr: f64 = num("lr", get("lr")?)?;
        if lr <= 0.0 {
            return Err(bad("lr", get("lr")?, "must be > 0"));
        }
        let momentum: f64 = num("momentum", get("momentum")?)?;
        if !(0.0..1.0).contains(&momentum) {
            return Err(bad("momentum", get("momentum")?, "must be in [0, 1)"));
        }
        let weight_decay: f64 = num("weight_decay", get("weight_decay")?)?;
        if weight_decay < 0.0 {
            return Err(bad("weight_decay", get("weight_decay")?, "must be >= 0"));
        }
        let epochs: usize = num("epochs", get("epochs")?)?;
        if epochs == 0 {
            return Err(bad("epochs", get("epochs")?, "must be >= 1"));
        }
        let batch_size: usize = num("batch_size", get("batch_size")?)?;
        if batch_size == 0 {
            return Err(bad("batch_size", get("batch_size")?, "must be >= 1"));
        }
        let seed: u64 = num("seed", get("seed")?)?;
        let arch = get("arch")?.clone();
        if arch != "toy-cnn-v1" {
            return Err(bad("arch", &arch, "only toy-cnn-v1 is supported"));
        }

        let pretrain_epochs = match map.get("pretrain_epochs") {
            Some(v) => num("pretrain_epochs", v)?,
            None => defaults.pretrain_epochs,
        };
        let pretrain_lr = match map.get("pretrain_lr") {
            Some(v) => {
                let x: f64 = num("pretrain_lr", v)?;
                if x <= 0.0 {
                    return Err(bad("pretrain_lr", v, "must be > 0"));
                }
                x
            }
            None => defaults.pretrain_lr,
        };
        let synthetic_n = match map.get("synthetic_n") {
            Some(v) => {
                let n: usize = num("synthetic_n", v)?;
                if n == 0 {
                    return Err(bad("synthetic_n", v, "must be >= 1"));
                }
                n
            }
            None => defaults.synthetic_n,
        };
        let lambda_grid = match map.get("lambda_grid") {
            Some(v) => {
                let mut grid = Vec::new();
                for part in v.split(',') {
                    let x: f64 = num("lambda_grid", part.trim())?;
                    if x < 0.0 {
                        return Err(bad("lambda_grid", v, "entries must be >= 0"));
                    }
                    grid.push(x);
                }
                if grid.is_empty() {
                    return Err(bad("lambda_grid", v, "must list at least one value"));
                }
                grid
            }
            None => defaults.lambda_grid,
        };
        let loss_modes = match map.get("loss_modes") {
            Some(v) => {
                let mut modes = Vec::new();
                for part in v.split(',') {
                    let m = LossMode::parse(part.trim()).ok_or_else(|| {
                        bad("loss_modes", v, "expected soft_entropy or compressibility")
                    })?;
                    modes.push(m);
                }
                modes
            }
            None => defaults.loss_modes,
        };
        let layer_weighting = match map.get("layer_weighting") {
            Some(v) => match v.as_str() {
                "uniform" => LayerWeighting::Uniform,
                "by_size" => LayerWeighting::BySize,
                _ => return Err(bad("layer_weighting", v, "expected uniform or by_size")),
            },
            None => defaults.layer_weighting,
        };
        let robustness_runs = match map.get("robustness_runs") {
            Some(v) => {
                let k: usize = num("robustness_runs", v)?;
                if k < 2 {
                    return Err(bad("robustness_runs", v, "must be >= 2"));
                }
                k
            }
            None => defaults.robustness_runs,
        };

        Ok(TrainingConfig {
            lambda,
            loss_mode,
            bits,
            temperature,
            subsample_fraction,
            lr,
            momentum,
            weight_decay,
            epochs,
            batch_size,
            seed,
            arch,
            pretrain_epochs,
            pretrain_lr,
            synthetic_n,
            lambda_grid,
            loss_modes,
            layer_weighting,
            robustness_runs,
        })
    }

    /// Canonical `key=value` form, used for the checkpoint config echo and
    /// for writing derived configs to disk.
    pub fn to_key_values(&self) -> String {
        let grid = self
            .lambda_grid
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let modes = self
            .loss_modes
            .iter()
            .map(|m| m.as_str())
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "lambda={}\nloss_mode={}\nbits={}\ntemperature={}\nsubsample_fraction={}\nlr={}\n\
             momentum={}\nweight_decay={}\nepochs={}\nbatch_size={}\nseed={}\narch={}\n\
             pretrain_epochs={}\npretrain_lr={}\nsynthetic_n={}\nlambda_grid={}\nloss_modes={}\n\
             layer_weighting={}\nrobustness_runs={}\n",
            self.lambda,
            self.loss_mode,
            self.bits,
            self.temperature,
            self.subsample_fraction,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.epochs,
            self.batch_size,
            self.seed,
            self.arch,
            self.pretrain_epochs,
            self.pretrain_lr,
            self.synthetic_n,
            grid,
            modes,
            self.layer_weighting.as_str(),
            self.robustness_runs,
        )
    }
}
