//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::DeviceSpec;
use crate::strategy::Strategy;
use crate::writeverify::WriteVerifyConfig;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("config syntax error: {0}")]
    Syntax(String),
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config key `{key}`: {message}")]
    Type { key: String, message: String },
    #[error("config key `{key}` out of range: {constraint}")]
    Range { key: String, constraint: String },
    #[error("config key `{key}`: path {path} does not exist")]
    Path { key: String, path: PathBuf },
    #[error("override `{0}` is not of the form KEY=VALUE")]
    Override(String),
}

type CResult<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub mnist_dir: Option<PathBuf>,
    pub two_moons_samples: usize,
    pub two_moons_test_samples: usize,
    pub two_moons_noise: f64,
    pub model: Option<PathBuf>,
    pub hidden: Vec<usize>,
    pub input_pool: usize,
    pub quant_bits: u32,
    pub device_bits: u32,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub quant_aware: bool,
    pub device: String,
    pub device_beta: Option<f64>,
    pub device_dm: Option<Vec<f64>>,
    pub sigma: f64,
    pub devices: Vec<String>,
    pub sigmas: Vec<f64>,
    pub tolerance: f64,
    pub max_attempts: u64,
    pub granularity: f64,
    pub delta_a: Option<f64>,
    pub strategy: String,
    pub strategies: Vec<String>,
    pub nwc_grid: Vec<f64>,
    pub runs: usize,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub calibration_batches: usize,
    pub calibration_batch_size: usize,
    pub insitu_lr: f64,
    pub insitu_batch: usize,
    pub insitu_iterations: usize,
    pub samples_per_weight: usize,
    pub weight_subset: Option<usize>,
    pub correlate_sigma: Option<f64>,
    pub correlate_split: String,
    pub max_study_weights: usize,
    pub calibrate_weights: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: "two-moons".into(),
            mnist_dir: None,
            two_moons_samples: 1000,
            two_moons_test_samples: 500,
            two_moons_noise: 0.1,
            model: None,
            hidden: Vec::new(),
            input_pool: 0,
            quant_bits: 4,
            device_bits: 2,
            epochs: 50,
            lr: 0.1,
            batch_size: 32,
            quant_aware: true,
            device: "Uniform".into(),
            device_beta: None,
            device_dm: None,
            sigma: 0.1,
            devices: Vec::new(),
            sigmas: Vec::new(),
            tolerance: 0.06,
            max_attempts: 1000,
            granularity: 0.05,
            delta_a: None,
            strategy: "USWIM".into(),
            strategies: vec![
                "USWIM".into(),
                "SWIM".into(),
                "Magnitude".into(),
                "Random".into(),
                "InSitu".into(),
            ],
            nwc_grid: vec![0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0],
            runs: 200,
            seed: 0,
            workers: 1,
            out: PathBuf::from("out"),
            calibration_batches: 0,
            calibration_batch_size: 256,
            insitu_lr: 0.01,
            insitu_batch: 64,
            insitu_iterations: 20,
            samples_per_weight: 100,
            weight_subset: None,
            correlate_sigma: None,
            correlate_split: "test".into(),
            max_study_weights: 2000,
            calibrate_weights: 10_000,
        }
    }
}

/// `(key, default, description)` for every accepted key.
pub const CONFIG_KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "\"two-moons\"", "\"two-moons\" (bundled generator) or \"mnist\""),
    ("mnist_dir", "unset", "directory holding train-/t10k- IDX files (.gz ok); unset uses the bundled subset"),
    ("two_moons_samples", "1000", "two-moons training examples"),
    ("two_moons_test_samples", "500", "two-moons held-out examples"),
    ("two_moons_noise", "0.1", "two-moons jitter std"),
    ("model", "unset", "checkpoint path; unset means <out>/model.uswm"),
    ("hidden", "[]", "hidden layer widths; [] picks [16] (two-moons) or [24] (mnist)"),
    ("input_pool", "0", "average-pool window on image inputs; 0 picks 4 for mnist"),
    ("quant_bits", "4", "weight precision M"),
    ("device_bits", "2", "bits per device K (K=2 in the reference setting)"),
    ("epochs", "50", "training epochs"),
    ("lr", "0.1", "training learning rate"),
    ("batch_size", "32", "training minibatch size"),
    ("quant_aware", "true", "train on M-bit rounded weights (straight-through)"),
    ("device", "\"Uniform\"", "Uniform, F2 (beta 0.8), R4 (beta 0.57), F6 (beta 0.43) or a custom name with device_dm"),
    ("device_beta", "unset", "beta for a custom device (default 1)"),
    ("device_dm", "unset", "per-level Dm table for a custom device, 2^K entries"),
    ("sigma", "0.1", "base device std in level units"),
    ("devices", "[]", "sweep devices; [] uses `device`"),
    ("sigmas", "[]", "sweep sigmas; [] uses `sigma`"),
    ("tolerance", "0.06", "write-verify tolerance in integer weight units"),
    ("max_attempts", "1000", "write-verify attempt cap per weight"),
    ("granularity", "0.05", "fraction p of all weights verified per batch (5% of the weight count)"),
    ("delta_a", "unset", "allowed accuracy drop in points for `simulate`; unset verifies every batch"),
    ("strategy", "\"USWIM\"", "strategy for `simulate`"),
    ("strategies", "[\"USWIM\", \"SWIM\", \"Magnitude\", \"Random\", \"InSitu\"]", "sweep strategies"),
    ("nwc_grid", "[0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]", "normalized write-cycle budgets for `sweep`"),
    ("runs", "200", "Monte Carlo runs per sweep cell"),
    ("seed", "0", "base seed for training, noise and orderings"),
    ("workers", "1", "worker threads for sweeps and studies; 0 uses every core"),
    ("out", "\"out\"", "output directory"),
    ("calibration_batches", "0", "training batches for the second-derivative pass; 0 uses the whole set"),
    ("calibration_batch_size", "256", "batch size of the second-derivative pass"),
    ("insitu_lr", "0.01", "in-situ training learning rate"),
    ("insitu_batch", "64", "in-situ training minibatch size"),
    ("insitu_iterations", "20", "in-situ iteration cap"),
    ("samples_per_weight", "100", "noise draws per weight in `correlate`"),
    ("weight_subset", "unset", "number of weights sampled by `correlate`; unset studies all"),
    ("correlate_sigma", "unset", "sigma for `correlate`; unset uses `sigma`"),
    ("correlate_split", "\"test\"", "set whose accuracy drop `correlate` measures: \"test\" or \"train\""),
    ("max_study_weights", "2000", "largest model `correlate` studies without weight_subset"),
    ("calibrate_weights", "10000", "synthetic weights in `writeverify-calibrate`"),
];

fn type_error(e: toml::de::Error) -> ConfigError {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "?".to_string());
    ConfigError::Type { key, message: msg }
}

fn range(key: &str, constraint: impl Into<String>) -> ConfigError {
    ConfigError::Range {
        key: key.to_string(),
        constraint: constraint.into(),
    }
}

/// Parses `VALUE` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    /// Builds a config from TOML text plus `KEY=VALUE` overrides applied on
    /// top, validating the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> CResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone()))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        for key in table.keys() {
            if !CONFIG_KEYS.iter().any(|(k, _, _)| k == key) {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(type_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CResult<()> {
        if !matches!(self.dataset.as_str(), "two-moons" | "mnist") {
            return Err(range("dataset", "must be \"two-moons\" or \"mnist\""));
        }
        if self.two_moons_samples == 0 || self.two_moons_test_samples == 0 {
            return Err(range("two_moons_samples", "must be positive"));
        }
        if !(self.two_moons_noise >= 0.0) {
            return Err(range("two_moons_noise", "must be >= 0"));
        }
        if self.hidden.contains(&0) {
            return Err(range("hidden", "widths must be positive"));
        }
        if !(2..=24).contains(&self.quant_bits) {
            return Err(range("quant_bits", "must be in 2..=24"));
        }
        if self.device_bits == 0 || self.device_bits > 8 {
            return Err(range("device_bits", "must be in 1..=8"));
        }
        if !self.quant_bits.is_multiple_of(self.device_bits) {
            return Err(range("quant_bits", "must be a multiple of device_bits"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(range("lr", "must be >= 0"));
        }
        if self.batch_size == 0 {
            return Err(range("batch_size", "must be positive"));
        }
        if !(self.sigma >= 0.0) || self.sigmas.iter().any(|s| !(*s >= 0.0)) {
            return Err(range("sigma", "must be >= 0"));
        }
        if !(self.tolerance > 0.0) {
            return Err(range("tolerance", "must be > 0"));
        }
        if self.max_attempts == 0 {
            return Err(range("max_attempts", "must be >= 1"));
        }
        if !(self.granularity > 0.0 && self.granularity <= 1.0) {
            return Err(range("granularity", "must be in (0, 1]"));
        }
        if let Some(d) = self.delta_a {
            if !(d >= 0.0) {
                return Err(range("delta_a", "must be >= 0"));
            }
        }
        Strategy::parse(&self.strategy).map_err(|m| range("strategy", m))?;
        if self.strategies.is_empty() {
            return Err(range("strategies", "must not be empty"));
        }
        for s in &self.strategies {
            Strategy::parse(s).map_err(|m| range("strategies", m))?;
        }
        if self.nwc_grid.is_empty()
            || self.nwc_grid.iter().any(|v| !(*v >= 0.0) || !v.is_finite())
            || self.nwc_grid.windows(2).any(|w| w[0] > w[1])
        {
            return Err(range("nwc_grid", "values must be finite, >= 0 and sorted ascending"));
        }
        if self.runs == 0 {
            return Err(range("runs", "must be >= 1"));
        }
        if self.calibration_batch_size == 0 {
            return Err(range("calibration_batch_size", "must be positive"));
        }
        if !(self.insitu_lr >= 0.0) {
            return Err(range("insitu_lr", "must be >= 0"));
        }
        if self.insitu_batch == 0 {
            return Err(range("insitu_batch", "must be positive"));
        }
        if self.samples_per_weight == 0 {
            return Err(range("samples_per_weight", "must be >= 1"));
        }
        if self.weight_subset == Some(0) {
            return Err(range("weight_subset", "must be >= 1"));
        }
        if let Some(s) = self.correlate_sigma {
            if !(s >= 0.0) {
                return Err(range("correlate_sigma", "must be >= 0"));
            }
        }
        if !matches!(self.correlate_split.as_str(), "test" | "train") {
            return Err(range("correlate_split", "must be \"test\" or \"train\""));
        }
        if self.calibrate_weights == 0 {
            return Err(range("calibrate_weights", "must be >= 1"));
        }
        let names: Vec<&str> = if self.devices.is_empty() {
            vec![self.device.as_str()]
        } else {
            self.devices.iter().map(String::as_str).collect()
        };
        for name in names {
            self.device_spec(name, self.sigma)?;
        }
        if let Some(dir) = &self.mnist_dir {
            if !dir.is_dir() {
                return Err(ConfigError::Path {
                    key: "mnist_dir".into(),
                    path: dir.clone(),
                });
            }
        }
        Ok(())
    }

    /// Built-in device by name, or the custom `device_dm` table when the
    /// name matches `device`.
    pub fn device_spec(&self, name: &str, sigma: f64) -> CResult<DeviceSpec> {
        if let Some(dm) = self.device_dm.as_ref().filter(|_| name == self.device) {
            return DeviceSpec::new(name, self.device_bits, sigma, self.device_beta.unwrap_or(1.0), dm.clone())
                .map_err(|e| range("device_dm", e.to_string()));
        }
        let spec = DeviceSpec::builtin(name, self.device_bits, sigma)
            .ok_or_else(|| range("device", format!("unknown device `{name}` (set device_dm for a custom one)")))?;
        if spec.bits != self.device_bits {
            return Err(range("device_bits", format!("device {} needs K = {}", spec.name, spec.bits)));
        }
        Ok(spec)
    }

    pub fn write_verify(&self) -> WriteVerifyConfig {
        WriteVerifyConfig {
            tolerance: self.tolerance,
            max_attempts: self.max_attempts,
        }
    }

    pub fn sweep_devices(&self) -> Vec<String> {
        if self.devices.is_empty() {
            vec![self.device.clone()]
        } else {
            self.devices.clone()
        }
    }

    pub fn sweep_sigmas(&self) -> Vec<f64> {
        if self.sigmas.is_empty() {
            vec![self.sigma]
        } else {
            self.sigmas.clone()
        }
    }

    pub fn model_path(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| self.out.join("model.uswm"))
    }

    /// Canonical JSON of the resolved config, hashed.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        super::reports::sha256_hex(&bytes)
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> crate::Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
    Ok(RunConfig::from_toml(&text, overrides)?)
}
