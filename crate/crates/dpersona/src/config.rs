//! Experiment configuration: one nested TOML document with a section per
//! pipeline stage, hashed canonically so every artifact can record exactly
//! which configuration produced it.
//!
//! Precedence, highest first: command-line flags (`--seed`, `--samples`),
//! then keys in the config file, then built-in defaults. The hash is taken
//! after flag overrides, over the canonical re-serialization, so it is
//! independent of file formatting and key order but tied to the effective
//! values.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::stage1::Stage1Config;
use crate::stage2::Stage2Config;
use crate::synthgen::GenConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Sampling number for diversified evaluation.
    pub samples: usize,
    pub eval_seed: u64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            samples: 50,
            eval_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesConfig {
    pub staple_max_iters: usize,
    pub staple_tol: f64,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            staple_max_iters: 50,
            staple_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthgen: GenConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub metrics: MetricsConfig,
    pub baselines: BaselinesConfig,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.stage1
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        self.stage2
            .validate()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        if self.metrics.samples < 1 {
            return Err(ConfigError::Parse("metrics.samples must be >= 1".into()));
        }
        if self.baselines.staple_max_iters < 1 {
            return Err(ConfigError::Parse(
                "baselines.staple_max_iters must be >= 1".into(),
            ));
        }
        if !(self.baselines.staple_tol > 0.0 && self.baselines.staple_tol.is_finite()) {
            return Err(ConfigError::Parse(
                "baselines.staple_tol must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Parses and validates a config document; unknown keys are rejected.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Missing file path means "all defaults".
pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, ConfigError> {
    match path {
        None => {
            let cfg = ExperimentConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?;
            parse_config(&text)
        }
    }
}

/// Command-line values that shadow config keys.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    /// Sets `synthgen.master_seed`, `stage1.seed`, `stage2.seed`, and
    /// `metrics.eval_seed` at once.
    pub seed: Option<u64>,
    /// Sets `metrics.samples`.
    pub samples: Option<usize>,
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) {
    if let Some(seed) = o.seed {
        cfg.synthgen.master_seed = seed;
        cfg.stage1.seed = seed;
        cfg.stage2.seed = seed;
        cfg.metrics.eval_seed = seed;
    }
    if let Some(samples) = o.samples {
        cfg.metrics.samples = samples;
    }
}

/// SHA-256 of the canonical TOML form, hex.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let canonical = toml::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        hex.push_str(&format!("{b:02x}"));
    }
    hex
}

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One line of the append-only run ledger (`runs.jsonl`). Ledger lines
/// carry timing and are not part of the deterministic metric artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub version: String,
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &ExperimentConfig, hash: &str) -> Self {
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0);
        let mut seeds = BTreeMap::new();
        seeds.insert("data".to_string(), cfg.synthgen.master_seed);
        seeds.insert("stage1".to_string(), cfg.stage1.seed);
        seeds.insert("stage2".to_string(), cfg.stage2.seed);
        seeds.insert("eval".to_string(), cfg.metrics.eval_seed);
        Self {
            run_id: format!("{command}-{}-{nanos}", &hash[..8]),
            command: command.to_string(),
            config_hash: hash.to_string(),
            seeds,
            version: CODE_VERSION.to_string(),
            artifacts: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }
}

pub fn append_run_record(dir: &Path, record: &RunRecord) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("runs.jsonl");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(file, "{line}")?;
    Ok(path)
}
