//! Experiment configuration: one JSON file describing the data source,
//! model, training run, exit policies, and sweep grids, plus the
//! provenance echo every command drops into its output directory.
//!
//! Unknown fields are rejected so typos fail loudly; missing fields fall
//! back to the documented defaults. Command-line flags override file
//! values after parsing.

use crate::data::DatasetSpec;
use crate::exiting::ExitPolicy;
use crate::model::ModelConfig;
use crate::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config field {0}")]
    BadField(&'static str),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("data: {0}")]
    Data(#[from] crate::data::DataError),
    #[error("model: {0}")]
    Model(#[from] crate::model::ModelError),
    #[error("train: {0}")]
    Train(#[from] crate::training::TrainError),
}

/// Where the splits come from: generated on the fly or read from a
/// directory of `train.jsonl`, `dev.jsonl`, `test.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Spec(DatasetSpec),
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Spec(DatasetSpec::default_benchmark())
    }
}

/// An exit policy with the swept parameter left open. `instantiate`
/// fills the threshold; count-valued policies round it to a count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicyTemplate {
    Edr { lambda: f64 },
    Entropy,
    Patience,
    ConfidencePatience { patience: usize },
    Oracle,
    FixedLayer,
}

impl PolicyTemplate {
    pub fn instantiate(&self, tau: f64) -> ExitPolicy {
        let count = tau.round().max(1.0) as usize;
        match *self {
            PolicyTemplate::Edr { lambda } => ExitPolicy::Edr { tau, lambda },
            PolicyTemplate::Entropy => ExitPolicy::Entropy { tau },
            PolicyTemplate::Patience => ExitPolicy::Patience { patience: count },
            PolicyTemplate::ConfidencePatience { patience } => {
                ExitPolicy::ConfidencePatience { tau, patience }
            }
            PolicyTemplate::Oracle => ExitPolicy::Oracle,
            PolicyTemplate::FixedLayer => ExitPolicy::FixedLayer { layer: count },
        }
    }

    /// Stable name used for report files and table rows.
    pub fn name(&self) -> String {
        match self {
            PolicyTemplate::Edr { lambda } => format!("edr_lambda_{lambda}"),
            PolicyTemplate::Entropy => "entropy".to_string(),
            PolicyTemplate::Patience => "patience".to_string(),
            PolicyTemplate::ConfidencePatience { patience } => {
                format!("confidence_patience_{patience}")
            }
            PolicyTemplate::Oracle => "oracle".to_string(),
            PolicyTemplate::FixedLayer => "fixed_layer".to_string(),
        }
    }

    /// Oracle ignores the threshold entirely.
    pub fn threshold_free(&self) -> bool {
        matches!(self, PolicyTemplate::Oracle)
    }
}

/// Everything one experiment run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub policies: Vec<PolicyTemplate>,
    /// Thresholds swept by `sweep` and `compare`.
    pub taus: Vec<f64>,
    /// Fusion coefficients searched on dev data.
    pub lambda_grid: Vec<f64>,
    pub target_speedups: Vec<f64>,
    pub speedup_tolerance: f64,
    /// The three thresholds whose exit histograms get their own figures.
    pub hist_taus: [f64; 3],
    pub diagnose_layers: Vec<usize>,
    pub diagnose_taus: Vec<f64>,
    /// Fusion coefficient used by the diagnostic indicator.
    pub diagnose_lambda: f64,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Speed-up the shift report matches its threshold to.
    pub shift_target_speedup: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            policies: vec![
                PolicyTemplate::Edr { lambda: 1.0 },
                PolicyTemplate::Entropy,
                PolicyTemplate::Oracle,
            ],
            taus: crate::harness::default_tau_grid(),
            lambda_grid: vec![0.667, 1.0, 1.5, 2.0, 3.0],
            target_speedups: vec![2.0, 3.0],
            speedup_tolerance: 0.15,
            hist_taus: [0.14, 0.4, 0.65],
            diagnose_layers: vec![2],
            diagnose_taus: vec![0.2],
            diagnose_lambda: 1.0,
            kmeans_max_iters: 50,
            kmeans_tol: 1e-6,
            shift_target_speedup: 2.5,
            out_dir: PathBuf::from("runs/experiment"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if let DataSource::Spec(spec) = &self.data {
            spec.validate()?;
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.policies.is_empty() {
            return Err(ConfigError::BadField("policies must not be empty"));
        }
        if self.taus.is_empty() {
            return Err(ConfigError::BadField("taus must not be empty"));
        }
        if self.taus.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(ConfigError::BadField("taus must be finite and non-negative"));
        }
        if self.lambda_grid.is_empty()
            || self.lambda_grid.iter().any(|l| !l.is_finite() || *l <= 0.0)
        {
            return Err(ConfigError::BadField("lambda_grid entries must be positive"));
        }
        if self.target_speedups.is_empty()
            || self.target_speedups.iter().any(|s| !s.is_finite() || *s < 1.0)
        {
            return Err(ConfigError::BadField("target_speedups must be at least 1"));
        }
        if !self.speedup_tolerance.is_finite() || self.speedup_tolerance <= 0.0 {
            return Err(ConfigError::BadField("speedup_tolerance must be positive"));
        }
        if self.hist_taus.iter().any(|t| !t.is_finite() || !(0.0..=1.0).contains(t)) {
            return Err(ConfigError::BadField("hist_taus must lie in [0, 1]"));
        }
        for &layer in &self.diagnose_layers {
            if layer == 0 || layer >= self.model.layers {
                return Err(ConfigError::BadField(
                    "diagnose_layers must be below the last layer, which has no prototypes",
                ));
            }
        }
        if self.diagnose_taus.iter().any(|t| !t.is_finite() || !(0.0..=1.0).contains(t)) {
            return Err(ConfigError::BadField("diagnose_taus must lie in [0, 1]"));
        }
        if !self.diagnose_lambda.is_finite() || self.diagnose_lambda <= 0.0 {
            return Err(ConfigError::BadField("diagnose_lambda must be positive"));
        }
        if self.kmeans_max_iters == 0 {
            return Err(ConfigError::BadField("kmeans_max_iters must be positive"));
        }
        if !self.kmeans_tol.is_finite() || self.kmeans_tol <= 0.0 {
            return Err(ConfigError::BadField("kmeans_tol must be positive"));
        }
        if !self.shift_target_speedup.is_finite() || self.shift_target_speedup < 1.0 {
            return Err(ConfigError::BadField("shift_target_speedup must be at least 1"));
        }
        Ok(())
    }

    /// Point every seed at one value; used by the `--seed` override.
    pub fn override_seed(&mut self, seed: u64) {
        if let DataSource::Spec(spec) = &mut self.data {
            spec.seed = seed;
        }
        self.model.seed = seed;
        self.train.seed = seed;
    }
}

/// Parse a config file, filling omitted fields with defaults.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Content hash of the resolved config, hex encoded.
pub fn config_hash(config: &ExperimentConfig) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Name of the per-command echo file, `config_echo_<command>.json`.
pub fn echo_file_name(command: &str) -> String {
    format!("config_echo_{command}.json")
}

/// Drop `config_echo_<command>.json` (resolved config plus its hash) into
/// a directory so every artifact records what produced it. Commands get
/// separate echo files, so a pipeline sharing one output directory keeps
/// the provenance of each stage.
pub fn write_config_echo(
    config: &ExperimentConfig,
    dir: &Path,
    command: &str,
) -> Result<String, ConfigError> {
    let hash = config_hash(config);
    let echo = serde_json::json!({ "hash": hash, "config": config });
    let text = serde_json::to_string_pretty(&echo).expect("echo serializes");
    fs::write(dir.join(echo_file_name(command)), text)?;
    Ok(hash)
}
