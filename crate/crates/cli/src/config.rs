//! Experiment configuration file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wavekey_core::attacks::{AttackKind, AttackSuite};
use wavekey_core::audio::{ingest_dir, synth_dataset};
use wavekey_core::keygen::KeygenConfig;
use wavekey_core::optim::OptimizerConfig;
use wavekey_core::{Dataset, Lambdas};

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        n_clips: usize,
        d_x: usize,
        sample_rate: u32,
        seed: u64,
    },
    WavDir {
        path: PathBuf,
        sample_rate: Option<u32>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            n_clips: 200,
            d_x: 1024,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset, CliError> {
        Ok(match self {
            DatasetSpec::Synthetic {
                n_clips,
                d_x,
                sample_rate,
                seed,
            } => synth_dataset(*n_clips, *d_x, *sample_rate, *seed)?,
            DatasetSpec::WavDir { path, sample_rate } => ingest_dir(path, *sample_rate)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples drawn per model.
    pub n_samples: usize,
    /// Attack classes applied in evaluation and in attack mode.
    pub attacks: Vec<AttackKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 100,
            attacks: AttackKind::CLASSES.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub dataset: DatasetSpec,
    pub n_keys: usize,
    pub keygen: KeygenConfig,
    pub lambdas: Lambdas,
    pub optimizer: OptimizerConfig,
    /// Train against this attack distribution when set.
    pub robust: Option<AttackSuite>,
    pub eval: EvalConfig,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: DatasetSpec::default(),
            n_keys: 10,
            keygen: KeygenConfig::default(),
            lambdas: Lambdas::default(),
            optimizer: OptimizerConfig::default(),
            robust: None,
            eval: EvalConfig::default(),
            seed: None,
            out_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::usage(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_keys == 0 {
            return Err(CliError::usage("n_keys must be positive"));
        }
        if self.eval.n_samples == 0 {
            return Err(CliError::usage("eval.n_samples must be positive"));
        }
        self.lambdas
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }
}

/// Parses `default`, `surrogate` or three comma-separated weights.
pub fn parse_lambdas(s: &str) -> Result<Lambdas, String> {
    match s {
        "default" => return Ok(Lambdas::DEFAULT),
        "surrogate" => return Ok(Lambdas::SURROGATE),
        _ => {}
    }
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("bad lambdas `{s}`: {e}"))?;
    let [h, q, a] = v[..] else {
        return Err(format!("expected three weights, got `{s}`"));
    };
    Lambdas::new(h, q, a).map_err(|e| e.to_string())
}
