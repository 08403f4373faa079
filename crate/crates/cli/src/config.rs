//! Declarative run configuration. Precedence, lowest first: built-in
//! defaults, the JSON file, the file's top-level `seed`, command-line flags.

use std::path::{Path, PathBuf};

use ldb_core::ann::IvfPqConfig;
use ldb_core::bench::SweepConfig;
use ldb_core::sampler::SamplerConfig;
use ldb_core::train::TrainConfig;
use ldb_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub refs: Option<PathBuf>,
    pub pool: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FidelityConfig {
    pub k: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for FidelityConfig {
    fn default() -> Self {
        FidelityConfig {
            k: 20,
            eval_samples: 20_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    #[serde(flatten)]
    pub sweep: SweepConfig,
    pub n_queries: usize,
    /// Fixed query noise; when absent it is calibrated to `target_hr`.
    pub noise_sigma: Option<f64>,
    pub target_hr: f64,
    pub query_seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            sweep: SweepConfig::default(),
            n_queries: 1000,
            noise_sigma: None,
            target_hr: 0.9,
            query_seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub paths: Paths,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub fidelity: FidelityConfig,
    pub index: IvfPqConfig,
    pub benchmark: BenchmarkConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
            cfg.sample.seed = seed;
            cfg.fidelity.seed = seed;
            cfg.index.train_seed = seed;
            cfg.benchmark.sweep.trial_seed_base = seed;
            cfg.benchmark.query_seed = seed;
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
    }
}
