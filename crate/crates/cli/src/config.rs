use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tracediag_core::causal::RcaConfig;
use tracediag_core::rl::TrainConfig;
use tracediag_core::simgen::GenConfig;
use tracediag_core::trace::DEFAULT_BUCKET_MS;

use crate::failure::Failure;

pub const CONFIG_ENV: &str = "TRACEDIAG_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub cases: usize,
    /// Fraction of traces written to the span file.
    pub span_sample_rate: f64,
    pub generator: GenConfig,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection { cases: 1, span_sample_rate: 0.01, generator: GenConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateSection {
    pub bucket_ms: i64,
    pub sample_rate: f64,
}

impl Default for AggregateSection {
    fn default() -> Self {
        AggregateSection { bucket_ms: DEFAULT_BUCKET_MS, sample_rate: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub simulate: SimulateSection,
    pub aggregate: AggregateSection,
    pub train: TrainConfig,
    pub rca: RcaConfig,
}

impl Config {
    /// Reads the file named by `--config`, falling back to `TRACEDIAG_CONFIG`,
    /// then to built-in defaults. `.json` files are json, anything else toml.
    pub fn load(flag: Option<&Path>) -> Result<Config, Failure> {
        let path = flag
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        let parsed = if path.extension().is_some_and(|x| x == "json") {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        } else {
            toml::from_str(&text).map_err(|e| e.to_string())
        };
        let cfg: Config = parsed.map_err(|e| Failure::usage(format!("config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let s = &self.simulate;
        if s.cases == 0 {
            return Err(Failure::usage("simulate.cases must be positive"));
        }
        if !(s.span_sample_rate > 0.0 && s.span_sample_rate <= 1.0) {
            return Err(Failure::usage("simulate.span_sample_rate must be in (0, 1]"));
        }
        s.generator.validate().map_err(|e| Failure::usage(format!("simulate.generator: {e}")))?;
        if self.aggregate.bucket_ms <= 0 {
            return Err(Failure::usage("aggregate.bucket_ms must be positive"));
        }
        if !(self.aggregate.sample_rate > 0.0 && self.aggregate.sample_rate <= 1.0) {
            return Err(Failure::usage("aggregate.sample_rate must be in (0, 1]"));
        }
        self.train.validate().map_err(|e| Failure::usage(format!("train: {e}")))?;
        Ok(())
    }

    /// Applies a global `--seed` to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Config {
        if let Some(seed) = seed {
            self.simulate.generator.seed = seed;
            self.train.seed = seed;
            self.train.rca.shapley.seed = seed;
            self.rca.shapley.seed = seed;
        }
        self
    }
}
