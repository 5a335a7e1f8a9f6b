use std::fs;
use std::path::Path;

use bigg_core::encoder::EncoderConfig;
use bigg_core::estimator::{CostModelSpec, TrainConfig};
use bigg_core::models::{ModelConfig, ModelKind};
use bigg_core::numerics::Precision;
use bigg_core::workload::{GenConfig, SplitRatios};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything a run depends on besides its input files. Loaded from TOML,
/// then overridden by command-line flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub generator: GenConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub bench: BenchSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub queries: usize,
    pub candidates_per_query: usize,
    pub ratios: SplitRatios,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub d_type: usize,
    pub d_col: usize,
    pub head_hidden: Vec<usize>,
    pub precision: Precision,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSection::default(),
            generator: GenConfig::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            bench: BenchSection::default(),
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            queries: 100,
            candidates_per_query: 1,
            ratios: SplitRatios::default(),
        }
    }
}

impl Default for ModelSection {
    fn default() -> Self {
        let spec = CostModelSpec::new(ModelKind::Bigg);
        ModelSection {
            kind: ModelKind::Bigg,
            layers: spec.model.layers,
            hidden: spec.model.hidden,
            heads: spec.model.heads,
            d_type: spec.encoder.d_type,
            d_col: spec.encoder.d_col,
            head_hidden: spec.head_hidden,
            precision: spec.precision,
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection { reps: 10 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
            }
        }
    }

    /// Propagates the master seed into the sections that carry their own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.generator.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn spec(&self) -> CostModelSpec {
        let m = &self.model;
        CostModelSpec {
            encoder: EncoderConfig {
                d_type: m.d_type,
                d_col: m.d_col,
            },
            model: ModelConfig {
                kind: m.kind,
                layers: m.layers,
                hidden: m.hidden,
                heads: m.heads,
                dropout: self.train.dropout,
            },
            head_hidden: m.head_hidden.clone(),
            precision: m.precision,
        }
    }

    /// Writes `resolved-config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<(), CliError> {
        let text = toml::to_string(self).map_err(|e| CliError::Internal(format!("config echo: {e}")))?;
        fs::write(dir.join("resolved-config.toml"), text)?;
        Ok(())
    }
}
