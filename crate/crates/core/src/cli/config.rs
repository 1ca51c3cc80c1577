use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::GenSpec;
use crate::model::ModelConfig;
use crate::relax::{EstimatorConfig, GumbelConfig, ScoreFunctionConfig};
use crate::train::TrainConfig;

use super::CliError;

/// Estimator choice plus the settings of the variants that have any.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    /// `softmax`, `gumbel_softmax`, `score_function` or `joint_ce`.
    pub variant: String,
    pub gumbel: GumbelConfig,
    pub score_function: ScoreFunctionConfig,
}

impl Default for EstimatorSection {
    fn default() -> Self {
        EstimatorSection {
            variant: "gumbel_softmax".into(),
            gumbel: GumbelConfig::default(),
            score_function: ScoreFunctionConfig::default(),
        }
    }
}

impl EstimatorSection {
    pub fn estimator(&self) -> Result<EstimatorConfig, CliError> {
        let est = match self.variant.as_str() {
            "softmax" => EstimatorConfig::Softmax,
            "gumbel_softmax" => EstimatorConfig::GumbelSoftmax(self.gumbel.clone()),
            "score_function" => EstimatorConfig::ScoreFunction(self.score_function.clone()),
            "joint_ce" => EstimatorConfig::JointCE,
            other => {
                return Err(CliError::Config(format!(
                    "estimator.variant: unknown variant `{other}` (expected softmax, gumbel_softmax, score_function or joint_ce)"
                )))
            }
        };
        est.validate()
            .map_err(|e| CliError::Config(format!("estimator: {e}")))?;
        Ok(est)
    }
}

/// Everything one command needs, read from a TOML file with one table per
/// component. Missing keys take their defaults; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Where artifacts go. `--out` takes precedence.
    pub out_dir: Option<PathBuf>,
    /// Directory holding `train.jsonl` and `val.jsonl`; defaults to the
    /// output directory.
    pub data_dir: Option<PathBuf>,
    pub data: GenSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub estimator: EstimatorSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| CliError::Config(e.to_string().trim_end().to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Uses one seed for data generation, initialization and training.
    pub fn set_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<EstimatorConfig, CliError> {
        self.data
            .validate()
            .map_err(|e| CliError::Config(format!("data: {e}")))?;
        self.model
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(format!("train: {e}")))?;
        if self.model.vocab_size < self.data.vocab_size {
            return Err(CliError::Config(format!(
                "model.vocab_size ({}) is smaller than data.vocab_size ({})",
                self.model.vocab_size, self.data.vocab_size
            )));
        }
        self.estimator.estimator()
    }
}
