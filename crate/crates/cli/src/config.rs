//! One JSON document holding every module's settings.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wingbeat::eval::SweepPlan;
use wingbeat::synth::DatasetRecipe;
use wingbeat::{Error, ModelConfig, PipelineConfig, Result, TrainConfig};

/// Settings for a whole run. Every section is optional in the file and
/// falls back to its defaults; unknown keys are rejected.
///
/// The model's input shape always follows the feature pipeline (bins ×
/// frames), so it need not be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seeds of the recipe and the trainer.
    pub seed: Option<u64>,
    pub recipe: DatasetRecipe,
    pub pipeline: PipelineConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sweep: Option<SweepPlan>,
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("{}: {e}", origin.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    /// Propagate the master seed and the pipeline shape, then validate
    /// every section except the model topology, which only matters when a
    /// model is built (see [`RunConfig::resolve_for_training`]).
    pub fn resolve(mut self) -> Result<Self> {
        if let Some(seed) = self.seed {
            self.recipe.seed = seed;
            self.train.seed = seed;
        }
        self.pipeline.validate()?;
        self.model.input_shape = (self.pipeline.bins(), self.pipeline.frames);
        self.train.validate()?;
        self.recipe.validate()?;
        if let Some(plan) = &self.sweep {
            plan.validate()?;
        }
        Ok(self)
    }

    /// [`RunConfig::resolve`] plus validation of the model topology.
    pub fn resolve_for_training(self) -> Result<Self> {
        let cfg = self.resolve()?;
        cfg.model.validate()?;
        Ok(cfg)
    }
}
