//! The run configuration document shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::synth::DataConfig;
use crate::data::targets::TargetSpec;
use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Target-encoding settings that are not implied by the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetConfig {
    /// Inclusive instance-scale range (max of box height and width, in
    /// pixels) per stage. Neighbouring ranges overlap, so an instance can
    /// train more than one stage.
    pub scale_ranges: Vec<(f64, f64)>,
    /// Stuff kernels are averaged over cells that things do not dominate.
    pub exclude_thing_cells: bool,
}

impl Default for TargetConfig {
    fn default() -> Self {
        TargetConfig {
            scale_ranges: vec![(1.0, 16.0), (8.0, 32.0), (16.0, 2048.0)],
            exclude_thing_cells: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub targets: TargetConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.model.n_th != self.data.n_things || self.model.n_st != self.data.n_stuff {
            return Err(Error::Config(format!(
                "model predicts {} thing / {} stuff classes but data has {} / {}",
                self.model.n_th, self.model.n_st, self.data.n_things, self.data.n_stuff
            )));
        }
        for (lo, hi) in &self.targets.scale_ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("targets: bad scale range ({lo}, {hi})")));
            }
        }
        self.target_spec().validate(self.data.height, self.data.width)
    }

    pub fn target_spec(&self) -> TargetSpec {
        TargetSpec {
            strides: self.model.stage_strides.clone(),
            scale_ranges: self.targets.scale_ranges.clone(),
            mask_stride: self.model.encoder_stride,
            exclude_thing_cells: self.targets.exclude_thing_cells,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// Applies `a.b.c=value` overrides in order. The value is read as JSON
    /// when it parses, otherwise as a string. Only existing keys can be set.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut doc = serde_json::to_value(self)?;
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for key in path.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(key))
                    .ok_or_else(|| Error::Config(format!("unknown config key `{path}`")))?;
            }
            *slot = value;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }
}
