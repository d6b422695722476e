//! The run configuration document shared by every CLI command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthcohort::SynthConfig;
use crate::timeline::{
    default_schema, validate_schema, ModalitySchema, DEFAULT_STRIDE_SECS, DEFAULT_WINDOW_SECS,
};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Cohort directory read by `labels`, `train`, `eval` and `attention`,
    /// and written by `synth`.
    pub cohort_dir: PathBuf,
    /// Directory for run artifacts.
    pub output_dir: PathBuf,
    pub schema: Vec<ModalitySchema>,
    pub window_secs: f64,
    pub stride_secs: f64,
    /// Fraction of participants held out for testing.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cohort_dir: PathBuf::from("cohort"),
            output_dir: PathBuf::from("run"),
            schema: default_schema(),
            window_secs: DEFAULT_WINDOW_SECS,
            stride_secs: DEFAULT_STRIDE_SECS,
            test_fraction: 0.2,
            split_seed: 0,
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            path: origin.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        validate_schema(&self.schema)?;
        if !(self.window_secs > 0.0 && self.stride_secs > 0.0) {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(format!(
                "test fraction {} must lie in [0, 1)",
                self.test_fraction
            )));
        }
        self.synth.validate()?;
        self.train.validate()
    }
}
