//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use otflow_core::datasets::{generate, load_pointcloud, ShapeSpec};
use otflow_core::{GaussianParams, LossConfig, ModelSpec, PointCloud, Schedule};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Where a point cloud comes from. Exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<ShapeSpec>,
    /// Analytic target, only meaningful in semi-discrete mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussian: Option<GaussianParams>,
}

/// Loaded form of a [`DataSource`].
#[derive(Debug, Clone)]
pub enum Data {
    Cloud(PointCloud),
    Gaussian(GaussianParams),
}

impl DataSource {
    fn validate(&self, field: &str, base: &Path) -> Result<(), CliError> {
        let set = [self.path.is_some(), self.shape.is_some(), self.gaussian.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if set != 1 {
            return Err(CliError::invalid(format!(
                "{field}: exactly one of `path`, `shape` or `gaussian` must be given"
            )));
        }
        if let Some(p) = &self.path {
            let full = base.join(p);
            if !full.is_file() {
                return Err(CliError::invalid(format!("{field}.path: file not found: {}", full.display())));
            }
        }
        if let Some(s) = &self.shape {
            s.validate()
                .map_err(|e| CliError::invalid(format!("{field}.shape: {e}")))?;
        }
        if let Some(g) = &self.gaussian {
            g.validate()
                .map_err(|e| CliError::invalid(format!("{field}.gaussian: {e}")))?;
        }
        Ok(())
    }

    pub fn load(&self, base: &Path) -> Result<Data, CliError> {
        if let Some(p) = &self.path {
            return Ok(Data::Cloud(load_pointcloud(base.join(p))?));
        }
        if let Some(s) = &self.shape {
            return Ok(Data::Cloud(generate(s)?));
        }
        match &self.gaussian {
            Some(g) => Ok(Data::Gaussian(g.clone())),
            None => Err(CliError::invalid("empty data source")),
        }
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// One training experiment. Relative data paths resolve against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub target: DataSource,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub loss: LossConfig,
    /// `schedule.seed` is always replaced by the top-level `seed`.
    #[serde(default)]
    pub schedule: Schedule,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path.is_empty() || path == "." {
                CliError::invalid(format!("config: {inner}"))
            } else {
                CliError::invalid(format!("config field `{path}`: {inner}"))
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies command-line overrides and pins the schedule seed.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<&Path>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(d) = out_dir {
            self.out_dir = d.to_path_buf();
        }
        self.schedule.seed = self.seed;
        self
    }

    pub fn validate(&self, base: &Path) -> Result<(), CliError> {
        self.source.validate("source", base)?;
        self.target.validate("target", base)?;
        if self.source.gaussian.is_some() {
            return Err(CliError::invalid("source.gaussian: the source must be a point cloud"));
        }
        match (self.loss.semi_discrete, self.target.gaussian.is_some()) {
            (true, false) => {
                return Err(CliError::invalid("target: semi-discrete mode needs `target.gaussian`"));
            }
            (false, true) => {
                return Err(CliError::invalid("loss.semi_discrete: a Gaussian target requires semi-discrete mode"));
            }
            _ => {}
        }
        self.loss
            .validate()
            .map_err(|e| CliError::invalid(format!("loss: {e}")))?;
        self.schedule
            .validate()
            .map_err(|e| CliError::invalid(format!("schedule: {e}")))?;
        let dim = match (&self.source.shape, &self.target.shape) {
            (Some(s), _) => Some(s.dim()),
            (None, Some(t)) => Some(t.dim()),
            _ => None,
        };
        if let Some(d) = dim {
            self.model
                .validate(d)
                .map_err(|e| CliError::invalid(format!("model: {e}")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
