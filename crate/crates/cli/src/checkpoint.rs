//! JSON model checkpoints.

use std::fs;
use std::path::Path;

use otflow_core::{FlowModel, ModelSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedParam {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

/// State of training when the checkpoint was written.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub final_slices: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub dim: usize,
    pub spec: ModelSpec,
    pub params: Vec<NamedParam>,
    /// One entry per unit; `false` also for units without ActNorm.
    pub actnorm_initialized: Vec<bool>,
    pub metadata: TrainingMetadata,
}

impl Checkpoint {
    pub fn from_model(model: &FlowModel, metadata: TrainingMetadata) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(_, name, t)| NamedParam {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            dim: model.dim(),
            spec: model.spec().clone(),
            params,
            actnorm_initialized: model
                .actnorm_flags()
                .into_iter()
                .map(|f| f.unwrap_or(false))
                .collect(),
            metadata,
        }
    }

    /// Rebuilds the model; every parameter must be present with its exact
    /// shape and no unknown names are accepted.
    pub fn to_model(&self) -> Result<FlowModel, CliError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::invalid(format!(
                "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        // Initial values are all overwritten below.
        let mut model = FlowModel::new(self.dim, self.spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        if self.params.len() != model.params().len() {
            return Err(CliError::invalid(format!(
                "checkpoint has {} parameters, model needs {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for p in &self.params {
            let id = model
                .params()
                .find(&p.name)
                .ok_or_else(|| CliError::invalid(format!("checkpoint parameter `{}` is unknown", p.name)))?;
            let t = Tensor::new(p.rows, p.cols, p.values.clone())
                .map_err(|e| CliError::invalid(format!("parameter `{}`: {e}", p.name)))?;
            if !t.is_finite() {
                return Err(CliError::invalid(format!("parameter `{}` is not finite", p.name)));
            }
            model
                .params_mut()
                .set_value(id, t)
                .map_err(|e| CliError::invalid(format!("parameter `{}`: {e}", p.name)))?;
        }
        if self.actnorm_initialized.len() != self.spec.flows {
            return Err(CliError::invalid("actnorm_initialized must have one entry per unit"));
        }
        if self.spec.actnorm {
            model.set_actnorm_flags(&self.actnorm_initialized)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::invalid(format!("{}: malformed checkpoint: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use otflow_core::PointCloud;
    use rand::Rng;

    use super::*;

    fn trained_like(actnorm: bool) -> FlowModel {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let spec = ModelSpec {
            flows: 3,
            actnorm,
            ..ModelSpec::default()
        };
        let mut m = FlowModel::new(3, spec, &mut r).unwrap();
        m.perturb(&mut r, 0.7);
        if actnorm {
            m.set_actnorm_flags(&[true, true, true]).unwrap();
        }
        m
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f64> = (0..300).map(|_| r.random_range(-3.0..3.0)).collect();
        let x = PointCloud::new(Tensor::new(100, 3, data).unwrap()).unwrap();
        for actnorm in [false, true] {
            let m = trained_like(actnorm);
            let ck = Checkpoint::from_model(&m, TrainingMetadata::default());
            ck.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, ck);
            let m2 = back.to_model().unwrap();
            assert_eq!(m2.params(), m.params());
            let (a, b) = (m.forward(&x).unwrap(), m2.forward(&x).unwrap());
            assert!(a
                .points()
                .data()
                .iter()
                .zip(b.points().data())
                .all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }

    #[test]
    fn rejects_tampered_checkpoints() {
        let ck = Checkpoint::from_model(&trained_like(false), TrainingMetadata::default());
        let mut bad = ck.clone();
        bad.params[0].name = "unit9.nothing".into();
        assert!(bad.to_model().is_err());
        let mut bad = ck.clone();
        bad.params.pop();
        assert!(bad.to_model().is_err());
        let mut bad = ck.clone();
        bad.params[1].values.push(0.0);
        assert!(bad.to_model().is_err());
        let mut bad = ck;
        bad.format_version = 99;
        assert!(bad.to_model().is_err());
    }
}
