//! Versioned JSON checkpoints: model parameters per layer, the training
//! config, step position, and both RNG stream states. JSON floats print in
//! shortest round-trip form, so save/load is bit-exact.

use super::{OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{DenseLayer, ModelDims, ModelParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub main: u64,
    pub select: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub dims: ModelDims,
    pub stage: u8,
    pub step: usize,
    pub layers: Vec<LayerRecord>,
    pub rng_state: RngState,
    /// Adam moments; absent for plain SGD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer_state: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        params: &ModelParams,
        stage: u8,
        step: usize,
        rng_state: RngState,
    ) -> Self {
        Self::capture_with_optimizer(config, params, stage, step, rng_state, None)
    }

    pub fn capture_with_optimizer(
        config: &TrainConfig,
        params: &ModelParams,
        stage: u8,
        step: usize,
        rng_state: RngState,
        optimizer_state: Option<OptimizerState>,
    ) -> Self {
        let layers = params
            .named_layers()
            .into_iter()
            .flat_map(|(name, layer)| {
                vec![
                    LayerRecord {
                        name: format!("{name}.weight"),
                        shape: vec![layer.in_dim, layer.out_dim],
                        values: layer.weight.clone(),
                    },
                    LayerRecord {
                        name: format!("{name}.bias"),
                        shape: vec![1, layer.out_dim],
                        values: layer.bias.clone(),
                    },
                ]
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            dims: params.dims,
            stage,
            step,
            layers,
            rng_state,
            optimizer_state,
        }
    }

    /// Rebuild model parameters; layer names and shapes must match the dims
    /// skeleton exactly.
    pub fn restore(&self) -> Result<ModelParams> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion { found: self.version, expected: CHECKPOINT_VERSION });
        }
        let mut skeleton = ModelParams::init(self.dims, &mut crate::rng::Rng::new(0))?;
        let expected: Vec<String> = skeleton
            .named_layers()
            .iter()
            .flat_map(|(name, _)| vec![format!("{name}.weight"), format!("{name}.bias")])
            .collect();
        if expected.len() != self.layers.len() {
            return Err(Error::LengthMismatch {
                what: "checkpoint layers",
                left: self.layers.len(),
                right: expected.len(),
            });
        }
        for (record, name) in self.layers.iter().zip(&expected) {
            if &record.name != name {
                return Err(Error::Parse {
                    path: "checkpoint".to_string(),
                    reason: format!("layer `{}` where `{}` expected", record.name, name),
                });
            }
        }
        let mut it = self.layers.iter();
        let mut load_layer = |layer: &mut DenseLayer| -> Result<()> {
            let w = it.next().expect("length checked");
            let b = it.next().expect("length checked");
            if w.shape != [layer.in_dim, layer.out_dim] || w.values.len() != layer.weight.len() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint restore",
                    left: w.shape.clone(),
                    right: vec![layer.in_dim, layer.out_dim],
                });
            }
            if b.values.len() != layer.bias.len() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint restore",
                    left: b.shape.clone(),
                    right: vec![1, layer.out_dim],
                });
            }
            layer.weight.copy_from_slice(&w.values);
            layer.bias.copy_from_slice(&b.values);
            Ok(())
        };
        for layer in skeleton.layers_mut() {
            load_layer(layer)?;
        }
        Ok(skeleton)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let text = serde_json::to_string(ckpt).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parse fully before returning; a corrupt file yields an error and no
/// partial state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: ckpt.version, expected: CHECKPOINT_VERSION });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn params() -> (TrainConfig, ModelParams) {
        let dims = ModelDims { hidden: 4, feature: 6, classes: 3, rotations: 4 };
        (TrainConfig::default(), ModelParams::init(dims, &mut Rng::new(5)).unwrap())
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (cfg, p) = params();
        let ckpt = Checkpoint::capture(&cfg, &p, 1, 17, RngState { main: 1, select: 2 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let restored = loaded.restore().unwrap();
        assert_eq!(restored, p);
        assert_eq!(loaded.rng_state, ckpt.rng_state);
        assert_eq!(loaded.step, 17);

        // Saving the restored state reproduces the same bytes.
        let path2 = dir.path().join("ckpt2.json");
        let ckpt2 = Checkpoint::capture(&cfg, &restored, 1, 17, RngState { main: 1, select: 2 });
        save_checkpoint(&ckpt2, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupt_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, "{\"version\": 1, \"broken").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (cfg, p) = params();
        let mut ckpt = Checkpoint::capture(&cfg, &p, 1, 0, RngState { main: 0, select: 0 });
        ckpt.version = 99;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v99.json");
        save_checkpoint(&ckpt, &path).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointVersion { found: 99, .. })
        ));
    }
}
