//! Checkpoint directories: `manifest.json` plus one `layer{i}_{w|b}.cfat` per tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpSpec};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Encoder,
    Decoder,
    Classifier,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sensitive: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub group_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub kind: CheckpointKind,
    pub name: String,
    pub attribute: Option<String>,
    pub mlp: Mlp,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    kind: CheckpointKind,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    attribute: Option<String>,
    spec: MlpSpec,
    weights: Vec<String>,
    training_meta: TrainingMeta,
}

fn weight_files(layers: usize) -> Vec<String> {
    (0..layers)
        .flat_map(|i| [format!("layer{i}_w.cfat"), format!("layer{i}_b.cfat")])
        .collect()
}

impl ModelCheckpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = weight_files(self.mlp.spec.num_layers());
        for (file, t) in files.iter().zip(self.mlp.params()) {
            t.write_file(&dir.join(file))?;
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            kind: self.kind,
            name: self.name.clone(),
            attribute: self.attribute.clone(),
            spec: self.mlp.spec.clone(),
            weights: files,
            training_meta: self.meta.clone(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let manifest: Manifest = read_json(&manifest_path)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                &manifest_path,
                format!("unsupported checkpoint version {}", manifest.version),
            ));
        }
        manifest
            .spec
            .validate()
            .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
        let layers = manifest.spec.num_layers();
        if manifest.weights.len() != 2 * layers {
            return Err(Error::format(
                &manifest_path,
                format!("lists {} weight files, spec needs {}", manifest.weights.len(), 2 * layers),
            ));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (i, file) in manifest.weights.iter().enumerate() {
            let path = dir.join(file);
            let t = Tensor::read_file(&path)?;
            let dims = &manifest.spec.layer_dims;
            let layer = i / 2;
            let expected: Vec<usize> = if i % 2 == 0 {
                vec![dims[layer], dims[layer + 1]]
            } else {
                vec![dims[layer + 1]]
            };
            if t.shape() != expected.as_slice() {
                return Err(Error::format(
                    &path,
                    format!("shape {:?} does not match spec {:?}", t.shape(), expected),
                ));
            }
            if i % 2 == 0 {
                weights.push(t);
            } else {
                biases.push(t);
            }
        }
        let mlp = Mlp::from_parts(manifest.spec, weights, biases)?;
        Ok(ModelCheckpoint {
            kind: manifest.kind,
            name: manifest.name,
            attribute: manifest.attribute,
            mlp,
            meta: manifest.training_meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::OutputActivation;

    fn ckpt() -> ModelCheckpoint {
        let spec = MlpSpec::new(vec![6, 5, 1], OutputActivation::Sigmoid).unwrap();
        ModelCheckpoint {
            kind: CheckpointKind::Classifier,
            name: "frame".into(),
            attribute: Some("frame".into()),
            mlp: Mlp::init(spec, 9).unwrap(),
            meta: TrainingMeta {
                seed: 9,
                epochs: 3,
                final_train_loss: 0.1 + 0.2,
                final_valid_loss: 1.0 / 3.0,
                mode: "erm".into(),
                ..Default::default()
            },
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let c = ckpt();
        c.save(dir.path()).unwrap();
        assert!(dir.path().join("layer1_b.cfat").exists());
        assert_eq!(ModelCheckpoint::load(dir.path()).unwrap(), c);
    }

    #[test]
    fn corrupted_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        let p = dir.path().join("layer0_w.cfat");
        let mut bytes = fs::read(&p).unwrap();
        bytes[1] = b'Z';
        fs::write(&p, bytes).unwrap();
        let err = ModelCheckpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("layer0_w.cfat"), "{err}");
    }

    #[test]
    fn missing_weight_file_fails() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        fs::remove_file(dir.path().join("layer1_w.cfat")).unwrap();
        let err = ModelCheckpoint::load(dir.path()).unwrap_err().to_string();
        assert!(err.contains("layer1_w.cfat"), "{err}");
    }

    #[test]
    fn shape_mismatch_fails() {
        let dir = tempfile::tempdir().unwrap();
        ckpt().save(dir.path()).unwrap();
        Tensor::zeros(vec![5, 2]).write_file(&dir.path().join("layer1_w.cfat")).unwrap();
        assert!(ModelCheckpoint::load(dir.path()).is_err());
    }
}
