//! Helpers for driving the `cfalign` binary from tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

pub fn cfalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfalign"))
        .args(args)
        .output()
        .expect("cfalign binary runs")
}

/// Runs a subcommand and panics with its stderr unless it exits with `code`.
pub fn expect(args: &[&str], code: i32) -> Output {
    let out = cfalign(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "cfalign {args:?}\nstdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

pub fn run_cmd(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    expect(&args, 0)
}

/// Every file under `dir` whose name ends with `suffix`, keyed by relative path.
pub fn files_with_suffix(dir: &Path, suffix: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, suffix: &str, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, suffix, out);
            } else if p.to_string_lossy().ends_with(suffix) {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, suffix, &mut out);
    out
}

pub fn all_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    files_with_suffix(dir, "")
}

pub fn dataset_config(n_samples: usize) -> Value {
    json!({
        "n_samples": n_samples,
        "seed": 7,
        "correlation": [
            [1, 0, 0, 0, 0],
            [0, 1, 0, 0.9, 0],
            [0, 0, 1, 0, 0],
            [0, 0.9, 0, 1, 0],
            [0, 0, 0, 0, 1]
        ],
        "group_pair": {"target": "elongation", "sensitive": "frame"}
    })
}

/// Small, fast models: enough structure for every subcommand to run.
pub fn train_config(dataset: &Path) -> Value {
    json!({
        "dataset": dataset,
        "autoencoder": {"latent_dim": 8, "hidden": [64], "epochs": 3, "seed": 1},
        "classifier_defaults": {"hidden": [16], "epochs": 4, "seed": 2},
        "classifiers": [
            {"attribute": "blob_size", "weight_decay": 10},
            {"attribute": "elongation", "weight_decay": 1},
            {"attribute": "brightness", "weight_decay": 1},
            {"attribute": "frame", "weight_decay": 30},
            {"attribute": "texture", "weight_decay": 10}
        ]
    })
}

/// A generated dataset and trained models under `root`.
pub struct Pipeline {
    pub root: PathBuf,
    pub data: PathBuf,
    pub models: PathBuf,
}

impl Pipeline {
    pub fn build(root: &Path, n_samples: usize) -> Pipeline {
        Self::build_with(root, n_samples, &[])
    }

    /// As `build`, passing `extra` flags to both subcommands.
    pub fn build_with(root: &Path, n_samples: usize, extra: &[&str]) -> Pipeline {
        let data = root.join("data");
        let models = root.join("models");
        let c = write_config(root, "data.json", &dataset_config(n_samples));
        run_cmd("gen-data", &c, &data, extra);
        let c = write_config(root, "train.json", &train_config(&data));
        run_cmd("train", &c, &models, extra);
        Pipeline {
            root: root.to_path_buf(),
            data,
            models,
        }
    }

    pub fn align_config(&self) -> Value {
        json!({
            "dataset": self.data,
            "models": self.models,
            "alignment": {"n_per_class": 8, "min_support": 2, "seed": 3}
        })
    }

    pub fn cf_config(&self, base: &str, samples: &[usize]) -> Value {
        json!({"dataset": self.data, "models": self.models, "base": base, "samples": samples})
    }

    pub fn bias_config(&self, coefficient: f64) -> Value {
        json!({
            "dataset": self.data,
            "models": self.models,
            "target": "frame",
            "planted": "texture",
            "coefficient": coefficient,
            "detect": {"n_samples": 12},
            "examples": 2
        })
    }

    pub fn rectify_config(&self, max_iters: usize) -> Value {
        json!({
            "dataset": self.data,
            "models": self.models,
            "bias": "texture",
            "targets": ["frame"],
            "hyperparams": {
                "lr": 0.05,
                "max_iters": max_iters,
                "batch_size": 4,
                "valid_size": 8,
                "base_change": 0.3
            },
            "matrix": {"n_per_class": 6, "min_support": 1},
            "downstream": ["elongation", "texture"]
        })
    }

    /// Test rows scored above 0.5 by `name` on their reconstruction.
    pub fn positive_rows(&self, name: &str) -> Vec<usize> {
        use cfalign::alignment::positive_rows;
        use cfalign::data::Dataset;
        use cfalign::models::{Autoencoder, Classifier, ModelCheckpoint};
        let ds = Dataset::load(&self.data).unwrap();
        let enc = ModelCheckpoint::load(&self.models.join("autoencoder/encoder")).unwrap();
        let dec = ModelCheckpoint::load(&self.models.join("autoencoder/decoder")).unwrap();
        let ae = Autoencoder::new(enc.mlp, dec.mlp).unwrap();
        let c = Classifier::from_checkpoint(&ModelCheckpoint::load(&self.models.join("classifiers").join(name)).unwrap())
            .unwrap();
        positive_rows(&c, &ae, &ds, &ds.split.test).unwrap()
    }

    /// A classifier with at least `n` positive test samples and one negative,
    /// with those samples.
    pub fn cf_base(&self, n: usize) -> (String, Vec<usize>, usize) {
        let ds = cfalign::data::Dataset::load(&self.data).unwrap();
        cfalign::data::KNOWN_ATTRIBUTES
            .iter()
            .find_map(|a| {
                let positive = self.positive_rows(a);
                let negative = ds.split.test.iter().copied().find(|i| !positive.contains(i))?;
                (positive.len() >= n).then(|| (a.to_string(), positive, negative))
            })
            .expect("some classifier has positive and negative samples")
    }
}
