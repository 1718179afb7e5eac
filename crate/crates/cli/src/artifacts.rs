//! Loading datasets and trained models, and CSV tables shared by commands.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use cfalign::alignment::AlignmentRecord;
use cfalign::data::Dataset;
use cfalign::format::{csv_line, g9};
use cfalign::models::{Autoencoder, Classifier, ModelCheckpoint, Predictor};
use cfalign::stats::CorrelationMatrix;

use crate::exit::{CliError, CliResult};

pub const AUTOENCODER_DIR: &str = "autoencoder";
pub const CLASSIFIER_DIR: &str = "classifiers";

pub fn load_dataset(dir: &Path) -> CliResult<Dataset> {
    log::info!("loading dataset {}", dir.display());
    Ok(Dataset::load(dir)?)
}

pub struct Models {
    pub autoencoder: Autoencoder,
    pub classifiers: Vec<Arc<Classifier>>,
}

impl Models {
    /// Loads the autoencoder and the named classifiers from a `train` output
    /// directory. An empty `names` loads every classifier, sorted by name.
    pub fn load(dir: &Path, names: &[String]) -> CliResult<Self> {
        let ae_dir = dir.join(AUTOENCODER_DIR);
        let encoder = ModelCheckpoint::load(&ae_dir.join("encoder"))?;
        let decoder = ModelCheckpoint::load(&ae_dir.join("decoder"))?;
        let autoencoder = Autoencoder::new(encoder.mlp, decoder.mlp)?;
        let names = if names.is_empty() {
            list_classifiers(&dir.join(CLASSIFIER_DIR))?
        } else {
            names.to_vec()
        };
        let classifiers = names
            .iter()
            .map(|n| {
                let c = ModelCheckpoint::load(&dir.join(CLASSIFIER_DIR).join(n))?;
                Ok(Arc::new(Classifier::from_checkpoint(&c)?))
            })
            .collect::<CliResult<Vec<_>>>()?;
        if classifiers.is_empty() {
            return Err(CliError::config(format!("no classifiers found under {}", dir.display())));
        }
        for c in &classifiers {
            if c.input_dim() != autoencoder.image_dim() {
                return Err(CliError::config(format!(
                    "classifier {} expects {} inputs, autoencoder produces {}",
                    c.name,
                    c.input_dim(),
                    autoencoder.image_dim()
                )));
            }
        }
        Ok(Models {
            autoencoder,
            classifiers,
        })
    }

    pub fn get(&self, name: &str) -> CliResult<Arc<Classifier>> {
        self.classifiers
            .iter()
            .find(|c| c.name == name)
            .cloned()
            .ok_or_else(|| CliError::config(format!("classifier `{name}` is not loaded")))
    }

    pub fn predictors(&self) -> Vec<&dyn Predictor> {
        self.classifiers.iter().map(|c| c.as_ref() as &dyn Predictor).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.classifiers.iter().map(|c| c.name.clone()).collect()
    }
}

fn list_classifiers(dir: &Path) -> CliResult<Vec<String>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        if entry.path().join("manifest.json").is_file() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

/// Square correlation table with a leading name column.
pub fn correlation_csv(m: &CorrelationMatrix) -> String {
    let mut out = csv_line(std::iter::once("name".to_string()).chain(m.names.iter().cloned()));
    for (name, row) in m.names.iter().zip(&m.values) {
        out.push_str(&csv_line(std::iter::once(name.clone()).chain(row.iter().map(|v| g9(*v)))));
    }
    out
}

pub fn records_csv(records: &[AlignmentRecord]) -> String {
    let mut out = csv_line([
        "sample_id",
        "base",
        "downstream",
        "r_value",
        "base_delta",
        "downstream_delta",
        "included",
    ]);
    for r in records {
        out.push_str(&csv_line([
            r.sample_id.to_string(),
            r.base_name.clone(),
            r.downstream_name.clone(),
            g9(r.r_value),
            g9(r.base_delta),
            g9(r.downstream_delta),
            r.included.to_string(),
        ]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn correlation_table_layout() {
        let m = CorrelationMatrix::from_columns(
            vec!["a".into(), "b".into()],
            &[vec![0.0, 1.0, 0.0, 1.0], vec![1.0, 0.0, 1.0, 0.0]],
        );
        assert_eq!(correlation_csv(&m), "name,a,b\na,1,-1\nb,-1,1\n");
    }
}
