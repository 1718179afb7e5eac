use std::collections::BTreeSet;
use std::path::PathBuf;

use cfalign::format::{csv_line, g9};
use cfalign::models::{
    evaluate_accuracy, train_autoencoder, train_classifier, AutoencoderHyperparams, ClassifierHyperparams,
    EpochLog, TrainMode,
};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::artifacts::{load_dataset, AUTOENCODER_DIR, CLASSIFIER_DIR};
use crate::context::Context;
use crate::exit::{CliError, CliResult};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainConfig {
    dataset: PathBuf,
    #[serde(default)]
    autoencoder: Option<AutoencoderHyperparams>,
    #[serde(default)]
    classifier_defaults: ClassifierHyperparams,
    /// Each entry has `attribute`, optional `name`, and any hyperparameter
    /// overriding `classifier_defaults`.
    #[serde(default)]
    classifiers: Vec<Map<String, Value>>,
}

#[derive(Debug, Serialize)]
struct ClassifierJob {
    name: String,
    attribute: String,
    #[serde(flatten)]
    hp: ClassifierHyperparams,
}

#[derive(Debug, Serialize)]
struct Resolved {
    dataset: PathBuf,
    autoencoder: Option<AutoencoderHyperparams>,
    classifier_defaults: ClassifierHyperparams,
    classifiers: Vec<ClassifierJob>,
}

/// Overrides given on the command line, applied to every classifier.
#[derive(Debug, Default)]
pub struct Overrides {
    pub mode: Option<TrainMode>,
    pub eta: Option<f64>,
    pub sensitive: Option<String>,
}

fn job(i: usize, mut entry: Map<String, Value>, defaults: &ClassifierHyperparams) -> CliResult<ClassifierJob> {
    let take_str = |entry: &mut Map<String, Value>, key: &str| -> CliResult<Option<String>> {
        match entry.remove(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(CliError::config(format!("classifiers[{i}].{key} must be a string, got {other}"))),
        }
    };
    let attribute =
        take_str(&mut entry, "attribute")?.ok_or_else(|| CliError::config(format!("classifiers[{i}] needs an attribute")))?;
    let name = take_str(&mut entry, "name")?.unwrap_or_else(|| attribute.clone());
    let Value::Object(mut merged) = serde_json::to_value(defaults).expect("hyperparameters serialize") else {
        unreachable!("hyperparameters serialize to an object")
    };
    merged.extend(entry);
    let hp = serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::config(format!("classifiers[{i}] ({name}): {e}")))?;
    Ok(ClassifierJob { name, attribute, hp })
}

fn loss_csv(history: &[EpochLog]) -> String {
    let mut out = csv_line(["epoch", "train_loss", "valid_loss", "valid_accuracy"]);
    for e in history {
        let acc = e.valid_accuracy.map(g9).unwrap_or_default();
        out.push_str(&csv_line([e.epoch.to_string(), g9(e.train_loss), g9(e.valid_loss), acc]));
    }
    out
}

pub fn run(ctx: &Context, overrides: &Overrides) -> CliResult<()> {
    let cfg: TrainConfig = ctx.load()?;
    let mut autoencoder = cfg.autoencoder;
    let mut jobs = cfg
        .classifiers
        .into_iter()
        .enumerate()
        .map(|(i, e)| job(i, e, &cfg.classifier_defaults))
        .collect::<CliResult<Vec<_>>>()?;
    if autoencoder.is_none() && jobs.is_empty() {
        return Err(CliError::config("nothing to train: give `autoencoder` and/or `classifiers`"));
    }
    for j in &mut jobs {
        if let Some(m) = overrides.mode {
            j.hp.mode = m;
        }
        if let Some(eta) = overrides.eta {
            j.hp.eta = eta;
        }
        if let Some(s) = &overrides.sensitive {
            j.hp.sensitive = Some(s.clone());
        }
        if let Some(seed) = ctx.seed {
            j.hp.seed = seed;
        }
    }
    if let (Some(ae), Some(seed)) = (autoencoder.as_mut(), ctx.seed) {
        ae.seed = seed;
    }
    let mut seen = BTreeSet::new();
    for j in &jobs {
        if !seen.insert(j.name.as_str()) {
            return Err(CliError::config(format!("classifier name `{}` is used twice", j.name)));
        }
    }
    let resolved = Resolved {
        dataset: ctx.resolve(&cfg.dataset),
        autoencoder,
        classifier_defaults: cfg.classifier_defaults,
        classifiers: jobs,
    };
    let ds = load_dataset(&resolved.dataset)?;
    for j in &resolved.classifiers {
        ds.attribute_index(&j.attribute)?;
    }
    ctx.record(&resolved)?;

    if let Some(hp) = &resolved.autoencoder {
        log::info!("training autoencoder ({} epochs)", hp.epochs);
        let trained = train_autoencoder(&ds, hp)?;
        let dir = ctx.path(AUTOENCODER_DIR);
        trained.encoder.save(&dir.join("encoder"))?;
        trained.decoder.save(&dir.join("decoder"))?;
        ctx.write(&format!("{AUTOENCODER_DIR}/loss.csv"), loss_csv(&trained.history))?;
        let last = trained.history.last().map(|e| e.valid_loss).unwrap_or(f64::NAN);
        println!("autoencoder: valid mse {}", g9(last));
    }

    let mut summary = csv_line(["name", "attribute", "mode", "valid_accuracy", "test_accuracy"]);
    for j in &resolved.classifiers {
        log::info!("training classifier {} on {} ({})", j.name, j.attribute, j.hp.mode.as_str());
        let mut trained = train_classifier(&ds, &j.attribute, &j.hp)?;
        trained.checkpoint.name = j.name.clone();
        let dir = format!("{CLASSIFIER_DIR}/{}", j.name);
        trained.checkpoint.save(&ctx.path(&dir))?;
        ctx.write(&format!("{dir}/loss.csv"), loss_csv(&trained.history))?;
        let c = trained.classifier()?;
        let valid = evaluate_accuracy(&c, &ds, &j.attribute, &ds.split.valid)?;
        let test = evaluate_accuracy(&c, &ds, &j.attribute, &ds.split.test)?;
        println!("{}: valid accuracy {valid:.3}, test accuracy {test:.3}", j.name);
        summary.push_str(&csv_line([
            j.name.clone(),
            j.attribute.clone(),
            j.hp.mode.as_str().to_string(),
            g9(valid),
            g9(test),
        ]));
    }
    if !resolved.classifiers.is_empty() {
        ctx.write("classifiers.csv", summary)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entries_override_defaults() {
        let defaults = ClassifierHyperparams {
            epochs: 7,
            ..Default::default()
        };
        let entry: Map<String, Value> =
            serde_json::from_str(r#"{"attribute": "frame", "weight_decay": 30}"#).unwrap();
        let j = job(0, entry, &defaults).unwrap();
        assert_eq!(j.name, "frame");
        assert_eq!(j.hp.epochs, 7);
        assert_eq!(j.hp.weight_decay, 30.0);
    }

    #[test]
    fn unknown_entry_field_is_a_config_error() {
        let entry: Map<String, Value> = serde_json::from_str(r#"{"attribute": "frame", "epoch": 3}"#).unwrap();
        let err = job(0, entry, &ClassifierHyperparams::default()).unwrap_err();
        assert_eq!(err.code, crate::exit::CONFIG);
        let entry: Map<String, Value> = serde_json::from_str(r#"{"name": "x"}"#).unwrap();
        assert!(job(1, entry, &ClassifierHyperparams::default()).is_err());
    }
}
