use std::path::PathBuf;

use cfalign::alignment::{alignment_matrix, flag_disagreements, label_correlation, prediction_correlation, AlignmentConfig};
use cfalign::format::{csv_line, g9};
use cfalign::report::{alignment_svg, correlation_svg};
use serde::{Deserialize, Serialize};

use crate::artifacts::{correlation_csv, load_dataset, records_csv, Models};
use crate::context::Context;
use crate::exit::{CliError, CliResult, LOW_SUPPORT};

fn default_gap() -> f64 {
    0.3
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlignConfig {
    dataset: PathBuf,
    /// Output directory of `train`.
    models: PathBuf,
    /// Classifier names; empty means every trained classifier.
    #[serde(default)]
    classifiers: Vec<String>,
    #[serde(default)]
    alignment: AlignmentConfig,
    /// Minimum `| |R| - |label correlation| |` for a cell to be flagged.
    #[serde(default = "default_gap")]
    flag_gap: f64,
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let mut cfg: AlignConfig = ctx.load()?;
    cfg.dataset = ctx.resolve(&cfg.dataset);
    cfg.models = ctx.resolve(&cfg.models);
    if let Some(seed) = ctx.seed {
        cfg.alignment.seed = seed;
    }
    if cfg.flag_gap.is_nan() || cfg.flag_gap < 0.0 {
        return Err(CliError::config(format!("flag_gap must be non-negative, got {}", cfg.flag_gap)));
    }
    cfg.alignment.search.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let models = Models::load(&cfg.models, &cfg.classifiers)?;
    cfg.classifiers = models.names();
    ctx.record(&cfg)?;

    let predictors = models.predictors();
    log::info!("aligning {} classifiers, {} samples each", predictors.len(), cfg.alignment.n_per_class);
    let run = alignment_matrix(&predictors, &ds, &models.autoencoder, &cfg.alignment)?;
    let preds = prediction_correlation(&predictors, &ds, ds.split.get(cfg.alignment.split))?;
    let labels = label_correlation(&ds)?;
    let attributes: Vec<String> = models.classifiers.iter().map(|c| c.attribute.clone()).collect();
    let flags = flag_disagreements(&run.matrix, &labels, &attributes, cfg.flag_gap);

    ctx.write("alignment.csv", run.matrix.to_csv())?;
    ctx.write("alignment.svg", alignment_svg("CF alignment: mean relative change", &run.matrix))?;
    ctx.write("records.csv", records_csv(&run.records))?;
    ctx.write("prediction_correlation.csv", correlation_csv(&preds))?;
    ctx.write("prediction_correlation.svg", correlation_svg("Prediction correlation", &preds))?;
    ctx.write("label_correlation.csv", correlation_csv(&labels))?;
    ctx.write("label_correlation.svg", correlation_svg("Label correlation", &labels))?;
    let mut flags_csv = csv_line(["base", "downstream", "r_mean", "label_correlation", "kind"]);
    for f in &flags {
        let kind = serde_json::to_value(f.kind).expect("flag kind serializes");
        flags_csv.push_str(&csv_line([
            f.base.clone(),
            f.downstream.clone(),
            g9(f.r_mean),
            g9(f.label_correlation),
            kind.as_str().unwrap_or_default().to_string(),
        ]));
    }
    ctx.write("flags.csv", flags_csv)?;

    print!("{}", run.matrix.to_csv());
    for (base, skipped) in run.matrix.base_names.iter().zip(&run.degenerate) {
        if !skipped.is_empty() {
            log::warn!("{base}: {} samples had no latent gradient and were skipped", skipped.len());
        }
    }
    println!("{} flagged cells", flags.len());
    if run.matrix.low_support.iter().all(|l| *l) {
        return Err(CliError::new(
            LOW_SUPPORT,
            format!(
                "every row has fewer than {} samples passing the base-change filter",
                cfg.alignment.min_support
            ),
        ));
    }
    Ok(())
}
