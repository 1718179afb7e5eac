use std::path::PathBuf;

use cfalign::cf::{decode, encode, search_from_latent, SearchConfig};
use cfalign::format::{csv_line, g9};
use cfalign::models::Predictor;
use cfalign::report::{montage_svg, pgm, sweep_svg};
use serde::{Deserialize, Serialize};

use super::{sweep_on, SweepGrid};
use crate::artifacts::{load_dataset, Models};
use crate::context::Context;
use crate::exit::{CliError, CliResult, INELIGIBLE};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CfConfig {
    dataset: PathBuf,
    models: PathBuf,
    base: String,
    /// Classifiers plotted alongside the base; empty means every trained classifier.
    #[serde(default)]
    downstream: Vec<String>,
    /// Dataset row indices.
    samples: Vec<usize>,
    #[serde(default)]
    grid: SweepGrid,
    #[serde(default)]
    search: SearchConfig,
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let mut cfg: CfConfig = ctx.load()?;
    cfg.dataset = ctx.resolve(&cfg.dataset);
    cfg.models = ctx.resolve(&cfg.models);
    cfg.search.validate()?;
    if cfg.samples.is_empty() {
        return Err(CliError::config("`samples` is empty"));
    }
    let ds = load_dataset(&cfg.dataset)?;
    let models = Models::load(&cfg.models, &[])?;
    if cfg.downstream.is_empty() {
        cfg.downstream = models.names();
    }
    let base = models.get(&cfg.base)?;
    let downstream = cfg.downstream.iter().map(|n| models.get(n)).collect::<CliResult<Vec<_>>>()?;
    let downstream: Vec<&dyn Predictor> = downstream.iter().map(|c| c.as_ref() as &dyn Predictor).collect();
    if let Some(bad) = cfg.samples.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::config(format!("sample {bad} is out of range (dataset has {})", ds.len())));
    }
    ctx.record(&cfg)?;

    let ae = &models.autoencoder;
    let mut latents = Vec::with_capacity(cfg.samples.len());
    for &i in &cfg.samples {
        let z0 = encode(&ae.encoder, &ds.image(i))?;
        let p = base.predict_batch(&decode(&ae.decoder, &z0)?)?[0];
        if p <= 0.5 {
            return Err(CliError::new(
                INELIGIBLE,
                format!("sample {i}: {} predicts {} on the reconstruction, not a positive prediction", cfg.base, g9(p)),
            ));
        }
        latents.push(z0);
    }

    let side = ds.side();
    let mut summary = csv_line(["sample_id", "status", "lambda_star", "star_index", "base_pred_0", "base_pred_star", "base_drop"]);
    let mut originals = Vec::new();
    let mut results = Vec::new();
    for (&i, z0) in cfg.samples.iter().zip(latents) {
        let res = search_from_latent(base.as_ref(), &ae.decoder, z0, &cfg.search)?;
        let trace = sweep_on(cfg.grid, base.as_ref(), &downstream, &ae.decoder, &res)?;
        let dir = format!("sample_{i}");
        ctx.write(&format!("{dir}/sweep.csv"), trace.to_csv())?;
        ctx.write(&format!("{dir}/sweep.svg"), sweep_svg(&trace))?;
        let original = ds.image(i);
        ctx.write(&format!("{dir}/original.pgm"), pgm(original.data(), side))?;
        ctx.write(&format!("{dir}/reconstruction.pgm"), pgm(res.x0_recon.data(), side))?;
        ctx.write(&format!("{dir}/counterfactual.pgm"), pgm(res.x_cf.data(), side))?;
        let status = serde_json::to_value(res.status).expect("status serializes");
        let status = status.as_str().unwrap_or_default().to_string();
        println!(
            "sample {i}: {status}, lambda* {}, {} {} -> {}",
            g9(res.lambda_star),
            cfg.base,
            g9(res.base_pred_0),
            g9(res.base_pred_star)
        );
        summary.push_str(&csv_line([
            i.to_string(),
            status,
            g9(res.lambda_star),
            res.star_index.to_string(),
            g9(res.base_pred_0),
            g9(res.base_pred_star),
            g9(res.base_drop()),
        ]));
        originals.push(original);
        results.push((i, res));
    }
    ctx.write("summary.csv", summary)?;
    let rows: Vec<(String, Vec<&[f64]>)> = results
        .iter()
        .zip(&originals)
        .map(|((i, res), x)| (format!("sample {i}"), vec![x.data(), res.x0_recon.data(), res.x_cf.data()]))
        .collect();
    ctx.write("montage.svg", montage_svg(&["original", "reconstruction", "counterfactual"], &rows, side))?;
    Ok(())
}
