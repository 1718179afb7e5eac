use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use cfalign::alignment::{records_for_cf, AlignmentRecord};
use cfalign::bias::{detect_bias, induce_bias, DetectConfig};
use cfalign::cf::CFResult;
use cfalign::format::{csv_line, g9};
use cfalign::models::{Autoencoder, Predictor};
use cfalign::report::{montage_svg, pgm, sweep_svg};
use serde::{Deserialize, Serialize};

use super::{sweep_on, SweepGrid};
use crate::artifacts::{load_dataset, Models};
use crate::context::Context;
use crate::exit::CliResult;

fn default_coefficient() -> f64 {
    0.3
}

fn default_examples() -> usize {
    3
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BiasConfig {
    dataset: PathBuf,
    models: PathBuf,
    target: String,
    planted: String,
    #[serde(default = "default_coefficient")]
    coefficient: f64,
    #[serde(default)]
    detect: DetectConfig,
    /// Samples for which sweeps and images are written.
    #[serde(default = "default_examples")]
    examples: usize,
    #[serde(default)]
    grid: SweepGrid,
}

fn by_row(
    base: &dyn Predictor,
    planted: &dyn Predictor,
    ae: &Autoencoder,
    cfs: &[(usize, CFResult)],
    min_base_delta: f64,
) -> CliResult<BTreeMap<usize, AlignmentRecord>> {
    let mut out = BTreeMap::new();
    for (row, cf) in cfs {
        let r = records_for_cf(base, &[planted], &ae.decoder, cf, *row, min_base_delta)?;
        out.insert(*row, r.into_iter().next().expect("one downstream record"));
    }
    Ok(out)
}

fn cells(r: Option<&AlignmentRecord>) -> [String; 3] {
    match r {
        Some(r) => [g9(r.r_value), g9(r.base_delta), r.included.to_string()],
        None => ["nan".into(), "nan".into(), "false".into()],
    }
}

pub fn run(ctx: &Context) -> CliResult<()> {
    let mut cfg: BiasConfig = ctx.load()?;
    cfg.dataset = ctx.resolve(&cfg.dataset);
    cfg.models = ctx.resolve(&cfg.models);
    if let Some(seed) = ctx.seed {
        cfg.detect.seed = seed;
    }
    cfg.detect.search.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let models = Models::load(&cfg.models, &[])?;
    let target = models.get(&cfg.target)?;
    let planted = models.get(&cfg.planted)?;
    ctx.record(&cfg)?;

    let target_dyn: Arc<dyn Predictor> = target.clone();
    let planted_dyn: Arc<dyn Predictor> = planted.clone();
    let biased = induce_bias(target_dyn, planted_dyn, cfg.coefficient)?;
    log::info!("detecting {} in {}", cfg.planted, biased.name());
    let ae = &models.autoencoder;
    let det = detect_bias(
        &biased,
        target.as_ref(),
        planted.as_ref(),
        Some(cfg.coefficient),
        &ds,
        ae,
        &cfg.detect,
    )?;
    let report = &det.report;
    ctx.write_json("report.json", report)?;

    let before = by_row(target.as_ref(), planted.as_ref(), ae, &det.before, cfg.detect.min_base_delta)?;
    let after = by_row(&biased, planted.as_ref(), ae, &det.after, cfg.detect.min_base_delta)?;
    let mut table = csv_line([
        "sample_id",
        "r_before",
        "base_delta_before",
        "included_before",
        "r_after",
        "base_delta_after",
        "included_after",
    ]);
    for row in &report.samples {
        let mut line = vec![row.to_string()];
        line.extend(cells(before.get(row)));
        line.extend(cells(after.get(row)));
        table.push_str(&csv_line(line));
    }
    ctx.write("r_values.csv", table)?;

    let after_cfs: BTreeMap<usize, &CFResult> = det.after.iter().map(|(r, cf)| (*r, cf)).collect();
    let pairs: Vec<(usize, &CFResult, &CFResult)> = det
        .before
        .iter()
        .filter_map(|(row, b)| after_cfs.get(row).map(|a| (*row, b, *a)))
        .take(cfg.examples)
        .collect();
    let side = ds.side();
    let shown: [&dyn Predictor; 2] = [target.as_ref(), planted.as_ref()];
    let mut originals = Vec::new();
    for (row, b, a) in &pairs {
        let dir = format!("examples/sample_{row}");
        let sb = sweep_on(cfg.grid, target.as_ref(), &shown, &ae.decoder, b)?;
        let sa = sweep_on(cfg.grid, &biased, &shown, &ae.decoder, a)?;
        ctx.write(&format!("{dir}/sweep_before.csv"), sb.to_csv())?;
        ctx.write(&format!("{dir}/sweep_before.svg"), sweep_svg(&sb))?;
        ctx.write(&format!("{dir}/sweep_after.csv"), sa.to_csv())?;
        ctx.write(&format!("{dir}/sweep_after.svg"), sweep_svg(&sa))?;
        let x = ds.image(*row);
        ctx.write(&format!("{dir}/original.pgm"), pgm(x.data(), side))?;
        ctx.write(&format!("{dir}/cf_before.pgm"), pgm(b.x_cf.data(), side))?;
        ctx.write(&format!("{dir}/cf_after.pgm"), pgm(a.x_cf.data(), side))?;
        originals.push(x);
    }
    let rows: Vec<(String, Vec<&[f64]>)> = pairs
        .iter()
        .zip(&originals)
        .map(|((row, b, a), x)| {
            (format!("sample {row}"), vec![x.data(), b.x0_recon.data(), b.x_cf.data(), a.x_cf.data()])
        })
        .collect();
    let titles = ["original", "reconstruction", &format!("cf {}", cfg.target), &format!("cf {}", biased.name())];
    ctx.write("examples/montage.svg", montage_svg(&titles, &rows, side))?;

    println!(
        "relative change of {}: before {} ± {} (n {}), after {} ± {} (n {}), gap {}",
        cfg.planted,
        g9(report.r_before.mean),
        g9(report.r_before.stderr),
        report.r_before.n,
        g9(report.r_after.mean),
        g9(report.r_after.stderr),
        report.r_after.n,
        g9(report.gap())
    );
    if report.low_support {
        log::warn!("fewer than {} samples passed the base-change filter", cfg.detect.min_support);
    }
    Ok(())
}
