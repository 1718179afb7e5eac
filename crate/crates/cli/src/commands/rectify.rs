use std::path::PathBuf;
use std::sync::Arc;

use cfalign::alignment::{cross_alignment, AlignmentConfig};
use cfalign::bias::{finish, induce_bias, rectify_continue, rectify_init, RectifyHyperparams, RectifyState};
use cfalign::format::{csv_line, g9};
use cfalign::models::{CompositeClassifier, Predictor};
use cfalign::report::alignment_svg;
use serde::{Deserialize, Serialize};

use crate::artifacts::{load_dataset, Models};
use crate::context::Context;
use crate::exit::{CliError, CliResult};

fn default_coefficient() -> f64 {
    0.3
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RectifyConfig {
    dataset: PathBuf,
    models: PathBuf,
    /// Classifier whose influence is removed.
    bias: String,
    /// Each target is rectified separately, starting from `target + coefficient * bias`.
    targets: Vec<String>,
    #[serde(default = "default_coefficient")]
    coefficient: f64,
    #[serde(default)]
    hyperparams: RectifyHyperparams,
    /// Settings for the before/after alignment matrices.
    #[serde(default)]
    matrix: AlignmentConfig,
    /// Matrix columns; empty means every trained classifier.
    #[serde(default)]
    downstream: Vec<String>,
}

/// Everything needed to resume a rectification run.
#[derive(Debug, Serialize, Deserialize)]
struct StateFile {
    target: String,
    bias: String,
    coefficient: f64,
    hyperparams: RectifyHyperparams,
    state: RectifyState,
}

impl StateFile {
    /// A saved run may be continued with a different iteration budget or
    /// patience, nothing else.
    fn compatible(&self, target: &str, bias: &str, coefficient: f64, hp: &RectifyHyperparams) -> bool {
        let strip = |hp: &RectifyHyperparams| RectifyHyperparams {
            max_iters: 0,
            patience: 0,
            ..hp.clone()
        };
        self.target == target
            && self.bias == bias
            && self.coefficient == coefficient
            && strip(&self.hyperparams) == strip(hp)
    }
}

fn named(name: &str, p: Arc<dyn Predictor>) -> CliResult<Arc<dyn Predictor>> {
    Ok(Arc::new(CompositeClassifier::new(name, vec![(p, 1.0)])?))
}

pub fn run(ctx: &Context, resume: bool) -> CliResult<()> {
    let mut cfg: RectifyConfig = ctx.load()?;
    cfg.dataset = ctx.resolve(&cfg.dataset);
    cfg.models = ctx.resolve(&cfg.models);
    if let Some(seed) = ctx.seed {
        cfg.hyperparams.seed = seed;
        cfg.matrix.seed = seed;
    }
    cfg.hyperparams.validate()?;
    cfg.matrix.search.validate()?;
    if cfg.targets.is_empty() {
        return Err(CliError::config("`targets` is empty"));
    }
    if cfg.targets.contains(&cfg.bias) {
        return Err(CliError::config(format!("`{}` is both the bias and a target", cfg.bias)));
    }
    let ds = load_dataset(&cfg.dataset)?;
    let models = Models::load(&cfg.models, &[])?;
    if cfg.downstream.is_empty() {
        cfg.downstream = models.names();
    }
    let bias: Arc<dyn Predictor> = models.get(&cfg.bias)?;
    let downstream = cfg.downstream.iter().map(|n| models.get(n)).collect::<CliResult<Vec<_>>>()?;
    let targets = cfg.targets.iter().map(|n| models.get(n)).collect::<CliResult<Vec<_>>>()?;
    ctx.record(&cfg)?;

    let ae = &models.autoencoder;
    let hp = &cfg.hyperparams;
    let mut summary = csv_line([
        "target",
        "coefficient",
        "best_beta",
        "initial_valid_psi",
        "best_valid_psi",
        "iterations",
        "stopped_early",
        "diverged",
    ]);
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (name, t) in cfg.targets.iter().zip(&targets) {
        let start: Arc<dyn Predictor> = Arc::new(induce_bias(t.clone(), bias.clone(), cfg.coefficient)?);
        let state_rel = format!("{name}/state.json");
        let state_path = ctx.path(&state_rel);
        let state = if resume && state_path.is_file() {
            let text = std::fs::read_to_string(&state_path).map_err(|e| CliError::io(&state_path, e))?;
            let saved: StateFile = serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", state_path.display())))?;
            if !saved.compatible(name, &cfg.bias, cfg.coefficient, hp) {
                return Err(CliError::config(format!(
                    "{} was written with different settings and cannot be resumed",
                    state_path.display()
                )));
            }
            log::info!("resuming {name} at iteration {}", saved.state.iteration);
            saved.state
        } else {
            rectify_init(&start, &bias, &ds, ae, hp)?
        };
        let mut save = |s: &RectifyState| -> cfalign::Result<()> {
            log::info!("{name}: iteration {} beta {} psi {}", s.iteration, g9(s.beta), g9(s.psi));
            let file = StateFile {
                state: s.clone(),
                hyperparams: hp.clone(),
                target: name.clone(),
                bias: cfg.bias.clone(),
                coefficient: cfg.coefficient,
            };
            ctx.write_json(&state_rel, &file)
                .map(|_| ())
                .map_err(|e| cfalign::Error::Io {
                    path: state_path.clone(),
                    source: std::io::Error::other(e.message),
                })
        };
        let state = rectify_continue(&start, &bias, &ds, ae, hp, state, &mut save)?;
        save(&state)?;
        let outcome = finish(&start, &bias, state)?;
        let s = &outcome.state;
        ctx.write(&format!("{name}/curves.csv"), s.curves_csv())?;
        let opt = |v: Option<f64>| v.map(g9).unwrap_or_else(|| "nan".into());
        summary.push_str(&csv_line([
            name.clone(),
            g9(cfg.coefficient),
            g9(s.best_beta),
            opt(s.initial_valid_psi),
            opt(s.best_valid_psi),
            s.iteration.to_string(),
            s.stopped_early.to_string(),
            outcome.diverged.to_string(),
        ]));
        println!(
            "{name}: beta* {} (coefficient {} -> {}), valid psi {} -> {}{}",
            g9(s.best_beta),
            g9(cfg.coefficient),
            g9(cfg.coefficient + s.best_beta),
            opt(s.initial_valid_psi),
            opt(s.best_valid_psi),
            if outcome.diverged { ", diverged" } else { "" }
        );
        before.push(named(name, start.clone())?);
        after.push(named(name, Arc::new(outcome.rectified))?);
    }
    ctx.write("rectify.csv", summary)?;

    let cols: Vec<&dyn Predictor> = downstream.iter().map(|c| c.as_ref() as &dyn Predictor).collect();
    for (label, bases) in [("before", &before), ("after", &after)] {
        let rows: Vec<&dyn Predictor> = bases.iter().map(|b| b.as_ref()).collect();
        let run = cross_alignment(&rows, &cols, &ds, ae, &cfg.matrix)?;
        ctx.write(&format!("{label}.csv"), run.matrix.to_csv())?;
        let title = format!("Relative change {label} rectification ({} planted at {})", cfg.bias, g9(cfg.coefficient));
        ctx.write(&format!("{label}.svg"), alignment_svg(&title, &run.matrix))?;
        for t in &cfg.targets {
            if let Some(s) = run.matrix.get(t, &cfg.bias) {
                println!("{label}: {t} -> {} relative change {} (n {})", cfg.bias, g9(s.mean), s.n);
            }
        }
    }
    Ok(())
}
