//! Planting, detecting and rectifying a known bias by classifier composition.
//!
//! Rectification adjusts `beta` in `f_target + beta * f_bias` with the
//! recurrence
//!
//! ```text
//! beta_{n+1} = beta_n - lr * psi_n + momentum * (beta_n - beta_{n-1})
//! ```
//!
//! where `psi_n` is the mean relative change of `f_bias` under counterfactuals
//! of the current composite on a minibatch. Only samples whose counterfactual
//! lowers the composite by more than `base_change` enter a minibatch.

use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{
    counterfactuals, positive_rows, records_for_cf, select_samples, Summary, DEFAULT_MIN_BASE_DELTA,
};
use crate::cf::{CFResult, SearchConfig};
use crate::data::{Dataset, SplitName};
use crate::error::{Error, Result};
use crate::format::{csv_line, g9};
use crate::models::{Autoencoder, CompositeClassifier, Predictor};
use crate::seed;

/// `f_target + c * f_planted`, named after its terms.
pub fn induce_bias(
    f_target: Arc<dyn Predictor>,
    f_planted: Arc<dyn Predictor>,
    c: f64,
) -> Result<CompositeClassifier> {
    let terms = vec![(f_target, 1.0), (f_planted, c)];
    CompositeClassifier::new(&CompositeClassifier::describe(&terms), terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    pub n_samples: usize,
    pub seed: u64,
    pub min_base_delta: f64,
    pub min_support: usize,
    pub split: SplitName,
    pub search: SearchConfig,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            n_samples: 100,
            seed: 0,
            min_base_delta: DEFAULT_MIN_BASE_DELTA,
            min_support: crate::alignment::DEFAULT_MIN_SUPPORT,
            split: SplitName::Test,
            search: SearchConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasExperimentReport {
    pub base_name: String,
    pub biased_name: String,
    pub planted_name: String,
    pub coefficient: Option<f64>,
    /// Relative change of the planted classifier under counterfactuals of the base.
    pub r_before: Summary,
    /// The same under counterfactuals of the biased composite.
    pub r_after: Summary,
    /// Samples used for both sides.
    pub samples: Vec<usize>,
    pub low_support: bool,
}

impl BiasExperimentReport {
    pub fn gap(&self) -> f64 {
        self.r_after.mean - self.r_before.mean
    }
}

/// Report plus the counterfactuals it was computed from.
#[derive(Clone, Debug)]
pub struct BiasDetection {
    pub report: BiasExperimentReport,
    pub before: Vec<(usize, CFResult)>,
    pub after: Vec<(usize, CFResult)>,
}

fn mean_r(
    base: &dyn Predictor,
    planted: &dyn Predictor,
    ae: &Autoencoder,
    cfs: &[(usize, CFResult)],
    min_base_delta: f64,
) -> Result<Summary> {
    let mut values = Vec::with_capacity(cfs.len());
    for (row, cf) in cfs {
        let r = &records_for_cf(base, &[planted], &ae.decoder, cf, *row, min_base_delta)?[0];
        if r.included {
            values.push(r.r_value);
        }
    }
    Ok(Summary::of(&values))
}

/// Mean relative change of `f_planted` under counterfactuals of `f_target`
/// and of `f_biased`, on the same samples: those where both score the
/// reconstruction above 0.5.
pub fn detect_bias(
    f_biased: &dyn Predictor,
    f_target: &dyn Predictor,
    f_planted: &dyn Predictor,
    coefficient: Option<f64>,
    dataset: &Dataset,
    ae: &Autoencoder,
    cfg: &DetectConfig,
) -> Result<BiasDetection> {
    let rows = dataset.split.get(cfg.split);
    let pos_target = positive_rows(f_target, ae, dataset, rows)?;
    let pos_both = positive_rows(f_biased, ae, dataset, &pos_target)?;
    let samples = select_samples(&pos_both, cfg.n_samples, cfg.seed, 0);
    if samples.len() < cfg.n_samples {
        log::warn!(
            "only {} of {} requested samples are positive for {} and {}",
            samples.len(),
            cfg.n_samples,
            f_target.name(),
            f_biased.name()
        );
    }
    let (before, _) = counterfactuals(f_target, ae, dataset, &samples, &cfg.search)?;
    let (after, _) = counterfactuals(f_biased, ae, dataset, &samples, &cfg.search)?;
    let r_before = mean_r(f_target, f_planted, ae, &before, cfg.min_base_delta)?;
    let r_after = mean_r(f_biased, f_planted, ae, &after, cfg.min_base_delta)?;
    let low_support = r_before.n.min(r_after.n) < cfg.min_support;
    Ok(BiasDetection {
        report: BiasExperimentReport {
            base_name: f_target.name().to_string(),
            biased_name: f_biased.name().to_string(),
            planted_name: f_planted.name().to_string(),
            coefficient,
            r_before,
            r_after,
            samples,
            low_support,
        },
        before,
        after,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RectifyHyperparams {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Minimum drop of the composite for a training sample to count.
    pub base_change: f64,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub valid_size: usize,
    /// Minimum drop of the composite for a validation sample to count.
    pub valid_min_base_delta: f64,
    pub beta0: f64,
    pub seed: u64,
    pub search: SearchConfig,
}

impl Default for RectifyHyperparams {
    fn default() -> Self {
        RectifyHyperparams {
            lr: 0.001,
            momentum: 0.1,
            batch_size: 10,
            max_iters: 200,
            base_change: 0.6,
            patience: 10,
            valid_size: 64,
            valid_min_base_delta: DEFAULT_MIN_BASE_DELTA,
            beta0: 0.0,
            seed: 0,
            search: SearchConfig::default(),
        }
    }
}

impl RectifyHyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.valid_size == 0 {
            return Err(Error::Config("batch_size and valid_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.momentum.is_finite() && self.beta0.is_finite()) {
            return Err(Error::Config("lr, momentum and beta0 must be finite".into()));
        }
        self.search.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    /// The beta the iteration's counterfactuals were generated with.
    pub beta: f64,
    pub train_psi: f64,
    pub valid_psi: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifyState {
    pub beta: f64,
    pub beta_prev: f64,
    /// Training psi of the latest iteration.
    pub psi: f64,
    /// `beta - beta_prev`.
    pub momentum_term: f64,
    pub iteration: usize,
    pub curves: Vec<CurvePoint>,
    /// Training rows positive under the starting composite.
    pub pool: Vec<usize>,
    /// Draws consumed from the pool across all iterations.
    pub cursor: usize,
    pub valid_rows: Vec<usize>,
    pub initial_valid_psi: Option<f64>,
    pub best_beta: f64,
    pub best_valid_psi: Option<f64>,
    /// Validation checks since the last improvement.
    pub stall: usize,
    pub stopped_early: bool,
}

impl RectifyState {
    /// The curves as CSV with columns `iteration,beta,train_psi,valid_psi`.
    pub fn curves_csv(&self) -> String {
        let mut out = csv_line(["iteration", "beta", "train_psi", "valid_psi"]);
        for c in &self.curves {
            out.push_str(&csv_line([c.iteration.to_string(), g9(c.beta), g9(c.train_psi), g9(c.valid_psi)]));
        }
        out
    }

    /// True when no update ever did better on validation than the starting beta.
    pub fn diverged(&self) -> bool {
        let Some(initial) = self.initial_valid_psi else {
            return false;
        };
        let after = self
            .curves
            .iter()
            .skip(1)
            .map(|c| c.valid_psi.abs())
            .filter(|v| v.is_finite())
            .fold(f64::INFINITY, f64::min);
        self.curves.len() > 1 && after > initial.abs()
    }

    fn draw(&self, k: usize, seed_value: u64) -> usize {
        let n = self.pool.len();
        let epoch = (k / n) as u64;
        let mut order = self.pool.clone();
        order.shuffle(&mut seed::rng(seed_value, seed::RECTIFY, epoch));
        order[k % n]
    }
}

fn composite(f_target: &Arc<dyn Predictor>, f_bias: &Arc<dyn Predictor>, beta: f64) -> Result<CompositeClassifier> {
    induce_bias(f_target.clone(), f_bias.clone(), beta)
}

/// Relative changes of `f_bias` under counterfactuals of `comp`, for rows
/// whose composite drop passes `keep`.
fn psi(
    comp: &CompositeClassifier,
    f_bias: &dyn Predictor,
    ae: &Autoencoder,
    dataset: &Dataset,
    rows: &[usize],
    search: &SearchConfig,
    keep: impl Fn(f64) -> bool,
) -> Result<Vec<f64>> {
    let (cfs, _) = counterfactuals(comp, ae, dataset, rows, search)?;
    let mut values = Vec::new();
    for (row, cf) in &cfs {
        let r = &records_for_cf(comp, &[f_bias], &ae.decoder, cf, *row, 0.0)?[0];
        if keep(-r.base_delta) {
            values.push(r.r_value);
        }
    }
    Ok(values)
}

/// Fresh state for a rectification run.
pub fn rectify_init(
    f_target: &Arc<dyn Predictor>,
    f_bias: &Arc<dyn Predictor>,
    dataset: &Dataset,
    ae: &Autoencoder,
    hp: &RectifyHyperparams,
) -> Result<RectifyState> {
    hp.validate()?;
    let start = composite(f_target, f_bias, hp.beta0)?;
    let pool = positive_rows(&start, ae, dataset, &dataset.split.train)?;
    if pool.len() < hp.batch_size {
        return Err(Error::InsufficientSamples(format!(
            "{} training samples are positive for {}, batch needs {}",
            pool.len(),
            start.name(),
            hp.batch_size
        )));
    }
    let valid_pos = positive_rows(&start, ae, dataset, &dataset.split.valid)?;
    let valid_rows = select_samples(&valid_pos, hp.valid_size, hp.seed, 1 << 20);
    Ok(RectifyState {
        beta: hp.beta0,
        beta_prev: hp.beta0,
        psi: 0.0,
        momentum_term: 0.0,
        iteration: 0,
        curves: Vec::new(),
        pool,
        cursor: 0,
        valid_rows,
        initial_valid_psi: None,
        best_beta: hp.beta0,
        best_valid_psi: None,
        stall: 0,
        stopped_early: false,
    })
}

/// Runs rectification iterations on `state` until `max_iters` or early stop.
/// `on_iteration` sees the state after every iteration.
pub fn rectify_continue(
    f_target: &Arc<dyn Predictor>,
    f_bias: &Arc<dyn Predictor>,
    dataset: &Dataset,
    ae: &Autoencoder,
    hp: &RectifyHyperparams,
    mut state: RectifyState,
    on_iteration: &mut dyn FnMut(&RectifyState) -> Result<()>,
) -> Result<RectifyState> {
    hp.validate()?;
    while state.iteration < hp.max_iters && !state.stopped_early {
        let comp = composite(f_target, f_bias, state.beta)?;

        let mut batch = Vec::with_capacity(hp.batch_size);
        let limit = state.cursor + state.pool.len();
        while batch.len() < hp.batch_size {
            if state.cursor >= limit {
                return Err(Error::InsufficientSamples(format!(
                    "iteration {}: fewer than {} samples pass the base-change > {} filter for {}",
                    state.iteration,
                    hp.batch_size,
                    hp.base_change,
                    comp.name()
                )));
            }
            let want = (hp.batch_size - batch.len()).min(limit - state.cursor);
            let rows: Vec<usize> = (state.cursor..state.cursor + want)
                .map(|k| state.draw(k, hp.seed))
                .collect();
            state.cursor += want;
            let values = psi(&comp, f_bias.as_ref(), ae, dataset, &rows, &hp.search, |d| d > hp.base_change)?;
            batch.extend(values);
        }
        let train_psi = crate::stats::mean(&batch);

        let valid = psi(
            &comp,
            f_bias.as_ref(),
            ae,
            dataset,
            &state.valid_rows,
            &hp.search,
            |d| d >= hp.valid_min_base_delta,
        )?;
        let valid_psi = if valid.is_empty() {
            f64::NAN
        } else {
            Summary::of(&valid).mean
        };
        if state.initial_valid_psi.is_none() {
            state.initial_valid_psi = Some(valid_psi);
        }
        let improved = valid_psi.is_finite()
            && state.best_valid_psi.is_none_or(|b| valid_psi.abs() < b.abs());
        if improved {
            state.best_valid_psi = Some(valid_psi);
            state.best_beta = state.beta;
            state.stall = 0;
        } else {
            state.stall += 1;
        }
        state.curves.push(CurvePoint {
            iteration: state.iteration,
            beta: state.beta,
            train_psi,
            valid_psi,
        });
        log::info!(
            "rectify {} iteration {}: beta {:.5}, train psi {:.4}, valid psi {:.4}",
            comp.name(),
            state.iteration,
            state.beta,
            train_psi,
            valid_psi
        );

        let next = state.beta - hp.lr * train_psi + hp.momentum * (state.beta - state.beta_prev);
        if !next.is_finite() {
            return Err(Error::Divergence {
                epoch: state.iteration,
                detail: format!("beta became {next}"),
            });
        }
        state.beta_prev = state.beta;
        state.beta = next;
        state.momentum_term = state.beta - state.beta_prev;
        state.psi = train_psi;
        state.iteration += 1;
        if state.stall >= hp.patience {
            state.stopped_early = true;
        }
        on_iteration(&state)?;
    }
    Ok(state)
}

#[derive(Clone, Debug)]
pub struct RectifyOutcome {
    pub state: RectifyState,
    /// `f_target + best_beta * f_bias`.
    pub rectified: CompositeClassifier,
    pub diverged: bool,
}

/// Full rectification run from `beta0`.
pub fn rectify(
    f_target: &Arc<dyn Predictor>,
    f_bias: &Arc<dyn Predictor>,
    dataset: &Dataset,
    ae: &Autoencoder,
    hp: &RectifyHyperparams,
    on_iteration: &mut dyn FnMut(&RectifyState) -> Result<()>,
) -> Result<RectifyOutcome> {
    let state = rectify_init(f_target, f_bias, dataset, ae, hp)?;
    let state = rectify_continue(f_target, f_bias, dataset, ae, hp, state, on_iteration)?;
    finish(f_target, f_bias, state)
}

/// Wraps a finished state into its outcome.
pub fn finish(f_target: &Arc<dyn Predictor>, f_bias: &Arc<dyn Predictor>, state: RectifyState) -> Result<RectifyOutcome> {
    let rectified = composite(f_target, f_bias, state.best_beta)?;
    let diverged = state.diverged();
    if diverged {
        log::warn!("rectification of {} did not improve on its starting beta", f_target.name());
    }
    Ok(RectifyOutcome {
        state,
        rectified,
        diverged,
    })
}
