//! Relative change between classifiers and the aggregate alignment matrix.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::cf::{search_from_latent, CFResult, SearchConfig};
use crate::data::{empirical_label_correlation, Dataset, SplitName};
use crate::error::{Error, Result};
use crate::format::{csv_line, g9};
use crate::models::{Autoencoder, Predictor};
use crate::nn::Mlp;
use crate::stats::{self, CorrelationMatrix};
use crate::tensor::Tensor;
use crate::{par, seed};

pub const DEFAULT_MIN_BASE_DELTA: f64 = 0.3;
pub const DEFAULT_MIN_SUPPORT: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub sample_id: usize,
    pub base_name: String,
    pub downstream_name: String,
    pub r_value: f64,
    pub base_delta: f64,
    pub downstream_delta: f64,
    pub included: bool,
}

impl AlignmentRecord {
    pub fn from_deltas(
        sample_id: usize,
        base_name: &str,
        downstream_name: &str,
        base_delta: f64,
        downstream_delta: f64,
        min_base_delta: f64,
    ) -> Self {
        let r_value = if base_delta == 0.0 {
            0.0
        } else {
            downstream_delta / base_delta
        };
        AlignmentRecord {
            sample_id,
            base_name: base_name.to_string(),
            downstream_name: downstream_name.to_string(),
            r_value,
            base_delta,
            downstream_delta,
            included: base_delta.abs() >= min_base_delta,
        }
    }

    /// Re-applies the exclusion rule with another threshold.
    pub fn with_threshold(&self, min_base_delta: f64) -> Self {
        AlignmentRecord {
            included: self.base_delta.abs() >= min_base_delta,
            ..self.clone()
        }
    }
}

/// Predictions of `f` on `D(z0)` and `D(z_star)`, decoded as one batch.
fn endpoint_predictions(f: &dyn Predictor, images: &Tensor) -> Result<(f64, f64)> {
    let p = f.predict_batch(images)?;
    Ok((p[0], p[1]))
}

fn endpoint_images(decoder: &Mlp, z0: &Tensor, z_star: &Tensor) -> Result<Tensor> {
    let d = z0.len();
    let mut z = z0.data().to_vec();
    z.extend_from_slice(z_star.data());
    decoder.forward(&Tensor::matrix(2, d, z)?)
}

/// `R = (f1(D(z*)) - f1(D(z0))) / (f_b(D(z*)) - f_b(D(z0)))` for one sample.
pub fn relative_change(
    f1: &dyn Predictor,
    f_b: &dyn Predictor,
    decoder: &Mlp,
    z0: &Tensor,
    z_star: &Tensor,
    sample_id: usize,
    min_base_delta: f64,
) -> Result<AlignmentRecord> {
    let images = endpoint_images(decoder, z0, z_star)?;
    let (b0, b1) = endpoint_predictions(f_b, &images)?;
    let (d0, d1) = endpoint_predictions(f1, &images)?;
    Ok(AlignmentRecord::from_deltas(
        sample_id,
        f_b.name(),
        f1.name(),
        b1 - b0,
        d1 - d0,
        min_base_delta,
    ))
}

/// One record per downstream classifier for a finished counterfactual.
pub fn records_for_cf(
    f_b: &dyn Predictor,
    downstream: &[&dyn Predictor],
    decoder: &Mlp,
    cf: &CFResult,
    sample_id: usize,
    min_base_delta: f64,
) -> Result<Vec<AlignmentRecord>> {
    let images = endpoint_images(decoder, &cf.z0, &cf.z_star)?;
    let (b0, b1) = endpoint_predictions(f_b, &images)?;
    downstream
        .iter()
        .map(|f1| {
            let (d0, d1) = endpoint_predictions(*f1, &images)?;
            Ok(AlignmentRecord::from_deltas(
                sample_id,
                f_b.name(),
                f1.name(),
                b1 - b0,
                d1 - d0,
                min_base_delta,
            ))
        })
        .collect()
}

/// Mean and standard error of a set of values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
}

impl Summary {
    /// Order-independent: values are sorted before summation. Empty input
    /// gives a NaN mean.
    pub fn of(values: &[f64]) -> Self {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: if v.is_empty() { f64::NAN } else { stats::mean(&v) },
            stderr: stats::stderr(&v),
            n: v.len(),
        }
    }
}

/// Summary of included `r_value`s for one (base, downstream) pair.
pub fn summarize(records: &[AlignmentRecord], base: &str, downstream: &str) -> Summary {
    summarize_with(records, base, downstream, |r| r)
}

/// Summary of included `|r_value|`s for one (base, downstream) pair.
pub fn summarize_abs(records: &[AlignmentRecord], base: &str, downstream: &str) -> Summary {
    summarize_with(records, base, downstream, f64::abs)
}

fn summarize_with(records: &[AlignmentRecord], base: &str, downstream: &str, f: fn(f64) -> f64) -> Summary {
    let values: Vec<f64> = records
        .iter()
        .filter(|r| r.included && r.base_name == base && r.downstream_name == downstream)
        .map(|r| f(r.r_value))
        .collect();
    Summary::of(&values)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMatrix {
    pub base_names: Vec<String>,
    pub downstream_names: Vec<String>,
    pub mean: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub n_included: Vec<Vec<usize>>,
    /// Rows with fewer than `min_support` included samples.
    pub low_support: Vec<bool>,
}

impl AlignmentMatrix {
    /// Aggregates `records` into a matrix with rows and columns in the given order.
    pub fn aggregate(
        base_names: &[String],
        downstream_names: &[String],
        records: &[AlignmentRecord],
        min_support: usize,
    ) -> Self {
        let mut mean = Vec::with_capacity(base_names.len());
        let mut stderr = Vec::with_capacity(base_names.len());
        let mut n_included = Vec::with_capacity(base_names.len());
        let mut low_support = Vec::with_capacity(base_names.len());
        for b in base_names {
            let cells: Vec<Summary> = downstream_names.iter().map(|d| summarize(records, b, d)).collect();
            let support = cells.iter().map(|s| s.n).max().unwrap_or(0);
            low_support.push(support < min_support);
            mean.push(cells.iter().map(|s| s.mean).collect());
            stderr.push(cells.iter().map(|s| s.stderr).collect());
            n_included.push(cells.iter().map(|s| s.n).collect());
        }
        AlignmentMatrix {
            base_names: base_names.to_vec(),
            downstream_names: downstream_names.to_vec(),
            mean,
            stderr,
            n_included,
            low_support,
        }
    }

    pub fn get(&self, base: &str, downstream: &str) -> Option<Summary> {
        let i = self.base_names.iter().position(|n| n == base)?;
        let j = self.downstream_names.iter().position(|n| n == downstream)?;
        Some(Summary {
            mean: self.mean[i][j],
            stderr: self.stderr[i][j],
            n: self.n_included[i][j],
        })
    }

    /// Header of downstream names, one row per base, cells `mean|stderr|n`.
    pub fn to_csv(&self) -> String {
        let mut out = csv_line(std::iter::once("base".to_string()).chain(self.downstream_names.iter().cloned()));
        for (i, b) in self.base_names.iter().enumerate() {
            let mut row = vec![b.clone()];
            for j in 0..self.downstream_names.len() {
                row.push(format!(
                    "{}|{}|{}",
                    g9(self.mean[i][j]),
                    g9(self.stderr[i][j]),
                    self.n_included[i][j]
                ));
            }
            out.push_str(&csv_line(row));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub n_per_class: usize,
    pub seed: u64,
    pub min_base_delta: f64,
    pub min_support: usize,
    pub split: SplitName,
    pub search: SearchConfig,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            n_per_class: 100,
            seed: 0,
            min_base_delta: DEFAULT_MIN_BASE_DELTA,
            min_support: DEFAULT_MIN_SUPPORT,
            split: SplitName::Test,
            search: SearchConfig::default(),
        }
    }
}

/// Everything computed for a matrix, kept so that thresholds can be re-applied.
#[derive(Clone, Debug)]
pub struct AlignmentRun {
    pub matrix: AlignmentMatrix,
    pub records: Vec<AlignmentRecord>,
    /// Samples chosen for each base classifier, in row order.
    pub selected: Vec<Vec<usize>>,
    /// Samples dropped because the base classifier had no latent gradient there.
    pub degenerate: Vec<Vec<usize>>,
}

/// Encodes `rows` of the dataset as one batch, `[rows x latent_dim]`.
pub fn encode_rows(ae: &Autoencoder, dataset: &Dataset, rows: &[usize]) -> Result<Tensor> {
    ae.encoder.forward(&dataset.batch(rows))
}

/// Rows of `candidates` where `f` scores the reconstruction above 0.5.
pub fn positive_rows(f: &dyn Predictor, ae: &Autoencoder, dataset: &Dataset, candidates: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for chunk in candidates.chunks(256) {
        let recon = ae.decoder.forward(&encode_rows(ae, dataset, chunk)?)?;
        let p = f.predict_batch(&recon)?;
        out.extend(chunk.iter().zip(p).filter(|(_, p)| *p > 0.5).map(|(i, _)| *i));
    }
    Ok(out)
}

/// Up to `n` rows from `positive`, drawn without replacement and returned sorted.
pub fn select_samples(positive: &[usize], n: usize, seed_value: u64, stream_index: u64) -> Vec<usize> {
    let mut pool = positive.to_vec();
    pool.shuffle(&mut seed::rng(seed_value, seed::SELECT, stream_index));
    pool.truncate(n);
    pool.sort_unstable();
    pool
}

/// Finished counterfactuals by row, and the rows skipped for a zero latent gradient.
pub type Counterfactuals = (Vec<(usize, CFResult)>, Vec<usize>);

/// Counterfactuals for each row, with zero-gradient samples reported separately.
pub fn counterfactuals(
    f_b: &dyn Predictor,
    ae: &Autoencoder,
    dataset: &Dataset,
    rows: &[usize],
    search: &SearchConfig,
) -> Result<Counterfactuals> {
    search.validate()?;
    let z = encode_rows(ae, dataset, rows)?;
    let results = par::map_indexed(rows.len(), |k| {
        let z0 = Tensor::matrix(1, z.dims2().1, z.row(k).to_vec())?;
        search_from_latent(f_b, &ae.decoder, z0, search)
    });
    let mut done = Vec::with_capacity(rows.len());
    let mut degenerate = Vec::new();
    for (row, res) in rows.iter().zip(results) {
        match res {
            Ok(cf) => done.push((*row, cf)),
            Err(Error::Degenerate(d)) => {
                log::warn!("sample {row}: {d}");
                degenerate.push(*row);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((done, degenerate))
}

/// CF alignment between every pair of `classifiers`; rows are base classifiers.
pub fn alignment_matrix(
    classifiers: &[&dyn Predictor],
    dataset: &Dataset,
    ae: &Autoencoder,
    cfg: &AlignmentConfig,
) -> Result<AlignmentRun> {
    cross_alignment(classifiers, classifiers, dataset, ae, cfg)
}

/// CF alignment of `downstream` classifiers under counterfactuals of each base.
pub fn cross_alignment(
    bases: &[&dyn Predictor],
    downstream: &[&dyn Predictor],
    dataset: &Dataset,
    ae: &Autoencoder,
    cfg: &AlignmentConfig,
) -> Result<AlignmentRun> {
    if bases.is_empty() || downstream.is_empty() {
        return Err(Error::Config("no classifiers to align".into()));
    }
    let rows = dataset.split.get(cfg.split);
    let mut records = Vec::new();
    let mut selected = Vec::with_capacity(bases.len());
    let mut degenerate = Vec::with_capacity(bases.len());
    for (b, f_b) in bases.iter().enumerate() {
        let positive = positive_rows(*f_b, ae, dataset, rows)?;
        let chosen = select_samples(&positive, cfg.n_per_class, cfg.seed, b as u64);
        let (cfs, skipped) = counterfactuals(*f_b, ae, dataset, &chosen, &cfg.search)?;
        for (row, cf) in &cfs {
            records.extend(records_for_cf(*f_b, downstream, &ae.decoder, cf, *row, cfg.min_base_delta)?);
        }
        log::info!(
            "base {}: {} positive, {} selected, {} degenerate",
            f_b.name(),
            positive.len(),
            chosen.len(),
            skipped.len()
        );
        selected.push(chosen);
        degenerate.push(skipped);
    }
    let base_names: Vec<String> = bases.iter().map(|c| c.name().to_string()).collect();
    let ds_names: Vec<String> = downstream.iter().map(|c| c.name().to_string()).collect();
    let matrix = AlignmentMatrix::aggregate(&base_names, &ds_names, &records, cfg.min_support);
    Ok(AlignmentRun {
        matrix,
        records,
        selected,
        degenerate,
    })
}

/// Pearson correlation of classifier outputs over `rows`.
pub fn prediction_correlation(
    classifiers: &[&dyn Predictor],
    dataset: &Dataset,
    rows: &[usize],
) -> Result<CorrelationMatrix> {
    if rows.is_empty() {
        return Err(Error::InsufficientSamples("no samples for prediction correlation".into()));
    }
    let mut columns = vec![Vec::with_capacity(rows.len()); classifiers.len()];
    for chunk in rows.chunks(256) {
        let x = dataset.batch(chunk);
        for (col, f) in columns.iter_mut().zip(classifiers) {
            col.extend(f.predict_batch(&x)?);
        }
    }
    Ok(CorrelationMatrix::from_columns(
        classifiers.iter().map(|c| c.name().to_string()).collect(),
        &columns,
    ))
}

/// Pearson correlation of the binary training labels.
pub fn label_correlation(dataset: &Dataset) -> Result<CorrelationMatrix> {
    empirical_label_correlation(dataset)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlagKind {
    /// The classifiers share features beyond what the labels imply.
    IntroducedByClassifier,
    /// The labels are correlated but the classifiers do not share features.
    NotExploited,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Flag {
    pub base: String,
    pub downstream: String,
    pub r_mean: f64,
    pub label_correlation: f64,
    pub kind: FlagKind,
}

/// Off-diagonal cells where `|R|` and `|label correlation|` differ by more than `gap`.
/// `attribute_of[i]` names the dataset attribute of classifier `i`.
pub fn flag_disagreements(
    matrix: &AlignmentMatrix,
    labels: &CorrelationMatrix,
    attribute_of: &[String],
    gap: f64,
) -> Vec<Flag> {
    let mut flags = Vec::new();
    for (i, b) in matrix.base_names.iter().enumerate() {
        for (j, d) in matrix.downstream_names.iter().enumerate() {
            let r = matrix.mean[i][j];
            if b == d || matrix.n_included[i][j] == 0 || !r.is_finite() {
                continue;
            }
            let (Some(ai), Some(aj)) = (attribute_of.get(i), attribute_of.get(j)) else {
                continue;
            };
            let Some(c) = labels.get(ai, aj) else {
                continue;
            };
            let diff = r.abs() - c.abs();
            let kind = if diff > gap {
                FlagKind::IntroducedByClassifier
            } else if -diff > gap {
                FlagKind::NotExploited
            } else {
                continue;
            };
            flags.push(Flag {
                base: b.clone(),
                downstream: d.clone(),
                r_mean: r,
                label_correlation: c,
                kind,
            });
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cf::tests::{identity_decoder, linear_classifier};
    use crate::models::CompositeClassifier;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn setup() -> (crate::models::Classifier, crate::models::Classifier, Mlp, CFResult) {
        let fb = linear_classifier("b", &[1.2, -0.4, 0.3], 0.2);
        let f1 = linear_classifier("d", &[0.5, 0.9, -0.2], -0.1);
        let dec = identity_decoder(3);
        let z0 = Tensor::matrix(1, 3, vec![0.8, -0.3, 0.5]).unwrap();
        let cf = search_from_latent(&fb, &dec, z0, &SearchConfig::default()).unwrap();
        (fb, f1, dec, cf)
    }

    #[test]
    fn self_relative_change_is_one() {
        let (fb, _, dec, cf) = setup();
        let r = relative_change(&fb, &fb, &dec, &cf.z0, &cf.z_star, 0, 0.3).unwrap();
        assert_eq!(r.r_value, 1.0);
        assert!(r.included);
        assert_eq!(r.base_delta, cf.base_pred_star - cf.base_pred_0);
    }

    #[test]
    fn constant_downstream_gives_zero() {
        let (fb, _, dec, cf) = setup();
        let c = linear_classifier("c", &[0.0, 0.0, 0.0], 0.7);
        let r = relative_change(&c, &fb, &dec, &cf.z0, &cf.z_star, 0, 0.3).unwrap();
        assert_eq!(r.r_value, 0.0);
    }

    #[test]
    fn scale_covariance() {
        let (fb, f1, dec, cf) = setup();
        let base = relative_change(&f1, &fb, &dec, &cf.z0, &cf.z_star, 0, 0.3).unwrap();
        for c in [-2.0, 0.3, 5.0] {
            let scaled = CompositeClassifier::new("s", vec![(Arc::new(f1.clone()) as Arc<dyn Predictor>, c)]).unwrap();
            let r = relative_change(&scaled, &fb, &dec, &cf.z0, &cf.z_star, 0, 0.3).unwrap();
            assert!((r.r_value - c * base.r_value).abs() < 1e-12);
        }
    }

    #[test]
    fn records_match_single_relative_change() {
        let (fb, f1, dec, cf) = setup();
        let recs = records_for_cf(&fb, &[&fb, &f1], &dec, &cf, 4, 0.3).unwrap();
        let single = relative_change(&f1, &fb, &dec, &cf.z0, &cf.z_star, 4, 0.3).unwrap();
        assert_eq!(recs[1], single);
        assert_eq!(recs[0].r_value, 1.0);
    }

    #[test]
    fn aggregate_diagonal_and_csv() {
        let names = vec!["a".to_string(), "b".to_string()];
        let mut records = Vec::new();
        for s in 0..12 {
            records.push(AlignmentRecord::from_deltas(s, "a", "a", -0.7, -0.7, 0.3));
            records.push(AlignmentRecord::from_deltas(s, "a", "b", -0.7, 0.07 * s as f64, 0.3));
        }
        records.push(AlignmentRecord::from_deltas(0, "b", "b", -0.1, -0.1, 0.3));
        let m = AlignmentMatrix::aggregate(&names, &names, &records, 10);
        assert_eq!(m.mean[0][0], 1.0);
        assert_eq!(m.stderr[0][0], 0.0);
        assert_eq!(m.n_included[0][1], 12);
        assert_eq!(m.n_included[1][1], 0);
        assert_eq!(m.low_support, vec![false, true]);
        let csv = m.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("base,a,b"));
        assert!(lines.next().unwrap().starts_with("a,1|0|12,"));
        assert_eq!(lines.next(), Some("b,nan|0|0,nan|0|0"));
    }

    #[test]
    fn flags_classify_gaps() {
        let names = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let m = AlignmentMatrix {
            base_names: names.clone(),
            downstream_names: names.clone(),
            mean: vec![vec![1.0, 0.8, 0.0], vec![0.1, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            stderr: vec![vec![0.0; 3]; 3],
            n_included: vec![vec![20; 3]; 3],
            low_support: vec![false; 3],
        };
        let labels = CorrelationMatrix {
            names: names.clone(),
            values: vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.9], vec![0.0, 0.9, 1.0]],
            constant_columns: vec![],
        };
        let flags = flag_disagreements(&m, &labels, &names, 0.3);
        assert_eq!(flags.len(), 3);
        assert_eq!(flags[0].kind, FlagKind::IntroducedByClassifier);
        assert_eq!((flags[0].base.as_str(), flags[0].downstream.as_str()), ("a", "b"));
        assert!(flags[1..].iter().all(|f| f.kind == FlagKind::NotExploited));
    }

    proptest! {
        #[test]
        fn exclusion_rule_is_pure(base in -1.0f64..1.0, ds in -1.0f64..1.0, t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
            let a = AlignmentRecord::from_deltas(0, "b", "d", base, ds, t1);
            let b = AlignmentRecord::from_deltas(0, "b", "d", base, ds, t2);
            prop_assert_eq!(a.with_threshold(t2), b.clone());
            prop_assert_eq!(b.included, base.abs() >= t2);
            if b.included {
                prop_assert_eq!(b.r_value, ds / base);
            }
        }

        #[test]
        fn summary_is_permutation_invariant(mut v in proptest::collection::vec(-5.0f64..5.0, 0..40), seed in any::<u64>()) {
            let s1 = Summary::of(&v);
            v.shuffle(&mut seed::rng(seed, 0, 0));
            let s2 = Summary::of(&v);
            prop_assert_eq!(s1.mean.to_bits(), s2.mean.to_bits());
            prop_assert_eq!(s1.stderr.to_bits(), s2.stderr.to_bits());
        }
    }
}
