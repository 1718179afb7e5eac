//! Synthetic images with known, tunable correlations between generative factors.
//!
//! Factors are drawn through a Gaussian copula: independent standard normals
//! are mixed by the Cholesky factor of the requested correlation matrix, then
//! each attribute is binarized at its Gaussian quantile.

mod config;
mod render;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{
    DatasetConfig, GroupPair, BLOB_SIZE, BRIGHTNESS, ELONGATION, FRAME, KNOWN_ATTRIBUTES, TEXTURE,
};
pub use render::{in_border, render_image, BORDER};

use crate::error::{Error, Result};
use crate::par;
use crate::seed;
use crate::stats::CorrelationMatrix;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorRecord {
    pub gaussian_factors: Vec<f64>,
    pub binary_labels: Vec<u8>,
    pub group_id: u8,
}

impl FactorRecord {
    /// `2 * target_label + sensitive_label`.
    pub fn group(&self, target: usize, sensitive: usize) -> u8 {
        2 * self.binary_labels[target] + self.binary_labels[sensitive]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Valid => &self.valid,
            SplitName::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    /// `[n, side, side]`, values in `[0, 1]`.
    pub images: Tensor,
    pub factors: Vec<FactorRecord>,
    pub split: Split,
}

/// Draws factor records. Sample `i` uses its own RNG stream derived from
/// `(config.seed, i)`.
pub fn sample_factors(config: &DatasetConfig) -> Result<Vec<FactorRecord>> {
    let l = config.validate()?;
    let mut cfg = config.clone();
    cfg.materialize_defaults();
    let k = cfg.attributes.len();
    let quantiles: Vec<f64> = cfg.thresholds.iter().map(|&t| render::phi_inv(t)).collect();
    let (gt, gs) = group_indices(&cfg)?;
    let records = par::map_indexed(cfg.n_samples, |i| {
        let mut rng = seed::rng(cfg.seed, seed::FACTORS, i as u64);
        let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let g: Vec<f64> = (0..k)
            .map(|r| (0..=r).fold(0.0, |acc, c| acc + l[(r, c)] * z[c]))
            .collect();
        let labels: Vec<u8> = g
            .iter()
            .zip(&quantiles)
            .map(|(v, q)| u8::from(v > q))
            .collect();
        let group_id = 2 * labels[gt] + labels[gs];
        FactorRecord {
            gaussian_factors: g,
            binary_labels: labels,
            group_id,
        }
    });
    Ok(records)
}

fn group_indices(cfg: &DatasetConfig) -> Result<(usize, usize)> {
    match &cfg.group_pair {
        Some(p) => Ok((cfg.attribute_index(&p.target)?, cfg.attribute_index(&p.sensitive)?)),
        None => Ok((0, 0)),
    }
}

/// Samples, renders and splits 70/15/15 with a seeded shuffle.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    let factors = sample_factors(config)?;
    let mut cfg = config.clone();
    cfg.materialize_defaults();
    let layout = render::Layout::new(&cfg);
    let side = cfg.image_side;
    let pixels = par::map_slice(&factors, |f| render::render_with(&layout, f));
    let images = Tensor::new(
        vec![cfg.n_samples, side, side],
        pixels.into_iter().flatten().collect(),
    )?;
    let split = make_split(cfg.n_samples, cfg.seed);
    Ok(Dataset {
        config: cfg,
        images,
        factors,
        split,
    })
}

fn make_split(n: usize, seed_value: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::rng(seed_value, seed::SPLIT, 0));
    let n_train = n * 70 / 100;
    let n_valid = n * 15 / 100;
    let mut train = idx[..n_train].to_vec();
    let mut valid = idx[n_train..n_train + n_valid].to_vec();
    let mut test = idx[n_train + n_valid..].to_vec();
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    Split { train, valid, test }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config: DatasetConfig,
    attribute_names: Vec<String>,
    n_samples: usize,
    image_side: usize,
    split: Split,
    files: ManifestFiles,
}

#[derive(Serialize, Deserialize)]
struct ManifestFiles {
    images: String,
    factors: String,
    labels: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn side(&self) -> usize {
        self.config.image_side
    }

    pub fn pixels(&self) -> usize {
        self.side() * self.side()
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.config.attribute_index(name)
    }

    /// Flattened image `i` as a `[1, side*side]` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let p = self.pixels();
        Tensor::from_parts(vec![1, p], self.images.data()[i * p..(i + 1) * p].to_vec())
    }

    /// Flattened images as `[rows.len(), side*side]`.
    pub fn batch(&self, rows: &[usize]) -> Tensor {
        self.images.select_rows(rows)
    }

    pub fn labels(&self, attribute: usize) -> Vec<f64> {
        self.factors
            .iter()
            .map(|f| f64::from(f.binary_labels[attribute]))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.len();
        let k = self.config.attributes.len();
        let side = self.side();
        self.images
            .clone()
            .reshape(vec![n, side, side])?
            .write_file(&dir.join("images.cfat"))?;
        let factors = Tensor::new(
            vec![n, k],
            self.factors
                .iter()
                .flat_map(|f| f.gaussian_factors.iter().copied())
                .collect(),
        )?;
        factors.write_file(&dir.join("factors.cfat"))?;
        let labels = Tensor::new(
            vec![n, k],
            self.factors
                .iter()
                .flat_map(|f| f.binary_labels.iter().map(|&b| f64::from(b)))
                .collect(),
        )?;
        labels.write_file(&dir.join("labels.cfat"))?;
        let manifest = Manifest {
            version: MANIFEST_VERSION,
            config: self.config.clone(),
            attribute_names: self.config.attributes.clone(),
            n_samples: n,
            image_side: side,
            split: self.split.clone(),
            files: ManifestFiles {
                images: "images.cfat".into(),
                factors: "factors.cfat".into(),
                labels: "labels.cfat".into(),
            },
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(
                dir.join("manifest.json"),
                format!("unsupported manifest version {}", manifest.version),
            ));
        }
        let mut config = manifest.config;
        config.validate()?;
        config.materialize_defaults();
        let n = manifest.n_samples;
        let k = config.attributes.len();
        let side = manifest.image_side;
        let images_path = dir.join(&manifest.files.images);
        let images = Tensor::read_file(&images_path)?;
        if images.shape() != [n, side, side] {
            return Err(Error::format(
                images_path,
                format!("expected shape [{n}, {side}, {side}], got {:?}", images.shape()),
            ));
        }
        let factors_path = dir.join(&manifest.files.factors);
        let factors_t = Tensor::read_file(&factors_path)?;
        let labels_path = dir.join(&manifest.files.labels);
        let labels_t = Tensor::read_file(&labels_path)?;
        for (t, p) in [(&factors_t, &factors_path), (&labels_t, &labels_path)] {
            if t.shape() != [n, k] {
                return Err(Error::format(
                    p.clone(),
                    format!("expected shape [{n}, {k}], got {:?}", t.shape()),
                ));
            }
        }
        let (gt, gs) = group_indices(&config)?;
        let factors = (0..n)
            .map(|i| {
                let labels: Vec<u8> = labels_t.row(i).iter().map(|&v| u8::from(v > 0.5)).collect();
                FactorRecord {
                    gaussian_factors: factors_t.row(i).to_vec(),
                    group_id: 2 * labels[gt] + labels[gs],
                    binary_labels: labels,
                }
            })
            .collect();
        let split = manifest.split;
        check_split(&split, n).map_err(|d| Error::format(dir.join("manifest.json"), d))?;
        Ok(Dataset {
            config,
            images,
            factors,
            split,
        })
    }

    /// Indices from `rows` forming equal-sized (target, sensitive) groups.
    /// Each group contributes `min group count` samples chosen with a seeded shuffle.
    pub fn balanced_groups(
        &self,
        rows: &[usize],
        target: &str,
        sensitive: &str,
        seed_value: u64,
    ) -> Result<Vec<usize>> {
        let t = self.attribute_index(target)?;
        let s = self.attribute_index(sensitive)?;
        let mut groups: [Vec<usize>; 4] = Default::default();
        for &i in rows {
            groups[self.factors[i].group(t, s) as usize].push(i);
        }
        let take = groups.iter().map(Vec::len).min().unwrap_or(0);
        let mut out = Vec::with_capacity(4 * take);
        for (g, members) in groups.iter_mut().enumerate() {
            members.shuffle(&mut seed::rng(seed_value, seed::GROUPS, g as u64));
            out.extend_from_slice(&members[..take]);
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Samples from `rows` whose target label runs against the dominant
    /// target/sensitive association in the training split.
    pub fn inversely_correlated(&self, rows: &[usize], target: &str, sensitive: &str) -> Result<Vec<usize>> {
        let t = self.attribute_index(target)?;
        let s = self.attribute_index(sensitive)?;
        let agree = self
            .split
            .train
            .iter()
            .filter(|&&i| self.factors[i].binary_labels[t] == self.factors[i].binary_labels[s])
            .count();
        let positive = 2 * agree >= self.split.train.len();
        Ok(rows
            .iter()
            .copied()
            .filter(|&i| {
                let f = &self.factors[i];
                (f.binary_labels[t] == f.binary_labels[s]) != positive
            })
            .collect())
    }
}

fn check_split(split: &Split, n: usize) -> std::result::Result<(), String> {
    let mut seen = vec![false; n];
    for &i in split.train.iter().chain(&split.valid).chain(&split.test) {
        if i >= n {
            return Err(format!("split index {i} out of range"));
        }
        if seen[i] {
            return Err(format!("split index {i} appears twice"));
        }
        seen[i] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err("split does not cover every sample".into());
    }
    Ok(())
}

/// Pearson correlation between binary label columns over every sample.
pub fn empirical_label_correlation(dataset: &Dataset) -> Result<CorrelationMatrix> {
    if dataset.is_empty() {
        return Err(Error::InsufficientSamples("empty dataset".into()));
    }
    let columns: Vec<Vec<f64>> = (0..dataset.config.attributes.len())
        .map(|a| dataset.labels(a))
        .collect();
    Ok(CorrelationMatrix::from_columns(
        dataset.config.attributes.clone(),
        &columns,
    ))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            PathBuf::from(path),
            format!("{e} (line {}, column {})", e.line(), e.column()),
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::pearson;

    fn column(records: &[FactorRecord], i: usize) -> Vec<f64> {
        records.iter().map(|r| r.gaussian_factors[i]).collect()
    }

    #[test]
    fn independent_labels_are_uncorrelated_and_balanced() {
        let cfg = DatasetConfig::new(10_000, 5);
        let recs = sample_factors(&cfg).unwrap();
        let k = 5;
        for a in 0..k {
            let la: Vec<f64> = recs.iter().map(|r| f64::from(r.binary_labels[a])).collect();
            let rate = la.iter().sum::<f64>() / la.len() as f64;
            assert!((0.47..=0.53).contains(&rate), "rate {rate}");
            for b in (a + 1)..k {
                let lb: Vec<f64> = recs.iter().map(|r| f64::from(r.binary_labels[b])).collect();
                assert!(pearson(&la, &lb).unwrap().abs() < 0.05);
            }
        }
    }

    #[test]
    fn copula_reproduces_target_correlation() {
        let cfg = DatasetConfig::new(10_000, 11)
            .with_correlation(ELONGATION, FRAME, 0.9)
            .unwrap()
            .with_correlation(BLOB_SIZE, TEXTURE, -0.4)
            .unwrap();
        let recs = sample_factors(&cfg).unwrap();
        let mut full = cfg.clone();
        full.materialize_defaults();
        for i in 0..5 {
            for j in 0..5 {
                let r = pearson(&column(&recs, i), &column(&recs, j)).unwrap();
                assert!((r - full.correlation[i][j]).abs() < 0.05, "({i},{j}) {r}");
            }
        }
        let r = pearson(&column(&recs, 1), &column(&recs, 3)).unwrap();
        assert!((0.85..=0.95).contains(&r));
    }

    #[test]
    fn labels_follow_quantile_thresholds() {
        let mut cfg = DatasetConfig::new(500, 2);
        cfg.thresholds = vec![0.2, 0.5, 0.8, 0.5, 0.5];
        let recs = sample_factors(&cfg).unwrap();
        let q = [render::phi_inv(0.2), 0.0, render::phi_inv(0.8), 0.0, 0.0];
        for r in &recs {
            for (a, qa) in q.iter().enumerate() {
                assert_eq!(r.binary_labels[a] == 1, r.gaussian_factors[a] > *qa);
            }
            assert!(r.group_id < 4);
        }
    }

    #[test]
    fn split_is_disjoint_and_covering() {
        let s = make_split(101, 3);
        assert_eq!(s.train.len(), 70);
        assert_eq!(s.valid.len(), 15);
        assert_eq!(s.test.len(), 16);
        assert!(check_split(&s, 101).is_ok());
        assert_eq!(s, make_split(101, 3));
    }
}
