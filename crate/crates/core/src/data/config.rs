use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BLOB_SIZE: &str = "blob_size";
pub const ELONGATION: &str = "elongation";
pub const BRIGHTNESS: &str = "brightness";
pub const FRAME: &str = "frame";
pub const TEXTURE: &str = "texture";

pub const KNOWN_ATTRIBUTES: [&str; 5] = [BLOB_SIZE, ELONGATION, BRIGHTNESS, FRAME, TEXTURE];

/// A (target, sensitive) attribute pair that partitions samples into four groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupPair {
    pub target: String,
    pub sensitive: String,
}

impl GroupPair {
    pub fn new(target: &str, sensitive: &str) -> Self {
        GroupPair {
            target: target.to_string(),
            sensitive: sensitive.to_string(),
        }
    }
}

fn default_side() -> usize {
    32
}

fn default_attributes() -> Vec<String> {
    KNOWN_ATTRIBUTES.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_samples: usize,
    #[serde(default = "default_side")]
    pub image_side: usize,
    #[serde(default = "default_attributes")]
    pub attributes: Vec<String>,
    /// Target Pearson correlations of the latent Gaussian factors. Empty means identity.
    #[serde(default)]
    pub correlation: Vec<Vec<f64>>,
    /// Per-attribute binarization quantile. Empty means 0.5 everywhere.
    #[serde(default)]
    pub thresholds: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Pair used for `FactorRecord::group_id`; defaults to the first two attributes.
    #[serde(default)]
    pub group_pair: Option<GroupPair>,
}

impl DatasetConfig {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        DatasetConfig {
            n_samples,
            image_side: default_side(),
            attributes: default_attributes(),
            correlation: Vec::new(),
            thresholds: Vec::new(),
            seed,
            group_pair: None,
        }
    }

    /// Sets a symmetric pairwise correlation, materializing the identity first if needed.
    pub fn with_correlation(mut self, a: &str, b: &str, rho: f64) -> Result<Self> {
        self.materialize_defaults();
        let i = self.attribute_index(a)?;
        let j = self.attribute_index(b)?;
        self.correlation[i][j] = rho;
        self.correlation[j][i] = rho;
        Ok(self)
    }

    pub fn with_group_pair(mut self, target: &str, sensitive: &str) -> Self {
        self.group_pair = Some(GroupPair::new(target, sensitive));
        self
    }

    /// Fills empty correlation / thresholds / group pair with their defaults.
    pub fn materialize_defaults(&mut self) {
        let k = self.attributes.len();
        if self.correlation.is_empty() {
            self.correlation = (0..k)
                .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
        }
        if self.thresholds.is_empty() {
            self.thresholds = vec![0.5; k];
        }
        if self.group_pair.is_none() && k >= 2 {
            self.group_pair = Some(GroupPair::new(&self.attributes[0], &self.attributes[1]));
        }
    }

    pub fn attribute_index(&self, name: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| Error::Config(format!("unknown attribute `{name}`")))
    }

    /// Checks the config and returns the lower Cholesky factor of the correlation matrix.
    pub fn validate(&self) -> Result<DMatrix<f64>> {
        let mut cfg = self.clone();
        cfg.materialize_defaults();
        let k = cfg.attributes.len();
        if cfg.n_samples == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if cfg.image_side < 8 {
            return Err(Error::Config(format!(
                "image_side {} is too small (minimum 8)",
                cfg.image_side
            )));
        }
        if k == 0 {
            return Err(Error::Config("at least one attribute is required".into()));
        }
        for (i, a) in cfg.attributes.iter().enumerate() {
            if !KNOWN_ATTRIBUTES.contains(&a.as_str()) {
                return Err(Error::Config(format!(
                    "attribute `{a}` has no renderer (known: {})",
                    KNOWN_ATTRIBUTES.join(", ")
                )));
            }
            if cfg.attributes[..i].contains(a) {
                return Err(Error::Config(format!("attribute `{a}` listed twice")));
            }
        }
        if cfg.thresholds.len() != k {
            return Err(Error::Config(format!(
                "thresholds has {} entries for {k} attributes",
                cfg.thresholds.len()
            )));
        }
        if let Some(t) = cfg.thresholds.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("threshold {t} is outside (0, 1)")));
        }
        if let Some(pair) = &cfg.group_pair {
            cfg.attribute_index(&pair.target)?;
            cfg.attribute_index(&pair.sensitive)?;
            if pair.target == pair.sensitive {
                return Err(Error::Config("group pair needs two distinct attributes".into()));
            }
        }
        let c = &cfg.correlation;
        if c.len() != k || c.iter().any(|row| row.len() != k) {
            return Err(Error::Config(format!(
                "correlation matrix must be {k}x{k} to match the attribute list"
            )));
        }
        for (i, row) in c.iter().enumerate() {
            if row[i] != 1.0 {
                return Err(Error::Config(format!(
                    "correlation matrix diagonal entry ({i},{i}) is {}, expected 1",
                    row[i]
                )));
            }
            for (j, v) in row.iter().enumerate() {
                if !v.is_finite() || *v != c[j][i] {
                    return Err(Error::Config(format!(
                        "correlation matrix is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        let flat: Vec<f64> = c.iter().flatten().copied().collect();
        let m = DMatrix::from_row_slice(k, k, &flat);
        let chol = m.cholesky().ok_or_else(|| {
            Error::Config(format!(
                "correlation matrix is not positive definite (Cholesky failed): {c:?}"
            ))
        })?;
        Ok(chol.l())
    }
}
