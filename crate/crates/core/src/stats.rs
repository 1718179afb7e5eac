//! Small descriptive statistics used by the reports.

use serde::{Deserialize, Serialize};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Standard error of the mean using the n-1 sample variance; 0 for n < 2.
pub fn stderr(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Pearson correlation, `None` when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Pairwise Pearson correlations between named columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
    /// Columns with zero variance; their entries are reported as 0.
    pub constant_columns: Vec<String>,
}

impl CorrelationMatrix {
    pub fn from_columns(names: Vec<String>, columns: &[Vec<f64>]) -> Self {
        let k = columns.len();
        let constant: Vec<bool> = columns
            .iter()
            .map(|c| c.iter().all(|v| *v == c[0]))
            .collect();
        let mut values = vec![vec![0.0; k]; k];
        for i in 0..k {
            for j in 0..k {
                values[i][j] = if constant[i] || constant[j] {
                    0.0
                } else if i == j {
                    1.0
                } else {
                    pearson(&columns[i], &columns[j]).unwrap_or(0.0)
                };
            }
        }
        let constant_columns = names
            .iter()
            .zip(&constant)
            .filter(|(_, c)| **c)
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>();
        for name in &constant_columns {
            log::warn!("column {name} is constant; its correlations are reported as 0");
        }
        CorrelationMatrix {
            names,
            values,
            constant_columns,
        }
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.values[i][j])
    }
}
