//! Procedural renderer.
//!
//! Pixel footprints: the 2-pixel outer ring belongs to `frame` and is drawn
//! for positive frame labels, fading in from the background at the threshold; the interior
//! holds a centered ellipse (`blob_size`, `elongation`, `brightness`) over a
//! vertical sinusoidal grating whose frequency follows `texture`.

use statrs::distribution::{ContinuousCDF, Normal};

use super::config::{DatasetConfig, BLOB_SIZE, BRIGHTNESS, ELONGATION, FRAME, TEXTURE};
use super::FactorRecord;
use crate::error::Result;
use crate::tensor::Tensor;

pub const BORDER: usize = 2;
const RING_PEAK: f64 = 0.95;

pub(crate) fn phi(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

pub(crate) fn phi_inv(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

/// Resolved factor positions for a config, so rendering avoids name lookups.
#[derive(Clone, Debug)]
pub(crate) struct Layout {
    side: usize,
    blob_size: Option<usize>,
    elongation: Option<usize>,
    brightness: Option<usize>,
    frame: Option<usize>,
    texture: Option<usize>,
    frame_quantile: f64,
}

impl Layout {
    pub(crate) fn new(config: &DatasetConfig) -> Self {
        let find = |name: &str| config.attributes.iter().position(|a| a == name);
        let frame = find(FRAME);
        let frame_quantile = frame
            .and_then(|i| config.thresholds.get(i).copied())
            .map(phi_inv)
            .unwrap_or(0.0);
        Layout {
            side: config.image_side,
            blob_size: find(BLOB_SIZE),
            elongation: find(ELONGATION),
            brightness: find(BRIGHTNESS),
            frame,
            texture: find(TEXTURE),
            frame_quantile,
        }
    }
}

pub fn in_border(side: usize, x: usize, y: usize) -> bool {
    x.min(y).min(side - 1 - x).min(side - 1 - y) < BORDER
}

pub fn render_image(factors: &FactorRecord, config: &DatasetConfig) -> Result<Tensor> {
    let mut cfg = config.clone();
    cfg.materialize_defaults();
    let layout = Layout::new(&cfg);
    let data = render_with(&layout, factors);
    Tensor::new(vec![cfg.image_side, cfg.image_side], data)
}

pub(crate) fn render_with(layout: &Layout, factors: &FactorRecord) -> Vec<f64> {
    let g = |idx: Option<usize>| idx.map(|i| factors.gaussian_factors[i]).unwrap_or(0.0);
    let side = layout.side;
    let s = side as f64;

    let freq = 1.5 + 4.0 * phi(g(layout.texture));
    let radius = 0.22 * s * (0.2 * g(layout.blob_size)).exp();
    let aspect = (0.35 * g(layout.elongation)).exp();
    let semi_x = radius * aspect.sqrt();
    let semi_y = radius / aspect.sqrt();
    let fill = 0.3 + 0.4 * phi(g(layout.brightness));
    let centre = (s - 1.0) / 2.0;

    // zero at the label threshold, so the border is continuous in the factor
    let ring = layout
        .frame
        .filter(|&i| factors.binary_labels[i] == 1)
        .map(|i| 2.0 * phi(factors.gaussian_factors[i] - layout.frame_quantile) - 1.0)
        .unwrap_or(0.0);

    let mut out = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            let bg = 0.15 + 0.1 * (2.0 * std::f64::consts::PI * freq * (x as f64 + 0.5) / s).sin();
            let v = if in_border(side, x, y) {
                bg + ring * (RING_PEAK - bg)
            } else {
                let dx = (x as f64 - centre) / semi_x;
                let dy = (y as f64 - centre) / semi_y;
                let q = (dx * dx + dy * dy).sqrt();
                let coverage = (0.5 - (q - 1.0) * radius).clamp(0.0, 1.0);
                bg + coverage * (fill - bg)
            };
            out[y * side + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}
