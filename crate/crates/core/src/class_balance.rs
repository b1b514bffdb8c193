//! Dynamic class sampling: per-image class frequencies turned into
//! temperature-softmax weights, smoothed by an exponential moving average, and
//! applied to the per-pixel negative log-likelihood.
//!
//! A pixel is *ignored* when its label equals `ignore_index` or is not a valid
//! class index (`>= num_classes`, i.e. the "other" class). Ignored pixels never
//! enter a frequency, a loss value or a gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest probability fed to `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

const NORMALIZATION_TOL: f64 = 1e-6;

/// Row-major `height x width` map of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {}x{} needs {} entries, got {}",
                height,
                width,
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self { height, width, data: vec![class; height * width] }
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, class: u8) {
        self.data[row * self.width + col] = class;
    }
}

/// Per-pixel class distributions, `height x width x channels`, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "probability map {height}x{width}x{channels} needs {} entries, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.channels..(index + 1) * self.channels]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcsConfig {
    /// Number of evaluable classes (excludes "other").
    pub num_classes: usize,
    pub temperature: f64,
    /// Weight on the previous state in the moving average.
    pub decay: f64,
    pub ignore_index: usize,
}

impl Default for DcsConfig {
    fn default() -> Self {
        Self { num_classes: 12, temperature: 0.9, decay: 0.7, ignore_index: 12 }
    }
}

impl DcsConfig {
    pub fn with_classes(num_classes: usize) -> Self {
        Self { num_classes, ignore_index: num_classes, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("dcs.num_classes must be positive".into()));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "dcs.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return Err(Error::Config(format!("dcs.decay must lie in [0, 1], got {}", self.decay)));
        }
        if self.ignore_index > self.num_classes {
            return Err(Error::Config(format!(
                "dcs.ignore_index {} exceeds num_classes {}",
                self.ignore_index, self.num_classes
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn is_ignored(&self, label: u8) -> bool {
        let l = label as usize;
        l == self.ignore_index || l >= self.num_classes
    }
}

/// Fraction of non-ignored pixels per class. Uniform when every pixel is ignored.
pub fn label_frequency(label: &LabelMap, cfg: &DcsConfig) -> Vec<f64> {
    let c = cfg.num_classes;
    let mut counts = vec![0u64; c];
    let mut total = 0u64;
    for &l in &label.data {
        if !cfg.is_ignored(l) {
            counts[l as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return vec![1.0 / c as f64; c];
    }
    counts.iter().map(|&n| n as f64 / total as f64).collect()
}

/// `w_c = C * exp((1 - f_c)/t) / sum_c' exp((1 - f_c')/t)`.
pub fn instantaneous_weights(freq: &[f64], cfg: &DcsConfig) -> Vec<f64> {
    let c = freq.len() as f64;
    let logits: Vec<f64> = freq.iter().map(|f| (1.0 - f) / cfg.temperature).collect();
    // Shift by the max before exponentiating; the ratio is unchanged.
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| c * e / sum).collect()
}

/// Exponentially averaged class weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DcsState {
    pub weights: Vec<f64>,
    pub step: u64,
}

impl DcsState {
    pub fn new(num_classes: usize) -> Self {
        Self { weights: vec![1.0; num_classes], step: 0 }
    }

    pub fn update(&self, w: &[f64], cfg: &DcsConfig) -> Result<DcsState> {
        if w.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "dcs update with {} weights, state holds {}",
                w.len(),
                self.weights.len()
            )));
        }
        let a = cfg.decay;
        let weights = self
            .weights
            .iter()
            .zip(w)
            .map(|(old, new)| a * old + (1.0 - a) * new)
            .collect();
        Ok(DcsState { weights, step: self.step + 1 })
    }

    /// Folds one source label map into the state. All-ignored maps leave the
    /// state untouched; returns whether an update happened.
    pub fn observe(&mut self, label: &LabelMap, cfg: &DcsConfig) -> Result<bool> {
        if label.data.iter().all(|&l| cfg.is_ignored(l)) {
            return Ok(false);
        }
        let freq = label_frequency(label, cfg);
        let w = instantaneous_weights(&freq, cfg);
        *self = self.update(&w, cfg)?;
        Ok(true)
    }
}

/// Weighted negative log-likelihood averaged over non-ignored pixels.
pub fn weighted_seg_loss(
    probs: &ProbMap,
    label: &LabelMap,
    state: &DcsState,
    cfg: &DcsConfig,
) -> Result<f64> {
    if probs.height != label.height || probs.width != label.width {
        return Err(Error::Shape(format!(
            "probabilities {}x{} vs labels {}x{}",
            probs.height, probs.width, label.height, label.width
        )));
    }
    if probs.channels < cfg.num_classes {
        return Err(Error::Shape(format!(
            "probability map has {} channels, need at least {}",
            probs.channels, cfg.num_classes
        )));
    }
    if state.weights.len() != cfg.num_classes {
        return Err(Error::Shape("dcs state length differs from num_classes".into()));
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (i, &l) in label.data.iter().enumerate() {
        let px = probs.pixel(i);
        let sum: f64 = px.iter().sum();
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!(
                "pixel {i} probabilities sum to {sum}, expected 1"
            )));
        }
        if cfg.is_ignored(l) {
            continue;
        }
        let c = l as usize;
        total -= state.weights[c] * px[c].max(PROB_FLOOR).ln();
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}
