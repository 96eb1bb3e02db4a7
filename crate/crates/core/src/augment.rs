//! Jittering and scaling augmentation of training windows.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::WindowBatch;
use crate::error::{CocaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Std of the additive noise, in normalized data units.
    pub jitter_ratio: f64,
    /// Std of the per-window multiplicative factor (mean 1).
    pub scale_ratio: f64,
    pub enabled: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            jitter_ratio: 0.35,
            scale_ratio: 0.8,
            enabled: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_ratio >= 0.0) || !(self.scale_ratio >= 0.0) {
            return Err(CocaError::Config(format!(
                "augmentation ratios must be >= 0 (jitter {}, scale {})",
                self.jitter_ratio, self.scale_ratio
            )));
        }
        Ok(())
    }
}

fn normal(mean: f64, std: f64) -> Normal<f64> {
    // std has been checked non-negative; Normal only rejects NaN/negative.
    Normal::new(mean, std).expect("finite, non-negative std")
}

/// Add i.i.d. `N(0, sigma^2)` noise to every element.
pub fn jitter<R: Rng + ?Sized>(batch: &WindowBatch, sigma: f64, rng: &mut R) -> WindowBatch {
    let mut out = batch.clone();
    if sigma == 0.0 {
        return out;
    }
    let dist = normal(0.0, sigma);
    for v in out.windows.iter_mut() {
        *v += dist.sample(rng);
    }
    out
}

/// Multiply each window by a single factor drawn from `N(1, sigma^2)`.
pub fn scale<R: Rng + ?Sized>(batch: &WindowBatch, sigma: f64, rng: &mut R) -> WindowBatch {
    if sigma == 0.0 {
        return batch.clone();
    }
    let dist = normal(1.0, sigma);
    let factors: Vec<f64> = (0..batch.len()).map(|_| dist.sample(rng)).collect();
    scale_by(batch, &factors)
}

/// Multiply window `i` by `factors[i]`.
pub fn scale_by(batch: &WindowBatch, factors: &[f64]) -> WindowBatch {
    assert_eq!(factors.len(), batch.len(), "one factor per window");
    let mut out = batch.clone();
    let w = batch.window_size();
    for (chunk, f) in out.windows.chunks_mut(w).zip(factors) {
        chunk.iter_mut().for_each(|v| *v *= f);
    }
    out
}

/// Original windows followed by a jittered copy and a scaled copy of each.
pub fn expand_training_set<R: Rng + ?Sized>(
    batch: &WindowBatch,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> WindowBatch {
    if !cfg.enabled {
        return batch.clone();
    }
    let mut out = batch.clone();
    let jittered = jitter(batch, cfg.jitter_ratio, rng);
    let scaled = scale(batch, cfg.scale_ratio, rng);
    out.extend(&jittered).expect("same shape");
    out.extend(&scaled).expect("same shape");
    out
}
