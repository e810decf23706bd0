//! Regression-target scaling: physical units to image-relative units, then
//! per-index z-scores fitted on a training split.

use super::{INDEX_COUNT, INDEX_NAMES};
use crate::error::{CqError, Result};

/// Divides areas by the frame's pixel count and lengths by its width, both
/// after converting millimetres back to pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageScale {
    pub height: usize,
    pub width: usize,
}

impl ImageScale {
    fn factor(&self, index: usize, spacing: f64) -> f64 {
        if index < 2 {
            spacing * spacing * (self.height * self.width) as f64
        } else {
            spacing * self.width as f64
        }
    }

    pub fn to_image_units(&self, values: &[f64; INDEX_COUNT], spacing: f64) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| values[i] / self.factor(i, spacing))
    }

    pub fn to_physical(&self, values: &[f64; INDEX_COUNT], spacing: f64) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| values[i] * self.factor(i, spacing))
    }
}

/// Per-index mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizationStats {
    pub mean: [f64; INDEX_COUNT],
    pub std: [f64; INDEX_COUNT],
}

impl NormalizationStats {
    pub fn fit(rows: &[[f64; INDEX_COUNT]]) -> Result<Self> {
        if rows.is_empty() {
            return Err(CqError::degenerate("normalization", "no training rows"));
        }
        let n = rows.len() as f64;
        let mean: [f64; INDEX_COUNT] = std::array::from_fn(|i| rows.iter().map(|r| r[i]).sum::<f64>() / n);
        let std: [f64; INDEX_COUNT] =
            std::array::from_fn(|i| (rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n).sqrt());
        let stats = Self { mean, std };
        stats.validate()?;
        Ok(stats)
    }

    pub fn validate(&self) -> Result<()> {
        for i in 0..INDEX_COUNT {
            if !(self.std[i] > 0.0 && self.std[i].is_finite() && self.mean[i].is_finite()) {
                return Err(CqError::degenerate(
                    "normalization",
                    format!("index {} has standard deviation {}", INDEX_NAMES[i], self.std[i]),
                ));
            }
        }
        Ok(())
    }

    pub fn normalize(&self, values: &[f64; INDEX_COUNT]) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| (values[i] - self.mean[i]) / self.std[i])
    }

    pub fn denormalize(&self, values: &[f64; INDEX_COUNT]) -> [f64; INDEX_COUNT] {
        std::array::from_fn(|i| values[i] * self.std[i] + self.mean[i])
    }
}

/// Full target transform: physical values to z-scored image units and back.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetTransform {
    pub scale: ImageScale,
    pub stats: NormalizationStats,
}

impl TargetTransform {
    /// Fits z-score statistics on image-unit targets of the training frames.
    pub fn fit(scale: ImageScale, frames: &[([f64; INDEX_COUNT], f64)]) -> Result<Self> {
        let rows: Vec<_> = frames.iter().map(|(v, s)| scale.to_image_units(v, *s)).collect();
        Ok(Self { scale, stats: NormalizationStats::fit(&rows)? })
    }

    pub fn forward(&self, values: &[f64; INDEX_COUNT], spacing: f64) -> [f64; INDEX_COUNT] {
        self.stats.normalize(&self.scale.to_image_units(values, spacing))
    }

    pub fn inverse(&self, normalized: &[f64; INDEX_COUNT], spacing: f64) -> [f64; INDEX_COUNT] {
        self.scale.to_physical(&self.stats.denormalize(normalized), spacing)
    }
}
