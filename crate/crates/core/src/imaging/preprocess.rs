use cq_tensor::Tensor;

use super::clahe::{clahe, ClaheParams};
use crate::error::{CqError, Result};

/// Grayscale frames `[t, h, w]` of one cardiac cycle.
#[derive(Clone, Debug, PartialEq)]
pub struct CineSequence {
    pub frames: Tensor<f32>,
    /// Millimetres per pixel, isotropic.
    pub spacing: f64,
    pub subject: String,
}

/// Whole-sequence z-score with the population standard deviation.
pub fn zscore(values: &[f32]) -> Result<Vec<f32>> {
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > f64::EPSILON * mean.abs().max(1.0)) {
        return Err(CqError::degenerate("zscore", "sequence intensity is constant"));
    }
    Ok(values.iter().map(|&v| ((v as f64 - mean) / std) as f32).collect())
}

/// CLAHE on every frame, then a z-score over the whole sequence.
pub fn preprocess(frames: &Tensor<f32>, params: &ClaheParams) -> Result<Tensor<f32>> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(CqError::invalid("preprocess", format!("expected [t, h, w] frames, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut eq = Vec::with_capacity(frames.len());
    for f in frames.data().chunks(h * w) {
        eq.extend(clahe(f, h, w, params)?);
    }
    Ok(Tensor::new(s, zscore(&eq)?)?)
}
