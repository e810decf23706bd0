//! Contrast limited adaptive histogram equalization.

use serde::{Deserialize, Serialize};

use crate::error::{CqError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    /// Tile grid as `[rows, columns]`.
    pub tiles: [usize; 2],
    /// Histogram clip height as a multiple of the mean bin height.
    pub clip_limit: f64,
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self { tiles: [8, 8], clip_limit: 2.0, bins: 256 }
    }
}

/// Bin index of every pixel after quantizing the image over its own range.
pub fn quantize(image: &[f32], bins: usize) -> Vec<usize> {
    let (lo, hi) = image.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return vec![0; image.len()];
    }
    let scale = bins as f64 / (hi - lo) as f64;
    image.iter().map(|&v| (((v - lo) as f64 * scale) as usize).min(bins - 1)).collect()
}

/// Clipped, redistributed, cumulative histogram of one tile, normalized to `(0, 1]`.
pub fn tile_mapping(bin_counts: &[f64], clip_limit: f64) -> Vec<f64> {
    let n: f64 = bin_counts.iter().sum();
    let bins = bin_counts.len() as f64;
    let limit = clip_limit * n / bins;
    let excess: f64 = bin_counts.iter().map(|&c| (c - limit).max(0.0)).sum();
    let spread = excess / bins;
    let mut acc = 0.0;
    bin_counts
        .iter()
        .map(|&c| {
            acc += c.min(limit) + spread;
            acc / n
        })
        .collect()
}

/// Start offsets of `tiles` near-equal tiles over `extent` pixels, plus the end.
fn tile_edges(extent: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * extent / tiles).collect()
}

/// Interpolation neighbours and weight of the second one along one axis.
fn neighbours(pos: usize, centres: &[f64]) -> (usize, usize, f64) {
    let p = pos as f64;
    let last = centres.len() - 1;
    if p <= centres[0] {
        return (0, 0, 0.0);
    }
    if p >= centres[last] {
        return (last, last, 0.0);
    }
    let i = centres.iter().rposition(|&c| c <= p).expect("interior position");
    (i, i + 1, (p - centres[i]) / (centres[i + 1] - centres[i]))
}

/// Equalizes a `[height, width]` image; the result lies in `[0, 1]`.
pub fn clahe(image: &[f32], height: usize, width: usize, params: &ClaheParams) -> Result<Vec<f32>> {
    let [ty, tx] = params.tiles;
    if image.len() != height * width {
        return Err(CqError::invalid("clahe", format!("{} pixels for a {height}x{width} image", image.len())));
    }
    if ty == 0 || tx == 0 || height < ty || width < tx {
        return Err(CqError::invalid("clahe", format!("{height}x{width} image is smaller than the {ty}x{tx} tile grid")));
    }
    if params.bins < 2 || !(params.clip_limit > 0.0) {
        return Err(CqError::config("clahe", "need at least 2 bins and a positive clip limit"));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(CqError::invalid("clahe", "image contains non-finite intensities"));
    }
    let bins = quantize(image, params.bins);
    let (ey, ex) = (tile_edges(height, ty), tile_edges(width, tx));
    let mut maps = Vec::with_capacity(ty * tx);
    for i in 0..ty {
        for j in 0..tx {
            let mut hist = vec![0.0; params.bins];
            for y in ey[i]..ey[i + 1] {
                for x in ex[j]..ex[j + 1] {
                    hist[bins[y * width + x]] += 1.0;
                }
            }
            maps.push(tile_mapping(&hist, params.clip_limit));
        }
    }
    let centre = |e: &[usize], k: usize| (e[k] + e[k + 1] - 1) as f64 / 2.0;
    let cy: Vec<f64> = (0..ty).map(|k| centre(&ey, k)).collect();
    let cx: Vec<f64> = (0..tx).map(|k| centre(&ex, k)).collect();
    let mut out = vec![0.0f32; image.len()];
    for y in 0..height {
        let (i0, i1, fy) = neighbours(y, &cy);
        for x in 0..width {
            let (j0, j1, fx) = neighbours(x, &cx);
            let b = bins[y * width + x];
            let m = |i: usize, j: usize| maps[i * tx + j][b];
            let top = (1.0 - fx) * m(i0, j0) + fx * m(i0, j1);
            let bottom = (1.0 - fx) * m(i1, j0) + fx * m(i1, j1);
            out[y * width + x] = ((1.0 - fy) * top + fy * bottom).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}
