//! Geometric augmentation shared by an image sequence and its masks.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub flip_h: bool,
    pub flip_v: bool,
    pub elastic: bool,
    pub max_rotation_deg: f64,
    pub elastic_alpha: f64,
    pub elastic_sigma: f64,
    /// Training samples per original sequence, the original included.
    pub expansion: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            flip_h: true,
            flip_v: true,
            elastic: true,
            max_rotation_deg: 30.0,
            elastic_alpha: 8.0,
            elastic_sigma: 4.0,
            expansion: 8,
        }
    }
}

/// One sampled transform, applied identically to every frame.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpatialTransform {
    /// Counterclockwise rotation about the image centre, degrees.
    pub rotation_deg: Option<f64>,
    pub flip_h: bool,
    pub flip_v: bool,
    /// Per-pixel `(dx, dy)` displacement applied before rotation and flips.
    pub displacement: Option<Vec<(f64, f64)>>,
}

impl SpatialTransform {
    /// Samples each enabled operation with probability 1/2.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut R) -> Self {
        let mut t = Self::default();
        if cfg.rotate && rng.random_bool(0.5) {
            t.rotation_deg = Some(rng.random_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg));
        }
        t.flip_h = cfg.flip_h && rng.random_bool(0.5);
        t.flip_v = cfg.flip_v && rng.random_bool(0.5);
        if cfg.elastic && rng.random_bool(0.5) {
            t.displacement = Some(elastic_field(height, width, cfg.elastic_alpha, cfg.elastic_sigma, rng));
        }
        t
    }

    /// Source position sampled for output pixel `(x, y)`.
    fn source(&self, x: usize, y: usize, height: usize, width: usize) -> (f64, f64) {
        let (mut px, mut py) = (x as f64, y as f64);
        if self.flip_h {
            px = (width - 1) as f64 - px;
        }
        if self.flip_v {
            py = (height - 1) as f64 - py;
        }
        if let Some(a) = self.rotation_deg {
            let (cx, cy) = ((width - 1) as f64 / 2.0, (height - 1) as f64 / 2.0);
            let (s, c) = a.to_radians().sin_cos();
            let (dx, dy) = (px - cx, py - cy);
            // Inverse of a counterclockwise turn as seen with y pointing down.
            px = cx + c * dx - s * dy;
            py = cy + s * dx + c * dy;
        }
        if let Some(d) = &self.displacement {
            let ix = (px.round().clamp(0.0, (width - 1) as f64)) as usize;
            let iy = (py.round().clamp(0.0, (height - 1) as f64)) as usize;
            let (ddx, ddy) = d[iy * width + ix];
            px += ddx;
            py += ddy;
        }
        (px, py)
    }

    /// Bilinear resampling of every `[h, w]` frame, clamping at the border.
    pub fn apply_image(&self, frames: &[f32], height: usize, width: usize) -> Vec<f32> {
        let map = self.source_map(height, width);
        let mut out = Vec::with_capacity(frames.len());
        for f in frames.chunks(height * width) {
            out.extend(map.iter().map(|&(x, y)| bilinear(f, height, width, x, y)));
        }
        out
    }

    /// Nearest-neighbour resampling of every `[h, w]` label frame.
    pub fn apply_mask(&self, labels: &[u8], height: usize, width: usize) -> Vec<u8> {
        let map = self.source_map(height, width);
        let mut out = Vec::with_capacity(labels.len());
        for f in labels.chunks(height * width) {
            out.extend(map.iter().map(|&(x, y)| {
                let ix = x.round().clamp(0.0, (width - 1) as f64) as usize;
                let iy = y.round().clamp(0.0, (height - 1) as f64) as usize;
                f[iy * width + ix]
            }));
        }
        out
    }

    fn source_map(&self, height: usize, width: usize) -> Vec<(f64, f64)> {
        (0..height * width).map(|i| self.source(i % width, i / width, height, width)).collect()
    }
}

fn bilinear(f: &[f32], height: usize, width: usize, x: f64, y: f64) -> f32 {
    let x = x.clamp(0.0, (width - 1) as f64);
    let y = y.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx: usize, yy: usize| f[yy * width + xx] as f64;
    let top = (1.0 - fx) * p(x0, y0) + fx * p(x1, y0);
    let bottom = (1.0 - fx) * p(x0, y1) + fx * p(x1, y1);
    ((1.0 - fy) * top + fy * bottom) as f32
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with border clamping.
pub fn gaussian_blur(field: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] =
                k.iter().enumerate().map(|(i, w)| w * field[y * width + clamp(x as isize + i as isize - r, width)]).sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] =
                k.iter().enumerate().map(|(i, w)| w * tmp[clamp(y as isize + i as isize - r, height) * width + x]).sum();
        }
    }
    out
}

/// Uniform(−1, 1) displacements, Gaussian-smoothed with `sigma` and scaled by `alpha`.
pub fn elastic_field<R: Rng + ?Sized>(height: usize, width: usize, alpha: f64, sigma: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let n = height * width;
    let dx: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let dy: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (sx, sy) = (gaussian_blur(&dx, height, width, sigma), gaussian_blur(&dy, height, width, sigma));
    sx.into_iter().zip(sy).map(|(a, b)| (alpha * a, alpha * b)).collect()
}
