//! Synthetic cine phantoms: a contracting annulus with per-sector wall
//! thickness, rasterized into labels and noisy intensities.

use std::f64::consts::PI;

use cq_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::PhantomSetConfig;
use super::preprocess::CineSequence;
use crate::error::{CqError, Result};
use crate::geometry::{
    labels_from_extremes, quantify_sequence, Connectivity, IndexVector, MaskSequence, BACKGROUND, CAVITY, INDEX_COUNT,
    MYOCARDIUM,
};

/// Pixel spacing range of the clinical sequences the phantoms stand in for.
pub const SPACING_RANGE: (f64, f64) = (0.6836, 2.0833);

/// Minimum gap between end-diastolic and end-systolic radius, pixels at an 80-pixel side.
pub const MIN_CONTRACTION: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Annulus centre `(x, y)` in pixels.
    pub center: [f64; 2],
    /// Endocardial radius at end-diastole, pixels.
    pub r_ed: f64,
    /// Endocardial radius at end-systole, pixels.
    pub r_es: f64,
    /// Wall thickness at end-diastole before sector offsets, pixels.
    pub wall_base: f64,
    /// Added wall thickness per sector, in output sector order.
    pub wall_offsets: [f64; 6],
    /// Extra wall thickness reached at end-systole, pixels.
    pub systolic_thickening: f64,
    pub ed_frame: usize,
    pub noise_std: f64,
    /// Mean intensity of background, cavity and myocardium.
    pub intensities: [f64; 3],
    pub spacing: f64,
    pub seed: u64,
}

impl PhantomParams {
    /// Draws a plausible subject for the configured grid. Lengths in `cfg`
    /// are given for an 80-pixel side and scale with the smaller image side.
    pub fn sample<R: Rng + ?Sized>(cfg: &PhantomSetConfig, rng: &mut R) -> Self {
        let (frames, height, width) = (cfg.frames, cfg.height, cfg.width);
        let k = height.min(width) as f64 / 80.0;
        let r_ed = rng.random_range(cfg.r_ed_range[0]..cfg.r_ed_range[1]) * k;
        let r_es = rng.random_range(cfg.r_es_min * k..r_ed - MIN_CONTRACTION * k);
        let wall_base = rng.random_range(cfg.wall_range[0]..cfg.wall_range[1]) * k;
        let wall_offsets = std::array::from_fn(|_| rng.random_range(-1.0..1.0) * k);
        let systolic_thickening = rng.random_range(1.0..3.0) * k;
        let jitter = 2.0 * k;
        let center = [
            (width - 1) as f64 / 2.0 + rng.random_range(-jitter..=jitter),
            (height - 1) as f64 / 2.0 + rng.random_range(-jitter..=jitter),
        ];
        let intensities = [
            rng.random_range(0.05..0.15),
            rng.random_range(0.75..0.95),
            rng.random_range(0.35..0.45),
        ];
        Self {
            frames,
            height,
            width,
            center,
            r_ed,
            r_es,
            wall_base,
            wall_offsets,
            systolic_thickening,
            ed_frame: rng.random_range(0..frames),
            noise_std: cfg.noise_std,
            intensities,
            spacing: rng.random_range(SPACING_RANGE.0..=SPACING_RANGE.1),
            seed: rng.random::<u64>() >> 1,
        }
    }

    /// Contraction weight: 1 at end-diastole, 0 half a cycle later.
    pub fn contraction(&self, t: usize) -> f64 {
        let n = self.frames;
        let d = (t + n - self.ed_frame % n) % n;
        let d = d.min(n - d) as f64;
        (1.0 + (2.0 * PI * d / n as f64).cos()) / 2.0
    }

    pub fn endo_radius(&self, t: usize) -> f64 {
        self.r_es + (self.r_ed - self.r_es) * self.contraction(t)
    }

    pub fn wall_thickness(&self, t: usize, sector: usize) -> f64 {
        self.wall_base + self.wall_offsets[sector] + self.systolic_thickening * (1.0 - self.contraction(t))
    }

    pub fn es_frame(&self) -> usize {
        (self.ed_frame + self.frames / 2) % self.frames
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(CqError::config("frames", "need at least 2 frames and a non-empty image"));
        }
        if !(self.r_es > 0.0) {
            return Err(CqError::config("r_es", format!("end-systolic radius {} must be positive", self.r_es)));
        }
        if !(self.r_es < self.r_ed) {
            return Err(CqError::config(
                "r_es",
                format!("end-systolic radius {} must be smaller than end-diastolic radius {}", self.r_es, self.r_ed),
            ));
        }
        if let Some(k) = (0..6).find(|&k| !(self.wall_base + self.wall_offsets[k] > 0.0)) {
            return Err(CqError::config("wall_offsets", format!("wall thickness in sector {} is not positive", k + 1)));
        }
        if !(self.systolic_thickening >= 0.0) {
            return Err(CqError::config("systolic_thickening", "must be non-negative"));
        }
        if self.ed_frame >= self.frames {
            return Err(CqError::config("ed_frame", format!("{} is not below the frame count {}", self.ed_frame, self.frames)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CqError::config("noise_std", "must be non-negative"));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(CqError::config("spacing", format!("{} must be positive", self.spacing)));
        }
        let outer = (0..self.frames)
            .map(|t| self.endo_radius(t) + (0..6).map(|k| self.wall_thickness(t, k)).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        let [cx, cy] = self.center;
        if cx - outer < 0.0 || cy - outer < 0.0 || cx + outer > (self.width - 1) as f64 || cy + outer > (self.height - 1) as f64 {
            return Err(CqError::config(
                "center",
                format!("annulus of outer radius {outer:.3} around ({cx:.3}, {cy:.3}) leaves the frame"),
            ));
        }
        Ok(())
    }

    /// Label map of one frame: pixel centres inside the endocardial circle
    /// are cavity, those inside the sector's epicardial radius are myocardium.
    pub fn rasterize_frame(&self, t: usize) -> Vec<u8> {
        let r = self.endo_radius(t);
        let outer: [f64; 6] = std::array::from_fn(|k| r + self.wall_thickness(t, k));
        let [cx, cy] = self.center;
        (0..self.height * self.width)
            .map(|i| {
                let (dx, dy) = ((i % self.width) as f64 - cx, (i / self.width) as f64 - cy);
                let d2 = dx * dx + dy * dy;
                if d2 <= r * r {
                    return CAVITY;
                }
                let angle = (-dy).atan2(dx).to_degrees().rem_euclid(360.0);
                let sector = (((angle - 90.0).rem_euclid(360.0) / 60.0) as usize).min(5);
                if d2 <= outer[sector] * outer[sector] {
                    MYOCARDIUM
                } else {
                    BACKGROUND
                }
            })
            .collect()
    }

    /// Closed-form indices of the continuous annulus; phase from the cosine profile.
    pub fn analytic_indices(&self) -> Vec<IndexVector> {
        let s = self.spacing;
        let phases = labels_from_extremes(self.frames, self.ed_frame, self.es_frame());
        (0..self.frames)
            .map(|t| {
                let r = self.endo_radius(t);
                let th: [f64; 6] = std::array::from_fn(|k| self.wall_thickness(t, k));
                let mut v = [0.0; INDEX_COUNT];
                v[0] = PI * r * r * s * s;
                v[1] = th.iter().map(|w| PI * ((r + w).powi(2) - r * r) / 6.0).sum::<f64>() * s * s;
                for d in &mut v[2..5] {
                    *d = 2.0 * r * s;
                }
                for k in 0..6 {
                    v[5 + k] = th[k] * s;
                }
                IndexVector { values: v, phase: phases[t] }
            })
            .collect()
    }
}

/// One generated subject.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub params: PhantomParams,
    pub sequence: CineSequence,
    pub masks: MaskSequence,
    /// Oracle indices of the noiseless masks.
    pub indices: Vec<IndexVector>,
    pub analytic: Vec<IndexVector>,
}

pub fn generate_phantom(params: &PhantomParams, subject: &str) -> Result<Phantom> {
    params.validate()?;
    let (t, h, w) = (params.frames, params.height, params.width);
    let mut labels = Vec::with_capacity(t * h * w);
    for f in 0..t {
        labels.extend(params.rasterize_frame(f));
    }
    let masks = MaskSequence::new(labels, t, h, w, params.spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_std).map_err(|e| CqError::config("noise_std", e.to_string()))?;
    let pixels: Vec<f32> =
        masks.labels.iter().map(|&l| (params.intensities[l as usize] + noise.sample(&mut rng)) as f32).collect();
    let sequence = CineSequence { frames: Tensor::new(&[t, h, w], pixels)?, spacing: params.spacing, subject: subject.to_string() };
    let indices = quantify_sequence(&masks, Connectivity::Eight)?;
    Ok(Phantom { params: params.clone(), sequence, masks, indices, analytic: params.analytic_indices() })
}
