//! Areas, cavity dimensions and regional wall thicknesses of one labelled frame.

use crate::error::{CqError, Result};

pub const BACKGROUND: u8 = 0;
pub const CAVITY: u8 = 1;
pub const MYOCARDIUM: u8 = 2;

/// Ray-marching step in pixels.
pub const RAY_STEP: f64 = 0.1;
/// Rays cast for wall thickness, evenly spaced from 0°.
pub const RWT_RAYS: usize = 60;
/// Directions of the three cavity chords, counterclockwise from the image x-axis.
pub const DIMENSION_ANGLES: [f64; 3] = [0.0, 60.0, 120.0];
/// Sector names in output order; sector 0 starts at 90° and they proceed counterclockwise.
pub const SECTORS: [&str; 6] = ["IS", "I", "IL", "AL", "A", "AS"];

/// Borrowed view of one `[height, width]` label map.
#[derive(Clone, Copy, Debug)]
pub struct LabelFrame<'a> {
    pub labels: &'a [u8],
    pub height: usize,
    pub width: usize,
}

impl<'a> LabelFrame<'a> {
    pub fn new(labels: &'a [u8], height: usize, width: usize) -> Self {
        assert_eq!(labels.len(), height * width, "label frame size");
        Self { labels, height, width }
    }

    pub fn count(&self, label: u8) -> usize {
        self.labels.iter().filter(|&&l| l == label).count()
    }

    /// Mean pixel-centre position `(x, y)` of a label, in pixel units.
    pub fn centroid(&self, label: u8) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.labels[y * self.width + x] == label {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Label of the pixel containing a point, `None` off the image.
    fn at(&self, x: f64, y: f64) -> Option<u8> {
        let (px, py) = ((x + 0.5).floor(), (y + 0.5).floor());
        if px < 0.0 || py < 0.0 || px >= self.width as f64 || py >= self.height as f64 {
            return None;
        }
        Some(self.labels[py as usize * self.width + px as usize])
    }

    /// Largest sampled distance along the ray at which `label` is found.
    pub fn farthest(&self, origin: (f64, f64), angle_deg: f64, label: u8) -> Option<f64> {
        let (s, c) = angle_deg.to_radians().sin_cos();
        let (dx, dy) = (c, -s);
        let mut best = None;
        for k in 0.. {
            let r = k as f64 * RAY_STEP;
            match self.at(origin.0 + r * dx, origin.1 + r * dy) {
                None => break,
                Some(l) if l == label => best = Some(r),
                Some(_) => {}
            }
        }
        best
    }
}

/// Pixel count of `label` times the pixel area.
pub fn region_area(frame: &LabelFrame<'_>, label: u8, spacing: f64) -> f64 {
    frame.count(label) as f64 * spacing * spacing
}

/// Chord lengths of the cavity through its centroid at 0°, 60° and 120°.
pub fn cavity_dimensions(frame: &LabelFrame<'_>, spacing: f64) -> Result<[f64; 3]> {
    let c = frame
        .centroid(CAVITY)
        .ok_or_else(|| CqError::degenerate("cavity dimensions", "cavity is empty"))?;
    Ok(DIMENSION_ANGLES.map(|a| {
        let fwd = frame.farthest(c, a, CAVITY).unwrap_or(0.0);
        let back = frame.farthest(c, a + 180.0, CAVITY).unwrap_or(0.0);
        (fwd + back) * spacing
    }))
}

/// Sector of a ray angle given in whole degrees.
pub fn sector_of(angle_deg: usize) -> usize {
    ((angle_deg + 270) % 360) / 60
}

/// Mean radial myocardium thickness in each of the six sectors.
pub fn regional_wall_thickness(frame: &LabelFrame<'_>, spacing: f64) -> Result<[f64; 6]> {
    let c = frame
        .centroid(CAVITY)
        .ok_or_else(|| CqError::degenerate("wall thickness", "cavity is empty"))?;
    if frame.count(MYOCARDIUM) == 0 {
        return Err(CqError::degenerate("wall thickness", "myocardium is empty"));
    }
    let step = 360 / RWT_RAYS;
    let (mut sums, mut counts) = ([0.0; 6], [0usize; 6]);
    for j in 0..RWT_RAYS {
        let angle = j * step;
        let outer = frame.farthest(c, angle as f64, MYOCARDIUM).ok_or_else(|| {
            CqError::degenerate("wall thickness", format!("myocardial ring is broken: the ray at {angle} degrees meets no myocardium"))
        })?;
        let inner = frame.farthest(c, angle as f64, CAVITY).unwrap_or(0.0);
        let k = sector_of(angle);
        sums[k] += (outer - inner).max(0.0);
        counts[k] += 1;
    }
    Ok(std::array::from_fn(|k| sums[k] / counts[k] as f64 * spacing))
}

/// Rasterizes a disc: pixel centres within `radius` of `(cx, cy)`.
pub fn rasterize_disc(height: usize, width: usize, cx: f64, cy: f64, radius: f64) -> Vec<bool> {
    (0..height * width)
        .map(|i| {
            let (x, y) = ((i % width) as f64 - cx, (i / width) as f64 - cy);
            x * x + y * y <= radius * radius
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sectors_start_at_ninety_degrees() {
        assert_eq!(sector_of(90), 0);
        assert_eq!(sector_of(144), 0);
        assert_eq!(sector_of(150), 1);
        assert_eq!(sector_of(0), 4);
        assert_eq!(sector_of(84), 5);
        assert_eq!(sector_of(354), 4);
        assert_eq!(sector_of(30), 5);
    }

    #[test]
    fn ray_direction_is_counterclockwise_with_y_down() {
        // A single cavity pixel directly above the origin pixel.
        let mut labels = vec![0u8; 25];
        labels[2 * 5 + 2] = CAVITY;
        labels[5 + 2] = CAVITY;
        let f = LabelFrame::new(&labels, 5, 5);
        let up = f.farthest((2.0, 2.0), 90.0, CAVITY).unwrap();
        let down = f.farthest((2.0, 2.0), 270.0, CAVITY).unwrap();
        assert!(up > 1.0 && down < 0.5, "{up} {down}");
    }
}
