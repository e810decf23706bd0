//! Geometric oracle: LV indices and cardiac phase computed directly from
//! label masks.

mod cca;
mod indices;
mod phase;
mod targets;

pub use cca::{component_roots, keep_largest_component, Connectivity};
pub use indices::{
    cavity_dimensions, rasterize_disc, region_area, regional_wall_thickness, sector_of, LabelFrame, BACKGROUND, CAVITY,
    DIMENSION_ANGLES, MYOCARDIUM, RAY_STEP, RWT_RAYS, SECTORS,
};
pub use phase::{derive_phase_labels, extreme_frames, labels_from_extremes, ED, ES};
pub use targets::{ImageScale, NormalizationStats, TargetTransform};

use std::io::{Read, Write};

use crate::error::{CqError, Result};
use crate::numfmt::sig6;

pub const INDEX_COUNT: usize = 11;
pub const INDEX_NAMES: [&str; INDEX_COUNT] =
    ["A1", "A2", "D1", "D2", "D3", "RWT1", "RWT2", "RWT3", "RWT4", "RWT5", "RWT6"];

/// The 11 indices of one frame in physical units (mm², mm) plus its phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IndexVector {
    pub values: [f64; INDEX_COUNT],
    pub phase: u8,
}

/// Label maps `t × h × w` over {background, cavity, myocardium}.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSequence {
    pub labels: Vec<u8>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Millimetres per pixel, isotropic.
    pub spacing: f64,
}

impl MaskSequence {
    pub fn new(labels: Vec<u8>, frames: usize, height: usize, width: usize, spacing: f64) -> Result<Self> {
        if labels.len() != frames * height * width || frames == 0 || height == 0 || width == 0 {
            return Err(CqError::invalid(
                "mask sequence",
                format!("{} labels for {frames}x{height}x{width}", labels.len()),
            ));
        }
        if let Some(l) = labels.iter().find(|&&l| l > MYOCARDIUM) {
            return Err(CqError::invalid("mask sequence", format!("label {l} outside {{0, 1, 2}}")));
        }
        if !(spacing > 0.0 && spacing.is_finite()) {
            return Err(CqError::invalid("mask sequence", format!("pixel spacing {spacing} must be positive")));
        }
        Ok(Self { labels, frames, height, width, spacing })
    }

    pub fn frame(&self, f: usize) -> LabelFrame<'_> {
        let n = self.height * self.width;
        LabelFrame::new(&self.labels[f * n..(f + 1) * n], self.height, self.width)
    }
}

/// Keeps the largest cavity and myocardium components of one frame.
pub fn clean_frame(frame: &LabelFrame<'_>, conn: Connectivity) -> Vec<u8> {
    let (h, w) = (frame.height, frame.width);
    let cav = keep_largest_component(&frame.labels.iter().map(|&l| l == CAVITY).collect::<Vec<_>>(), h, w, conn);
    let myo = keep_largest_component(&frame.labels.iter().map(|&l| l == MYOCARDIUM).collect::<Vec<_>>(), h, w, conn);
    cav.iter()
        .zip(&myo)
        .map(|(&c, &m)| if c { CAVITY } else if m { MYOCARDIUM } else { BACKGROUND })
        .collect()
}

/// Areas, dimensions and wall thicknesses of one frame.
pub fn frame_indices(frame: &LabelFrame<'_>, spacing: f64) -> Result<[f64; INDEX_COUNT]> {
    if frame.count(CAVITY) == 0 {
        return Err(CqError::degenerate("quantify", "cavity is empty"));
    }
    let dims = cavity_dimensions(frame, spacing)?;
    let rwt = regional_wall_thickness(frame, spacing)?;
    let mut v = [0.0; INDEX_COUNT];
    v[0] = region_area(frame, CAVITY, spacing);
    v[1] = region_area(frame, MYOCARDIUM, spacing);
    v[2..5].copy_from_slice(&dims);
    v[5..].copy_from_slice(&rwt);
    Ok(v)
}

/// Per-frame component cleanup, then indices and phase labels for every frame.
pub fn quantify_sequence(masks: &MaskSequence, conn: Connectivity) -> Result<Vec<IndexVector>> {
    let mut values = Vec::with_capacity(masks.frames);
    for f in 0..masks.frames {
        let cleaned = clean_frame(&masks.frame(f), conn);
        let frame = LabelFrame::new(&cleaned, masks.height, masks.width);
        values.push(frame_indices(&frame, masks.spacing).map_err(|e| e.in_frame(f))?);
    }
    let areas: Vec<f64> = values.iter().map(|v| v[0]).collect();
    let phases = derive_phase_labels(&areas)?;
    Ok(values.into_iter().zip(phases).map(|(values, phase)| IndexVector { values, phase }).collect())
}

pub fn index_csv_header() -> Vec<&'static str> {
    let mut h = vec!["frame"];
    h.extend(INDEX_NAMES);
    h.push("phase");
    h
}

/// One row per frame: frame, A1, A2, D1..D3, RWT1..RWT6, phase.
pub fn write_index_csv<W: Write>(out: W, rows: &[IndexVector]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let to_io = |e: csv::Error| CqError::Io(e.into());
    w.write_record(index_csv_header()).map_err(to_io)?;
    for (f, r) in rows.iter().enumerate() {
        let mut rec = vec![f.to_string()];
        rec.extend(r.values.iter().map(|&v| sig6(v)));
        rec.push(r.phase.to_string());
        w.write_record(&rec).map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_index_csv<R: Read>(input: R, origin: &str) -> Result<Vec<IndexVector>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| CqError::data(origin, e))?;
    if header.iter().collect::<Vec<_>>() != index_csv_header() {
        return Err(CqError::data(origin, format!("unexpected header {:?}", header)));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| CqError::data(origin, e))?;
        let field = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| CqError::data(origin, format!("row {}: bad number {:?}", line + 1, &rec[i])))
        };
        let values: [f64; INDEX_COUNT] = std::array::from_fn(|i| field(i + 1).unwrap_or(f64::NAN));
        if values.iter().any(|v| v.is_nan()) {
            return Err(CqError::data(origin, format!("row {} has a malformed index value", line + 1)));
        }
        let phase = field(INDEX_COUNT + 1)?;
        if phase != 0.0 && phase != 1.0 {
            return Err(CqError::data(origin, format!("row {}: phase {phase} is not 0 or 1", line + 1)));
        }
        rows.push(IndexVector { values, phase: phase as u8 });
    }
    Ok(rows)
}
