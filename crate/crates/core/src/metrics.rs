//! Evaluation metrics: index regression error and correlation, phase error
//! rate, segmentation overlap and boundary distance, Bland–Altman agreement.

use crate::error::{CqError, Result};
use crate::geometry::{IndexVector, INDEX_COUNT, INDEX_NAMES};
use crate::numfmt::sig6;

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(CqError::invalid(op, format!("series lengths differ: {a} vs {b}")));
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("mae", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(CqError::degenerate("mae", "empty series"));
    }
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Pearson correlation coefficient.
pub fn pcc(pred: &[f64], truth: &[f64]) -> Result<f64> {
    same_len("pcc", pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(CqError::degenerate("pcc", "need at least 2 samples"));
    }
    let n = pred.len() as f64;
    let (mp, mt) = (pred.iter().sum::<f64>() / n, truth.iter().sum::<f64>() / n);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp) * (p - mp);
        vt += (t - mt) * (t - mt);
    }
    if vp == 0.0 || vt == 0.0 {
        return Err(CqError::degenerate("pcc", "a series has zero variance"));
    }
    Ok((cov / (vp.sqrt() * vt.sqrt())).clamp(-1.0, 1.0))
}

/// Percentage of mismatched phase labels.
pub fn error_rate(pred: &[u8], truth: &[u8]) -> Result<f64> {
    same_len("error rate", pred.len(), truth.len())?;
    if pred.is_empty() {
        return Err(CqError::degenerate("error rate", "empty series"));
    }
    let wrong = pred.iter().zip(truth).filter(|(p, t)| p != t).count();
    Ok(100.0 * wrong as f64 / pred.len() as f64)
}

/// `2|A∩B| / (|A| + |B|)` for one label; 1 when both are empty.
pub fn dice_score(pred: &[u8], truth: &[u8], label: u8) -> Result<f64> {
    same_len("dice", pred.len(), truth.len())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        let (a, b) = (p == label, t == label);
        inter += (a && b) as usize;
        total += a as usize + b as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

const FAR: f64 = 1e30;

/// One-dimensional squared distance transform of a sampled function.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let parabola = |p: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
        let mut s = parabola(v[k]);
        // z[0] is -inf, so this never pops the first parabola.
        while s <= z[k] {
            k -= 1;
            s = parabola(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel.
pub fn squared_distance_transform(set: &[bool], height: usize, width: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = set.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let n = height.max(width);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Symmetric Hausdorff distance between the pixel centres of one label, in mm.
pub fn hausdorff(pred: &[u8], truth: &[u8], height: usize, width: usize, label: u8, spacing: f64) -> Result<f64> {
    same_len("hausdorff", pred.len(), truth.len())?;
    same_len("hausdorff", pred.len(), height * width)?;
    let a: Vec<bool> = pred.iter().map(|&p| p == label).collect();
    let b: Vec<bool> = truth.iter().map(|&t| t == label).collect();
    match (a.contains(&true), b.contains(&true)) {
        (false, false) => return Ok(0.0),
        (true, true) => {}
        _ => return Err(CqError::degenerate("hausdorff", format!("label {label} is present in only one mask"))),
    }
    let (da, db) = (squared_distance_transform(&a, height, width), squared_distance_transform(&b, height, width));
    let directed = |set: &[bool], dist: &[f64]| set.iter().zip(dist).filter(|(s, _)| **s).map(|(_, d)| *d).fold(0.0, f64::max);
    Ok(directed(&a, &db).max(directed(&b, &da)).sqrt() * spacing)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlandAltman {
    pub bias: f64,
    pub loa_low: f64,
    pub loa_high: f64,
}

/// Mean difference and its ±1.96 population-std limits of agreement.
pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman> {
    same_len("bland-altman", pred.len(), truth.len())?;
    if pred.len() < 2 {
        return Err(CqError::degenerate("bland-altman", "need at least 2 samples"));
    }
    let d: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let n = d.len() as f64;
    let bias = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / n).sqrt();
    Ok(BlandAltman { bias, loa_low: bias - 1.96 * sd, loa_high: bias + 1.96 * sd })
}

/// Predictions and ground truth of one evaluated subject.
#[derive(Clone, Debug)]
pub struct SubjectEval {
    pub id: String,
    pub spacing: f64,
    pub height: usize,
    pub width: usize,
    pub pred_labels: Vec<u8>,
    pub true_labels: Vec<u8>,
    pub pred_indices: Vec<IndexVector>,
    pub true_indices: Vec<IndexVector>,
}

pub const INDEX_GROUPS: [(&str, std::ops::Range<usize>); 3] = [("areas", 0..2), ("dimensions", 2..5), ("rwt", 5..11)];

#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub mae: [f64; INDEX_COUNT],
    /// NaN where a series has zero variance.
    pub pcc: [f64; INDEX_COUNT],
    pub error_rate: f64,
    /// Mean per-frame Dice of cavity and myocardium.
    pub dice: [f64; 2],
    /// Mean per-frame Hausdorff distance of cavity and myocardium, mm,
    /// over frames where the label is present in both masks.
    pub hausdorff: [f64; 2],
    /// Frames skipped by the Hausdorff mean because a label was missing on one side.
    pub hausdorff_skipped: [usize; 2],
    pub bland_altman: [BlandAltman; 3],
    pub frames: usize,
}

impl MetricsReport {
    pub fn compute(subjects: &[SubjectEval]) -> Result<Self> {
        let mut pred = vec![Vec::new(); INDEX_COUNT];
        let mut truth = vec![Vec::new(); INDEX_COUNT];
        let (mut pp, mut tp) = (Vec::new(), Vec::new());
        let (mut dice, mut hd, mut hd_n, mut skipped) = ([0.0; 2], [0.0; 2], [0usize; 2], [0usize; 2]);
        let mut frames = 0usize;
        for s in subjects {
            same_len("metrics", s.pred_indices.len(), s.true_indices.len())?;
            for (p, t) in s.pred_indices.iter().zip(&s.true_indices) {
                for i in 0..INDEX_COUNT {
                    pred[i].push(p.values[i]);
                    truth[i].push(t.values[i]);
                }
                pp.push(p.phase);
                tp.push(t.phase);
            }
            let n = s.height * s.width;
            same_len("metrics", s.pred_labels.len(), s.true_labels.len())?;
            for (pf, tf) in s.pred_labels.chunks(n).zip(s.true_labels.chunks(n)) {
                frames += 1;
                for (c, label) in [1u8, 2].into_iter().enumerate() {
                    dice[c] += dice_score(pf, tf, label)?;
                    match hausdorff(pf, tf, s.height, s.width, label, s.spacing) {
                        Ok(h) => {
                            hd[c] += h;
                            hd_n[c] += 1;
                        }
                        Err(_) => skipped[c] += 1,
                    }
                }
            }
        }
        if frames == 0 {
            return Err(CqError::degenerate("metrics", "no frames to evaluate"));
        }
        let mut report = Self {
            mae: [0.0; INDEX_COUNT],
            pcc: [f64::NAN; INDEX_COUNT],
            error_rate: error_rate(&pp, &tp)?,
            dice: dice.map(|d| d / frames as f64),
            hausdorff: std::array::from_fn(|c| if hd_n[c] > 0 { hd[c] / hd_n[c] as f64 } else { f64::NAN }),
            hausdorff_skipped: skipped,
            bland_altman: [BlandAltman { bias: 0.0, loa_low: 0.0, loa_high: 0.0 }; 3],
            frames,
        };
        for i in 0..INDEX_COUNT {
            report.mae[i] = mae(&pred[i], &truth[i])?;
            report.pcc[i] = pcc(&pred[i], &truth[i]).unwrap_or(f64::NAN);
        }
        for (g, (_, range)) in INDEX_GROUPS.iter().enumerate() {
            let p: Vec<f64> = range.clone().flat_map(|i| pred[i].iter().copied()).collect();
            let t: Vec<f64> = range.clone().flat_map(|i| truth[i].iter().copied()).collect();
            report.bland_altman[g] = bland_altman(&p, &t)?;
        }
        Ok(report)
    }

    /// `metric,target,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,target,value\n");
        for i in 0..INDEX_COUNT {
            s.push_str(&format!("mae,{},{}\n", INDEX_NAMES[i], sig6(self.mae[i])));
        }
        for i in 0..INDEX_COUNT {
            s.push_str(&format!("pcc,{},{}\n", INDEX_NAMES[i], sig6(self.pcc[i])));
        }
        s.push_str(&format!("error_rate,phase,{}\n", sig6(self.error_rate)));
        for (c, name) in ["cavity", "myocardium"].iter().enumerate() {
            s.push_str(&format!("dice,{name},{}\n", sig6(self.dice[c])));
            s.push_str(&format!("hausdorff,{name},{}\n", sig6(self.hausdorff[c])));
        }
        for (g, (name, _)) in INDEX_GROUPS.iter().enumerate() {
            let b = self.bland_altman[g];
            s.push_str(&format!("ba_bias,{name},{}\n", sig6(b.bias)));
            s.push_str(&format!("ba_loa_low,{name},{}\n", sig6(b.loa_low)));
            s.push_str(&format!("ba_loa_high,{name},{}\n", sig6(b.loa_high)));
        }
        s
    }

    /// Text table with one block per index family, then phase and segmentation rows.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let row = |s: &mut String, name: &str, mae: f64, pcc: f64| {
            s.push_str(&format!("{name:<16} {:>12} {:>10}\n", sig6(mae), sig6(pcc)));
        };
        s.push_str(&format!("{:<16} {:>12} {:>10}\n", "index", "MAE", "PCC"));
        for (name, range) in INDEX_GROUPS {
            for i in range.clone() {
                row(&mut s, INDEX_NAMES[i], self.mae[i], self.pcc[i]);
            }
            let n = range.len() as f64;
            let avg_mae = range.clone().map(|i| self.mae[i]).sum::<f64>() / n;
            let avg_pcc = range.clone().map(|i| self.pcc[i]).sum::<f64>() / n;
            row(&mut s, &format!("avg {name}"), avg_mae, avg_pcc);
        }
        s.push_str(&format!("phase ER (%) {}\n", sig6(self.error_rate)));
        s.push_str(&format!(
            "Dice cavity {}  myocardium {}\n",
            sig6(self.dice[0]),
            sig6(self.dice[1])
        ));
        s.push_str(&format!(
            "HD (mm) cavity {}  myocardium {}  (frames skipped: {}, {})\n",
            sig6(self.hausdorff[0]),
            sig6(self.hausdorff[1]),
            self.hausdorff_skipped[0],
            self.hausdorff_skipped[1]
        ));
        for (g, (name, _)) in INDEX_GROUPS.iter().enumerate() {
            let b = self.bland_altman[g];
            s.push_str(&format!(
                "Bland-Altman {name}: bias {}  LoA [{}, {}]\n",
                sig6(b.bias),
                sig6(b.loa_low),
                sig6(b.loa_high)
            ));
        }
        s.push_str(&format!("frames evaluated: {}\n", self.frames));
        s
    }
}
