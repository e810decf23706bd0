//! On-disk phantom datasets: one directory per subject plus a manifest.

use std::fs;
use std::path::{Path, PathBuf};

use cq_tensor::container::{read_container, write_container};
use cq_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::{generate_phantom, Phantom, PhantomParams, MIN_CONTRACTION};
use crate::error::{CqError, Result};
use crate::geometry::{read_index_csv, write_index_csv, IndexVector, MaskSequence};

pub const MANIFEST: &str = "manifest.csv";
pub const IMAGES: &str = "images.cqt";
pub const MASKS: &str = "masks.cqt";
pub const INDICES: &str = "indices.csv";
pub const ANALYTIC: &str = "analytic.csv";
pub const META: &str = "meta.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSetConfig {
    pub subjects: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub noise_std: f64,
    /// End-diastolic endocardial radius range, pixels at an 80-pixel side.
    pub r_ed_range: [f64; 2],
    /// Smallest end-systolic radius, same units.
    pub r_es_min: f64,
    /// Base wall thickness range, same units.
    pub wall_range: [f64; 2],
}

impl Default for PhantomSetConfig {
    fn default() -> Self {
        Self {
            subjects: 4,
            frames: 20,
            height: 80,
            width: 80,
            noise_std: 0.05,
            r_ed_range: [15.0, 20.0],
            r_es_min: 10.0,
            wall_range: [4.0, 7.0],
        }
    }
}

impl PhantomSetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 {
            return Err(CqError::config("subjects", "must be at least 1"));
        }
        if self.frames < 2 || self.height == 0 || self.width == 0 {
            return Err(CqError::config("frames", "need at least 2 frames and a non-empty image"));
        }
        let [lo, hi] = self.r_ed_range;
        if !(lo > 0.0 && lo < hi) {
            return Err(CqError::config("r_ed_range", format!("[{lo}, {hi}] is not an increasing positive range")));
        }
        if !(self.r_es_min > 0.0 && self.r_es_min < lo - MIN_CONTRACTION) {
            return Err(CqError::config(
                "r_es_min",
                format!("{} must be positive and at least {MIN_CONTRACTION} below r_ed_range[0] = {lo}", self.r_es_min),
            ));
        }
        let [wl, wh] = self.wall_range;
        if !(wl > 1.0 && wl < wh) {
            return Err(CqError::config("wall_range", format!("[{wl}, {wh}] must be increasing and above 1")));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CqError::config("noise_std", "must be non-negative"));
        }
        Ok(())
    }
}

pub fn subject_id(i: usize) -> String {
    format!("subject_{i:03}")
}

/// Generates `cfg.subjects` phantoms from one master seed.
pub fn generate_set(cfg: &PhantomSetConfig, seed: u64) -> Result<Vec<Phantom>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.subjects)
        .map(|i| {
            let params = PhantomParams::sample(cfg, &mut rng);
            generate_phantom(&params, &subject_id(i))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct SubjectMeta {
    subject: String,
    seed: u64,
    spacing: f64,
    params: PhantomParams,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CqError::data(path, e))
}

pub fn write_subject(dir: &Path, p: &Phantom) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CqError::data(dir, e))?;
    let (t, h, w) = (p.masks.frames, p.masks.height, p.masks.width);
    let mut buf = Vec::new();
    write_container(&mut buf, &[("images".to_string(), p.sequence.frames.clone())])?;
    write_file(&dir.join(IMAGES), &buf)?;
    let labels = Tensor::new(&[t, h, w], p.masks.labels.iter().map(|&l| l as f32).collect())?;
    buf.clear();
    write_container(&mut buf, &[("masks".to_string(), labels)])?;
    write_file(&dir.join(MASKS), &buf)?;
    buf.clear();
    write_index_csv(&mut buf, &p.indices)?;
    write_file(&dir.join(INDICES), &buf)?;
    buf.clear();
    write_index_csv(&mut buf, &p.analytic)?;
    write_file(&dir.join(ANALYTIC), &buf)?;
    let meta = SubjectMeta {
        subject: p.sequence.subject.clone(),
        seed: p.params.seed,
        spacing: p.params.spacing,
        params: p.params.clone(),
    };
    let text = toml::to_string(&meta).map_err(|e| CqError::data(dir.join(META), e))?;
    write_file(&dir.join(META), text.as_bytes())
}

/// Writes every subject directory and the manifest.
pub fn write_dataset(root: &Path, phantoms: &[Phantom]) -> Result<()> {
    let mut manifest = String::from("subject,seed\n");
    for p in phantoms {
        write_subject(&root.join(&p.sequence.subject), p)?;
        manifest.push_str(&format!("{},{}\n", p.sequence.subject, p.params.seed));
    }
    write_file(&root.join(MANIFEST), manifest.as_bytes())
}

/// A subject as read back from disk.
#[derive(Clone, Debug)]
pub struct Subject {
    pub id: String,
    pub images: Tensor<f32>,
    pub masks: MaskSequence,
    pub indices: Vec<IndexVector>,
}

impl Subject {
    pub fn spacing(&self) -> f64 {
        self.masks.spacing
    }
}

fn single_tensor(path: &Path, name: &str) -> Result<Tensor<f32>> {
    let file = fs::File::open(path).map_err(|e| CqError::data(path, e))?;
    let mut tensors = read_container(std::io::BufReader::new(file)).map_err(|e| CqError::data(path, e))?;
    match tensors.iter().position(|(n, _)| n == name) {
        Some(i) if tensors[i].1.rank() == 3 => Ok(tensors.swap_remove(i).1),
        Some(_) => Err(CqError::data(path, format!("tensor {name} must have rank 3 [t, h, w]"))),
        None => Err(CqError::data(path, format!("missing tensor {name}"))),
    }
}

pub fn read_subject(dir: &Path) -> Result<Subject> {
    let meta_path = dir.join(META);
    let text = fs::read_to_string(&meta_path).map_err(|e| CqError::data(&meta_path, e))?;
    let meta: SubjectMeta = toml::from_str(&text).map_err(|e| CqError::data(&meta_path, e.message()))?;
    let images = single_tensor(&dir.join(IMAGES), "images")?;
    let raw = single_tensor(&dir.join(MASKS), "masks")?;
    if raw.shape() != images.shape() {
        return Err(CqError::data(dir, format!("masks {:?} do not match images {:?}", raw.shape(), images.shape())));
    }
    let mut labels = Vec::with_capacity(raw.len());
    for &v in raw.data() {
        if !(v == 0.0 || v == 1.0 || v == 2.0) {
            return Err(CqError::data(dir.join(MASKS), format!("label value {v} is not 0, 1 or 2")));
        }
        labels.push(v as u8);
    }
    let s = raw.shape();
    let masks = MaskSequence::new(labels, s[0], s[1], s[2], meta.spacing)?;
    let idx_path = dir.join(INDICES);
    let file = fs::File::open(&idx_path).map_err(|e| CqError::data(&idx_path, e))?;
    let indices = read_index_csv(file, &idx_path.display().to_string())?;
    if indices.len() != s[0] {
        return Err(CqError::data(&idx_path, format!("{} rows for {} frames", indices.len(), s[0])));
    }
    Ok(Subject { id: meta.subject, images, masks, indices })
}

/// Subject directories listed in the manifest, in manifest order.
pub fn manifest_entries(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    let path = root.join(MANIFEST);
    let mut r = csv::Reader::from_path(&path).map_err(|e| CqError::data(&path, e))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CqError::data(&path, e))?;
        let id = rec.get(0).ok_or_else(|| CqError::data(&path, "empty row"))?.to_string();
        out.push((id.clone(), root.join(id)));
    }
    if out.is_empty() {
        return Err(CqError::data(&path, "manifest lists no subjects"));
    }
    Ok(out)
}

pub fn read_dataset(root: &Path) -> Result<Vec<Subject>> {
    manifest_entries(root)?.iter().map(|(_, dir)| read_subject(dir)).collect()
}
