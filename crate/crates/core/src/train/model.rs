//! A trained pipeline (G, D, target transform, preprocessing settings) and
//! its checkpoint form.

use std::io::{Read, Write};

use cq_tensor::container::{read_container, write_container};
use cq_tensor::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CqError, Result};
use crate::geometry::{
    clean_frame, Connectivity, ImageScale, IndexVector, LabelFrame, NormalizationStats, TargetTransform, CAVITY,
    INDEX_COUNT, MYOCARDIUM,
};
use crate::imaging::{preprocess, ClaheParams};
use crate::networks::{DrUnet, DrUnetConfig, SegmentationOutput, Stmt, StmtConfig, D_META, D_PREFIX, G_META, G_PREFIX};

const NORM_META: &str = "meta.norm";
const SCALE_META: &str = "meta.scale";
const CLAHE_META: &str = "meta.clahe";
const CCA_META: &str = "meta.cca";

#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore<f32>,
    pub g: DrUnet,
    pub d: Stmt,
    pub transform: TargetTransform,
    pub clahe: ClaheParams,
    /// Largest-component cleanup of G's hard masks before they reach D.
    pub cca: Option<Connectivity>,
}

/// Inference result for one sequence.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub segmentation: SegmentationOutput,
    /// Hard labels handed to D (after cleanup when enabled).
    pub labels: Vec<u8>,
    pub indices: Vec<IndexVector>,
    pub ed_probability: Vec<f64>,
}

/// Rounds statistics to what a checkpoint can hold, so saved and in-memory
/// models agree exactly.
pub fn f32_exact(stats: &NormalizationStats) -> NormalizationStats {
    NormalizationStats {
        mean: stats.mean.map(|v| v as f32 as f64),
        std: stats.std.map(|v| v as f32 as f64),
    }
}

/// Channels 1 and 2 of hard labels as a `[1, 2, t, h, w]` volume.
pub fn mask_volume(labels: &[u8], frames: usize, height: usize, width: usize) -> Result<Tensor<f32>> {
    let n = height * width;
    let mut data = vec![0.0f32; 2 * labels.len()];
    for (c, label) in [CAVITY, MYOCARDIUM].into_iter().enumerate() {
        for (i, &l) in labels.iter().enumerate() {
            if l == label {
                data[c * frames * n + i] = 1.0;
            }
        }
    }
    Ok(Tensor::new(&[1, 2, frames, height, width], data)?)
}

impl Model {
    /// Fresh networks with G and D drawn from separate seeded streams.
    pub fn init(
        g_cfg: &DrUnetConfig,
        d_cfg: &StmtConfig,
        transform: TargetTransform,
        clahe: ClaheParams,
        cca: Option<Connectivity>,
        seed: u64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let g = DrUnet::build(g_cfg, G_PREFIX, &mut store, &mut rng)?;
        rng.set_stream(2);
        rng.set_word_pos(0);
        let d = Stmt::build(d_cfg, D_PREFIX, &mut store, &mut rng)?;
        Ok(Self { store, g, d, transform, clahe, cca })
    }

    pub fn clean_labels(&self, labels: &[u8], frames: usize, height: usize, width: usize) -> Vec<u8> {
        match self.cca {
            None => labels.to_vec(),
            Some(conn) => {
                let n = height * width;
                (0..frames).flat_map(|f| clean_frame(&LabelFrame::new(&labels[f * n..(f + 1) * n], height, width), conn)).collect()
            }
        }
    }

    /// Runs preprocessing and G on raw `[t, h, w]` frames.
    pub fn segment(&self, raw: &Tensor<f32>) -> Result<SegmentationOutput> {
        let x = preprocess(raw, &self.clahe)?;
        self.g.segment(&self.store, &x)
    }

    /// D on hard labels; indices are returned in physical units.
    pub fn quantify_labels(&self, labels: &[u8], frames: usize, height: usize, width: usize, spacing: f64) -> Result<(Vec<IndexVector>, Vec<f64>)> {
        let mut g = Graph::new();
        let x = g.input(mask_volume(labels, frames, height, width)?);
        let out = self.d.forward(&mut g, &self.store, x)?;
        let (reg, logit) = (g.value(out.indices), g.value(out.phase_logits));
        let mut rows = Vec::with_capacity(frames);
        let mut probs = Vec::with_capacity(frames);
        for f in 0..frames {
            let z: [f64; INDEX_COUNT] = std::array::from_fn(|i| reg.data()[f * INDEX_COUNT + i] as f64);
            let p = 1.0 / (1.0 + (-(logit.data()[f] as f64)).exp());
            rows.push(IndexVector { values: self.transform.inverse(&z, spacing), phase: u8::from(p >= 0.5) });
            probs.push(p);
        }
        Ok((rows, probs))
    }

    pub fn predict(&self, raw: &Tensor<f32>, spacing: f64) -> Result<Prediction> {
        let s = raw.shape().to_vec();
        let segmentation = self.segment(raw)?;
        let labels = self.clean_labels(&segmentation.labels, s[0], s[1], s[2]);
        let (indices, ed_probability) = self.quantify_labels(&labels, s[0], s[1], s[2], spacing)?;
        Ok(Prediction { segmentation, labels, indices, ed_probability })
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = self.store.to_named_f32();
        out.push((G_META.into(), self.g.config().to_meta()));
        out.push((D_META.into(), self.d.config().to_meta()));
        let st = &self.transform.stats;
        let norm: Vec<f32> = st.mean.iter().chain(&st.std).map(|&v| v as f32).collect();
        out.push((NORM_META.into(), Tensor::new(&[2, INDEX_COUNT], norm).expect("norm shape")));
        let sc = self.transform.scale;
        out.push((SCALE_META.into(), Tensor::new(&[2], vec![sc.height as f32, sc.width as f32]).expect("scale")));
        let c = &self.clahe;
        let clahe = vec![c.tiles[0] as f32, c.tiles[1] as f32, c.clip_limit as f32, c.bins as f32];
        out.push((CLAHE_META.into(), Tensor::new(&[4], clahe).expect("clahe")));
        let cca = match self.cca {
            None => 0.0,
            Some(Connectivity::Four) => 4.0,
            Some(Connectivity::Eight) => 8.0,
        };
        out.push((CCA_META.into(), Tensor::new(&[1], vec![cca]).expect("cca")));
        out
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        Ok(write_container(w, &self.to_tensors())?)
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Self::from_tensors(read_container(r)?)
    }

    pub fn from_tensors(tensors: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let get = |name: &str| -> Result<&Tensor<f32>> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CqError::invalid("checkpoint", format!("missing tensor {name}")))
        };
        let g_cfg = DrUnetConfig::from_meta(get(G_META)?)?;
        let d_cfg = StmtConfig::from_meta(get(D_META)?)?;
        let norm = get(NORM_META)?;
        if norm.shape() != [2, INDEX_COUNT] {
            return Err(CqError::invalid("checkpoint", format!("tensor {NORM_META} has shape {:?}", norm.shape())));
        }
        let stats = NormalizationStats {
            mean: std::array::from_fn(|i| norm.data()[i] as f64),
            std: std::array::from_fn(|i| norm.data()[INDEX_COUNT + i] as f64),
        };
        stats.validate()?;
        let sc = get(SCALE_META)?.data();
        let cl = get(CLAHE_META)?.data();
        if sc.len() != 2 || cl.len() != 4 {
            return Err(CqError::invalid("checkpoint", "malformed preprocessing metadata"));
        }
        let scale = ImageScale { height: sc[0] as usize, width: sc[1] as usize };
        let clahe = ClaheParams { tiles: [cl[0] as usize, cl[1] as usize], clip_limit: cl[2] as f64, bins: cl[3] as usize };
        let cca = match get(CCA_META)?.data().first().copied() {
            Some(v) if v == 4.0 => Some(Connectivity::Four),
            Some(v) if v == 8.0 => Some(Connectivity::Eight),
            _ => None,
        };
        let mut model = Self::init(&g_cfg, &d_cfg, TargetTransform { scale, stats }, clahe, cca, 0)?;
        if let Some((name, _)) = tensors
            .iter()
            .find(|(n, _)| !n.starts_with("meta.") && model.store.find(n).is_none())
        {
            return Err(CqError::invalid("checkpoint", format!("tensor {name} does not belong to the architecture")));
        }
        let params: Vec<_> = tensors.into_iter().filter(|(n, _)| !n.starts_with("meta.")).collect();
        model.store.load_named(&params)?;
        Ok(model)
    }
}
