//! Multi-stage and end-to-end training loops.

use std::time::Instant;

use cq_tensor::{BatchNormMode, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::{f32_exact, mask_volume, Model};
use crate::error::{CqError, Result};
use crate::geometry::{quantify_sequence, Connectivity, ImageScale, IndexVector, MaskSequence, TargetTransform, INDEX_COUNT};
use crate::imaging::dataset::Subject;
use crate::imaging::{preprocess, AugmentConfig, ClaheParams, SpatialTransform};
use crate::losses::{self, LossWeights};
use crate::networks::{DrUnetConfig, SpatialMode, StmtConfig, D_PREFIX, G_PREFIX};
use crate::numfmt::sig6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Multistage,
    End2end,
}

impl std::str::FromStr for Strategy {
    type Err = CqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multistage" => Ok(Self::Multistage),
            "end2end" => Ok(Self::End2end),
            other => Err(CqError::config("strategy", format!("{other:?} is not multistage or end2end"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Segmentation epochs of the multi-stage strategy.
    pub epochs_g: usize,
    /// Multi-task epochs of the multi-stage strategy.
    pub epochs_d: usize,
    /// Epochs of the end-to-end strategy.
    pub epochs_joint: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub weight_decay_g: f64,
    pub g: DrUnetConfig,
    pub d: StmtConfig,
    pub loss: LossWeights,
    pub clahe: ClaheParams,
    pub augmentation: bool,
    pub augment: AugmentConfig,
    /// Keep only the largest cavity and myocardium components of G's masks.
    pub cca: bool,
    pub connectivity: Connectivity,
    /// Write elapsed time into training logs; off keeps logs reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Multistage,
            epochs_g: 300,
            epochs_d: 300,
            epochs_joint: 300,
            lr_g: 1e-4,
            lr_d: 0.004,
            weight_decay_g: 0.0,
            g: DrUnetConfig::default(),
            d: StmtConfig::default(),
            loss: LossWeights::default(),
            clahe: ClaheParams::default(),
            augmentation: true,
            augment: AugmentConfig::default(),
            cca: true,
            connectivity: Connectivity::Eight,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.g.validate()?;
        self.d.validate()?;
        self.loss.validate()?;
        if self.loss.class_weights.len() != self.g.classes {
            return Err(CqError::config(
                "class_weights",
                format!("{} weights for {} classes", self.loss.class_weights.len(), self.g.classes),
            ));
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(CqError::config(name, format!("learning rate {lr} must be positive")));
            }
        }
        if !(self.weight_decay_g >= 0.0) {
            return Err(CqError::config("weight_decay_g", "must be non-negative"));
        }
        if self.augmentation && self.augment.expansion == 0 {
            return Err(CqError::config("expansion", "must be at least 1"));
        }
        if !(self.augment.max_rotation_deg >= 0.0 && self.augment.elastic_sigma > 0.0 && self.augment.elastic_alpha >= 0.0) {
            return Err(CqError::config("augment", "rotation range and elastic alpha must be non-negative, sigma positive"));
        }
        Ok(())
    }

    fn cca(&self) -> Option<Connectivity> {
        self.cca.then_some(self.connectivity)
    }
}

/// Per-epoch means over the training samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub seg_loss: f64,
    pub mse_loss: f64,
    pub bce_loss: f64,
    pub total_loss: f64,
    pub wall_seconds: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,seg_loss,mse_loss,bce_loss,total_loss,wall_seconds\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch,
            sig6(r.seg_loss),
            sig6(r.mse_loss),
            sig6(r.bce_loss),
            sig6(r.total_loss),
            sig6(r.wall_seconds)
        ));
    }
    s
}

/// One training sequence with every tensor a step needs.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub spacing: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Preprocessed frames `[t, h, w]`.
    pub input: Tensor<f32>,
    pub labels: Vec<u8>,
    pub indices: Vec<IndexVector>,
}

/// Applies preprocessing and, when enabled, expands each subject with
/// augmented copies whose targets are re-measured by the geometric oracle.
pub fn prepare_samples(subjects: &[Subject], cfg: &TrainConfig, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let copies = if cfg.augmentation { cfg.augment.expansion } else { 1 };
    let mut out = Vec::with_capacity(subjects.len() * copies);
    for s in subjects {
        let m = &s.masks;
        let make = |images: &Tensor<f32>, labels: Vec<u8>, indices: Vec<IndexVector>, tag: usize| -> Result<Sample> {
            Ok(Sample {
                id: if tag == 0 { s.id.clone() } else { format!("{}#aug{tag}", s.id) },
                spacing: m.spacing,
                frames: m.frames,
                height: m.height,
                width: m.width,
                input: preprocess(images, &cfg.clahe)?,
                labels,
                indices,
            })
        };
        out.push(make(&s.images, m.labels.clone(), s.indices.clone(), 0)?);
        for tag in 1..copies {
            // Strong deformations occasionally break the ring; redraw a few times.
            for _ in 0..8 {
                let tf = SpatialTransform::sample(&cfg.augment, m.height, m.width, &mut rng);
                let labels = tf.apply_mask(&m.labels, m.height, m.width);
                let masks = MaskSequence::new(labels, m.frames, m.height, m.width, m.spacing)?;
                if let Ok(indices) = quantify_sequence(&masks, Connectivity::Eight) {
                    let images = Tensor::new(s.images.shape(), tf.apply_image(s.images.data(), m.height, m.width))?;
                    out.push(make(&images, masks.labels, indices, tag)?);
                    break;
                }
            }
        }
    }
    Ok(out)
}

/// Tensors consumed by the training graphs.
struct StepData {
    g_input: Tensor<f32>,
    onehot: Tensor<f32>,
    targets: Tensor<f32>,
    phases: Tensor<f32>,
}

fn onehot(labels: &[u8], frames: usize, height: usize, width: usize, classes: usize, mode: SpatialMode) -> Result<Tensor<f32>> {
    let n = height * width;
    let mut data = vec![0.0f32; classes * labels.len()];
    for (i, &l) in labels.iter().enumerate() {
        let (f, p) = (i / n, i % n);
        let idx = match mode {
            SpatialMode::TwoD => (f * classes + l as usize) * n + p,
            SpatialMode::ThreeD => (l as usize * frames + f) * n + p,
        };
        data[idx] = 1.0;
    }
    let shape = match mode {
        SpatialMode::TwoD => vec![frames, classes, height, width],
        SpatialMode::ThreeD => vec![1, classes, frames, height, width],
    };
    Ok(Tensor::new(&shape, data)?)
}

fn step_data(model: &Model, s: &Sample) -> Result<StepData> {
    let cfg = model.g.config();
    let mut targets = Vec::with_capacity(s.frames * INDEX_COUNT);
    for iv in &s.indices {
        targets.extend(model.transform.forward(&iv.values, s.spacing).iter().map(|&v| v as f32));
    }
    Ok(StepData {
        g_input: model.g.input_tensor(&s.input)?,
        onehot: onehot(&s.labels, s.frames, s.height, s.width, cfg.classes, cfg.mode)?,
        targets: Tensor::new(&[s.frames, INDEX_COUNT], targets)?,
        phases: Tensor::new(&[s.frames, 1], s.indices.iter().map(|iv| iv.phase as f32).collect())?,
    })
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Multi-stage: segmentation stage. End-to-end: the joint log.
    pub log_primary: Vec<LogRow>,
    /// Multi-stage: multi-task stage. Empty for end-to-end.
    pub log_secondary: Vec<LogRow>,
}

fn check_finite(epoch: usize, loss: &'static str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CqError::Diverged { epoch, loss })
    }
}

struct EpochClock {
    start: Instant,
    enabled: bool,
}

impl EpochClock {
    fn seconds(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

/// Fits the target transform on the training samples and initializes both networks.
pub fn init_model(samples: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<Model> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| CqError::degenerate("train", "no training samples"))?;
    cfg.g.check_extent(first.height, first.width)?;
    if let Some(s) = samples.iter().find(|s| (s.frames, s.height, s.width) != (first.frames, first.height, first.width)) {
        return Err(CqError::invalid("train", format!("sample {} differs in size from {}", s.id, first.id)));
    }
    let scale = ImageScale { height: first.height, width: first.width };
    let rows: Vec<_> = samples.iter().flat_map(|s| s.indices.iter().map(move |iv| (iv.values, s.spacing))).collect();
    let mut transform = TargetTransform::fit(scale, &rows)?;
    transform.stats = f32_exact(&transform.stats);
    Model::init(&cfg.g, &cfg.d, transform, cfg.clahe.clone(), cfg.cca(), seed)
}

fn shuffler(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    rng
}

/// Segmentation forward pass and Dice loss.
fn g_loss(model: &Model, g: &mut Graph<f32>, data: &StepData, cfg: &TrainConfig) -> Result<(Var, Var)> {
    let x = g.input(data.g_input.clone());
    let probs = model.g.forward(g, &model.store, x, BatchNormMode::Train)?;
    let dice = losses::soft_dice(g, probs, &data.onehot, &cfg.loss.class_weights, cfg.loss.dice_variant)?;
    Ok((probs, dice))
}

/// Multi-task forward pass from a `[1, 2, t, h, w]` input: (mse, bce).
fn d_loss(model: &Model, g: &mut Graph<f32>, x: Var, data: &StepData) -> Result<(Var, Var)> {
    let out = model.d.forward(g, &model.store, x)?;
    let mse = losses::mse(g, out.indices, &data.targets)?;
    let p = g.sigmoid(out.phase_logits);
    let bce = losses::bce(g, p, &data.phases)?;
    Ok((mse, bce))
}

/// Stage 1 alone: trains G on the Dice loss for `epochs` epochs.
pub fn train_segmentation(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, epochs: usize, seed: u64) -> Result<Vec<LogRow>> {
    let data: Vec<StepData> = samples.iter().map(|s| step_data(model, s)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&model.store, model.store.trainable_with_prefix(G_PREFIX), cfg.lr_g, cfg.weight_decay_g);
    let mut rng = shuffler(seed);
    let clock = EpochClock { start: Instant::now(), enabled: cfg.record_wall_time };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let mut g = Graph::new();
            let (_, dice) = g_loss(model, &mut g, &data[i], cfg)?;
            let v = g.value(dice).item()? as f64;
            check_finite(epoch, "seg_loss", v)?;
            let grads = g.backward(dice)?.for_params(&model.store);
            adam.step(&mut model.store, &grads)?;
            model.store.apply_stat_updates(g.stat_updates());
            total += v;
        }
        let seg = total / data.len() as f64;
        log.push(LogRow { epoch, seg_loss: seg, mse_loss: 0.0, bce_loss: 0.0, total_loss: seg, wall_seconds: clock.seconds() });
    }
    Ok(log)
}

/// Stage 2 alone: G frozen, D trained on G's hard masks with `λ1·MSE + λ2·BCE`.
pub fn train_multitask(model: &mut Model, samples: &[Sample], cfg: &TrainConfig, epochs: usize, seed: u64) -> Result<Vec<LogRow>> {
    let mut inputs = Vec::with_capacity(samples.len());
    for s in samples {
        let seg = model.g.segment(&model.store, &s.input)?;
        let labels = model.clean_labels(&seg.labels, s.frames, s.height, s.width);
        inputs.push((mask_volume(&labels, s.frames, s.height, s.width)?, step_data(model, s)?));
    }
    let mut adam = Adam::new(&model.store, model.store.trainable_with_prefix(D_PREFIX), cfg.lr_d, cfg.d.weight_decay);
    let mut rng = shuffler(seed);
    rng.set_stream(5);
    let clock = EpochClock { start: Instant::now(), enabled: cfg.record_wall_time };
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut sm, mut sb, mut st) = (0.0, 0.0, 0.0);
        for &i in &order {
            let (volume, data) = &inputs[i];
            let mut g = Graph::new();
            let x = g.input(volume.clone());
            let (mse, bce) = d_loss(model, &mut g, x, data)?;
            let total = losses::multitask(&mut g, mse, bce, cfg.loss.multistage)?;
            let v = g.value(total).item()? as f64;
            check_finite(epoch, "total_loss", v)?;
            let grads = g.backward(total)?.for_params(&model.store);
            adam.step(&mut model.store, &grads)?;
            sm += g.value(mse).item()? as f64;
            sb += g.value(bce).item()? as f64;
            st += v;
        }
        let n = inputs.len() as f64;
        log.push(LogRow { epoch, seg_loss: 0.0, mse_loss: sm / n, bce_loss: sb / n, total_loss: st / n, wall_seconds: clock.seconds() });
    }
    Ok(log)
}

pub fn train_multistage(samples: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut model = init_model(samples, cfg, seed)?;
    let log_primary = train_segmentation(&mut model, samples, cfg, cfg.epochs_g, seed)?;
    let log_secondary = train_multitask(&mut model, samples, cfg, cfg.epochs_d, seed)?;
    Ok(TrainOutcome { model, log_primary, log_secondary })
}

/// Gradients of one end-to-end step with respect to every store entry.
pub fn end_to_end_gradients(model: &Model, sample: &Sample, cfg: &TrainConfig) -> Result<(Vec<Tensor<f32>>, [f64; 4])> {
    let data = step_data(model, sample)?;
    let mut g = Graph::new();
    let (values, total) = joint_graph(model, &mut g, &data, cfg)?;
    Ok((g.backward(total)?.for_params(&model.store), values))
}

/// Builds the joint objective; returns (dice, mse, bce, total) values and the total node.
fn joint_graph(model: &Model, g: &mut Graph<f32>, data: &StepData, cfg: &TrainConfig) -> Result<([f64; 4], Var)> {
    let (probs, dice) = g_loss(model, g, data, cfg)?;
    let fg = g.select_channels(probs, &[1, 2])?;
    let volume = match model.g.config().mode {
        SpatialMode::TwoD => g.frames_to_volume(fg)?,
        SpatialMode::ThreeD => fg,
    };
    let (mse, bce) = d_loss(model, g, volume, data)?;
    let total = losses::end_to_end(g, dice, mse, bce, cfg.loss.end_to_end)?;
    let vals = [dice, mse, bce, total].map(|v| g.value(v).item().map(|x| x as f64).unwrap_or(f64::NAN));
    Ok((vals, total))
}

/// Joint training of G and D on `λ1·Dice + λ2·MSE + λ3·BCE`; D consumes G's
/// soft foreground probabilities so gradients reach G.
pub fn train_end_to_end(samples: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    let mut model = init_model(samples, cfg, seed)?;
    let data: Vec<StepData> = samples.iter().map(|s| step_data(&model, s)).collect::<Result<_>>()?;
    let mut adam_g = Adam::new(&model.store, model.store.trainable_with_prefix(G_PREFIX), cfg.lr_g, cfg.weight_decay_g);
    let mut adam_d = Adam::new(&model.store, model.store.trainable_with_prefix(D_PREFIX), cfg.lr_d, cfg.d.weight_decay);
    let mut rng = shuffler(seed);
    let clock = EpochClock { start: Instant::now(), enabled: cfg.record_wall_time };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs_joint);
    for epoch in 1..=cfg.epochs_joint {
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for &i in &order {
            let mut g = Graph::new();
            let (vals, total) = joint_graph(&model, &mut g, &data[i], cfg)?;
            check_finite(epoch, "total_loss", vals[3])?;
            let grads = g.backward(total)?.for_params(&model.store);
            adam_g.step(&mut model.store, &grads)?;
            adam_d.step(&mut model.store, &grads)?;
            model.store.apply_stat_updates(g.stat_updates());
            for k in 0..4 {
                sums[k] += vals[k];
            }
        }
        let n = data.len() as f64;
        log.push(LogRow {
            epoch,
            seg_loss: sums[0] / n,
            mse_loss: sums[1] / n,
            bce_loss: sums[2] / n,
            total_loss: sums[3] / n,
            wall_seconds: clock.seconds(),
        });
    }
    Ok(TrainOutcome { model, log_primary: log, log_secondary: Vec::new() })
}

pub fn train(samples: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    match cfg.strategy {
        Strategy::Multistage => train_multistage(samples, cfg, seed),
        Strategy::End2end => train_end_to_end(samples, cfg, seed),
    }
}
