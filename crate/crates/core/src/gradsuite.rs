//! Finite-difference gradient checks in f64 for every differentiable op,
//! each loss, and the composed objectives on a reduced pipeline.

use cq_tensor::gradcheck::{GradCheck, GradCheckReport};
use cq_tensor::{
    BatchNormMode, BatchNormState, ConvSpec, Graph, ParamId, ParamStore, Padding, PoolSpec, Tensor, Var, BN_EPS,
    BN_MOMENTUM,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{self, DiceVariant, LossWeights};
use crate::networks::{DrUnet, DrUnetConfig, Stmt, StmtConfig, D_PREFIX, G_PREFIX};

pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: &'static str,
    pub max_relative_error: f64,
    pub coordinates: usize,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("valid shape")
}

fn signed(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, seed, -1.0, 1.0)
}

/// `sum(y * r)` with a fixed random `r`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> cq_tensor::Result<Var> {
    let r = g.input(signed(g.value(y).shape(), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn onehot(shape: &[usize], seed: u64) -> Tensor<f64> {
    // Class axis is 1; every other position gets exactly one hot class.
    let (n, k, inner) = (shape[0], shape[1], shape[2..].iter().product::<usize>());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape).expect("valid shape");
    for b in 0..n {
        for i in 0..inner {
            let c = rng.random_range(0..k);
            t.data_mut()[(b * k + c) * inner + i] = 1.0;
        }
    }
    t
}

fn row(name: &'static str, r: GradCheckReport) -> GradRow {
    GradRow { name, max_relative_error: r.max_relative_error, coordinates: r.coordinates }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> cq_tensor::Result<Var>>;

fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let conv2 = ConvSpec::new(&[3, 3], 2, 3).with_dilation(&[2, 2]);
    let t_conv = ConvSpec::new(&[3, 1, 1], 2, 3);
    let s_conv = ConvSpec::new(&[1, 3, 3], 3, 2);
    let rm = signed(&[3], 40);
    let rv = random(&[3], 41, 0.5, 1.5);
    let (rm2, rv2) = (rm.clone(), rv.clone());
    vec![
        (
            "conv2d",
            vec![signed(&[2, 2, 6, 6], 1), signed(&[3, 2, 3, 3], 2), signed(&[3], 3)],
            Box::new(move |g, v| {
                let y = g.conv(v[0], v[1], Some(v[2]), &conv2)?;
                project(g, y, 4)
            }),
        ),
        (
            "conv3d",
            vec![signed(&[1, 2, 4, 5, 5], 5), signed(&[3, 2, 3, 1, 1], 6), signed(&[2, 3, 1, 3, 3], 7)],
            Box::new(move |g, v| {
                let a = g.conv(v[0], v[1], None, &t_conv)?;
                let b = g.conv(a, v[2], None, &s_conv)?;
                project(g, b, 8)
            }),
        ),
        (
            "maxpool",
            vec![signed(&[1, 2, 3, 7, 7], 9)],
            Box::new(|g, v| {
                let y = g.max_pool(v[0], &PoolSpec::new(&[1, 3, 3]).with_padding(Padding::Same))?;
                project(g, y, 10)
            }),
        ),
        (
            "relu",
            vec![signed(&[3, 4], 11)],
            Box::new(|g, v| {
                let y = g.relu(v[0]);
                project(g, y, 12)
            }),
        ),
        (
            "sigmoid",
            vec![signed(&[3, 4], 13)],
            Box::new(|g, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, 14)
            }),
        ),
        (
            "softmax",
            vec![signed(&[2, 3, 4, 2], 15)],
            Box::new(|g, v| {
                let y = g.softmax(v[0])?;
                project(g, y, 16)
            }),
        ),
        (
            "batchnorm_train",
            vec![signed(&[2, 3, 4, 3], 17), signed(&[3], 18), signed(&[3], 19)],
            Box::new(move |g, v| {
                let st = BatchNormState { running_mean: &rm, running_var: &rv, ids: None, momentum: BN_MOMENTUM, eps: BN_EPS };
                let y = g.batch_norm(v[0], v[1], v[2], st, BatchNormMode::Train)?;
                project(g, y, 20)
            }),
        ),
        (
            "batchnorm_infer",
            vec![signed(&[2, 3, 4, 3], 21), signed(&[3], 22), signed(&[3], 23)],
            Box::new(move |g, v| {
                let st = BatchNormState { running_mean: &rm2, running_var: &rv2, ids: None, momentum: BN_MOMENTUM, eps: BN_EPS };
                let y = g.batch_norm(v[0], v[1], v[2], st, BatchNormMode::Infer)?;
                project(g, y, 24)
            }),
        ),
        (
            "dense",
            vec![signed(&[4, 5], 25), signed(&[3, 5], 26), signed(&[3], 27)],
            Box::new(|g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                project(g, y, 28)
            }),
        ),
        (
            "add_mul_scale",
            vec![signed(&[2, 3], 29), signed(&[2, 3], 30)],
            Box::new(|g, v| {
                let m = g.mul(v[0], v[1])?;
                let a = g.add(m, v[0])?;
                let s = g.scale(a, 1.5);
                let w = g.weighted_sum(&[(s, 0.5), (v[1], -2.0)])?;
                project(g, w, 31)
            }),
        ),
        (
            "concat_select",
            vec![signed(&[2, 3, 2, 2], 32), signed(&[2, 1, 2, 2], 33)],
            Box::new(|g, v| {
                let c = g.concat_channels(&[v[0], v[1]])?;
                let s = g.select_channels(c, &[3, 0])?;
                project(g, s, 34)
            }),
        ),
        (
            "upsample",
            vec![signed(&[1, 2, 3, 2], 35)],
            Box::new(|g, v| {
                let y = g.upsample_nearest(v[0], &[2, 2])?;
                project(g, y, 36)
            }),
        ),
        (
            "frames_to_volume",
            vec![signed(&[3, 2, 2, 2], 37)],
            Box::new(|g, v| {
                let y = g.frames_to_volume(v[0])?;
                project(g, y, 38)
            }),
        ),
        (
            "frame_pool",
            vec![signed(&[2, 3, 4, 2, 2], 39)],
            Box::new(|g, v| {
                let y = g.frame_pool(v[0])?;
                project(g, y, 42)
            }),
        ),
    ]
}

fn loss_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let w = LossWeights::default().class_weights;
    let (w1, w2) = (w.clone(), w);
    let target = onehot(&[2, 3, 4, 4], 50);
    let target2 = target.clone();
    let labels = Tensor::new(&[6, 1], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).expect("valid shape");
    let reg_target = signed(&[3, 11], 52);
    vec![
        (
            "dice_verbatim",
            vec![signed(&[2, 3, 4, 4], 53)],
            Box::new(move |g, v| {
                let p = g.softmax(v[0])?;
                losses::soft_dice(g, p, &target, &w1, DiceVariant::Verbatim).map_err(into_tensor_err)
            }),
        ),
        (
            "dice_canonical",
            vec![signed(&[2, 3, 4, 4], 54)],
            Box::new(move |g, v| {
                let p = g.softmax(v[0])?;
                losses::soft_dice(g, p, &target2, &w2, DiceVariant::Canonical).map_err(into_tensor_err)
            }),
        ),
        (
            "bce",
            vec![signed(&[6, 1], 55)],
            Box::new(move |g, v| {
                let p = g.sigmoid(v[0]);
                losses::bce(g, p, &labels).map_err(into_tensor_err)
            }),
        ),
        (
            "mse",
            vec![signed(&[3, 11], 56)],
            Box::new(move |g, v| losses::mse(g, v[0], &reg_target).map_err(into_tensor_err)),
        ),
    ]
}

fn into_tensor_err(e: crate::CqError) -> cq_tensor::TensorError {
    match e {
        crate::CqError::Tensor(t) => t,
        other => cq_tensor::TensorError::InvalidArgument { op: "loss", detail: other.to_string() },
    }
}

/// Reduced pipeline: G on two 16×16 frames, D on its foreground channels.
pub struct ReducedPipeline {
    pub store: ParamStore<f64>,
    pub g: DrUnet,
    pub d: Stmt,
    pub input: Tensor<f64>,
    pub onehot: Tensor<f64>,
    pub targets: Tensor<f64>,
    pub phases: Tensor<f64>,
    pub weights: LossWeights,
}

impl ReducedPipeline {
    pub fn new(seed: u64) -> Result<Self> {
        let (t, size) = (2, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g_cfg = DrUnetConfig { base_filters: 4, depth: 2, ..DrUnetConfig::default() };
        let g = DrUnet::build(&g_cfg, G_PREFIX, &mut store, &mut rng)?;
        let d_cfg = StmtConfig { widths: vec![4, 4, 4], head_width: 8, ..StmtConfig::default() };
        let d = Stmt::build(&d_cfg, D_PREFIX, &mut store, &mut rng)?;
        // Zero-initialized biases put dead-region activations exactly on the
        // ReLU kink, where a central difference is not a derivative.
        let biases: Vec<ParamId> = store.iter().filter(|(_, e)| e.name.ends_with(".b")).map(|(id, _)| id).collect();
        for id in biases {
            for v in store.get_mut(id).data_mut() {
                *v = rng.random_range(-0.1..0.1);
            }
        }
        Ok(Self {
            store,
            g,
            d,
            input: signed(&[t, 1, size, size], seed + 1),
            onehot: onehot(&[t, 3, size, size], seed + 2),
            targets: signed(&[t, 11], seed + 3),
            phases: Tensor::new(&[t, 1], vec![1.0, 0.0])?,
            weights: LossWeights::default(),
        })
    }

    fn segmentation(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<(Var, Var)> {
        let x = g.input(self.input.clone());
        let p = self.g.forward(g, store, x, BatchNormMode::Train)?;
        let dice = losses::soft_dice(g, p, &self.onehot, &self.weights.class_weights, self.weights.dice_variant)?;
        Ok((p, dice))
    }

    fn multitask(&self, g: &mut Graph<f64>, store: &ParamStore<f64>, x: Var) -> Result<(Var, Var)> {
        let out = self.d.forward(g, store, x)?;
        let mse = losses::mse(g, out.indices, &self.targets)?;
        let p = g.sigmoid(out.phase_logits);
        let bce = losses::bce(g, p, &self.phases)?;
        Ok((mse, bce))
    }

    /// Weighted Dice on G.
    pub fn seg_loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<Var> {
        Ok(self.segmentation(g, store)?.1)
    }

    /// `λ1·MSE + λ2·BCE` on D fed with fixed soft masks.
    pub fn multitask_loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let s = self.input.shape();
        let masks = random(&[1, 2, s[0], s[2], s[3]], 99, 0.0, 1.0);
        let x = g.input(masks);
        let (mse, bce) = self.multitask(g, store, x)?;
        losses::multitask(g, mse, bce, self.weights.multistage)
    }

    /// `λ1·Dice + λ2·MSE + λ3·BCE` through G's soft foreground channels.
    pub fn joint_loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let (p, dice) = self.segmentation(g, store)?;
        let fg = g.select_channels(p, &[1, 2])?;
        let vol = g.frames_to_volume(fg)?;
        let (mse, bce) = self.multitask(g, store, vol)?;
        losses::end_to_end(g, dice, mse, bce, self.weights.end_to_end)
    }

    pub fn ids(&self, prefix: &str) -> Vec<ParamId> {
        self.store.trainable_with_prefix(prefix)
    }
}

/// Runs every check; rows are in a fixed order.
pub fn run(checker: &GradCheck) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for (name, inputs, build) in op_cases().into_iter().chain(loss_cases()) {
        rows.push(row(name, checker.inputs(&inputs, build)?));
    }
    let p = ReducedPipeline::new(7)?;
    let wrap = |f: fn(&ReducedPipeline, &mut Graph<f64>, &ParamStore<f64>) -> Result<Var>| {
        let p = &p;
        move |g: &mut Graph<f64>, s: &ParamStore<f64>| f(p, g, s).map_err(into_tensor_err)
    };
    let g_ids = p.ids(G_PREFIX);
    let d_ids = p.ids(D_PREFIX);
    let all: Vec<ParamId> = g_ids.iter().chain(&d_ids).copied().collect();
    rows.push(row("network_seg_loss", checker.params(&p.store, &g_ids, wrap(ReducedPipeline::seg_loss))?));
    rows.push(row("network_multitask_loss", checker.params(&p.store, &d_ids, wrap(ReducedPipeline::multitask_loss))?));
    rows.push(row("network_joint_loss", checker.params(&p.store, &all, wrap(ReducedPipeline::joint_loss))?));
    Ok(rows)
}
