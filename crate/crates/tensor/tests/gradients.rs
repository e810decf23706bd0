//! Finite-difference checks for every differentiable operation, in f64.

use cq_tensor::gradcheck::GradCheck;
use cq_tensor::{BatchNormMode, BatchNormState, ConvSpec, Graph, Padding, PoolSpec, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// `sum(y * r)` for a fixed random `r`, so every output coordinate matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = g.input(random(g.value(y).shape(), seed));
    let p = g.mul(y, r)?;
    Ok(g.sum(p))
}

fn check(name: &str, inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let report = GradCheck::default().inputs(inputs, build).unwrap();
    assert!(
        report.max_relative_error < TOL,
        "{name}: max relative error {} over {} coordinates",
        report.max_relative_error,
        report.coordinates
    );
}

#[test]
fn conv_2d_dilated_with_bias() {
    let spec = ConvSpec::new(&[3, 3], 2, 3).with_dilation(&[2, 1]);
    check("conv2d", &[random(&[2, 2, 6, 5], 1), random(&[3, 2, 3, 3], 2), random(&[3], 3)], |g, v| {
        let y = g.conv(v[0], v[1], Some(v[2]), &spec)?;
        project(g, y, 4)
    });
}

#[test]
fn conv_3d_factorized_and_strided() {
    let temporal = ConvSpec::new(&[3, 1, 1], 2, 2);
    let spatial = ConvSpec::new(&[1, 3, 3], 2, 2).with_stride(&[1, 2, 2]).with_padding(Padding::Valid);
    check("conv3d", &[random(&[1, 2, 4, 5, 5], 5), random(&[2, 2, 3, 1, 1], 6), random(&[2, 2, 1, 3, 3], 7)], |g, v| {
        let a = g.conv(v[0], v[1], None, &temporal)?;
        let b = g.conv(a, v[2], None, &spatial)?;
        project(g, b, 8)
    });
}

#[test]
fn maxpool_same_padding() {
    check("maxpool", &[random(&[1, 2, 3, 7, 7], 9)], |g, v| {
        let y = g.max_pool(v[0], &PoolSpec::new(&[1, 3, 3]).with_padding(Padding::Same))?;
        project(g, y, 10)
    });
}

#[test]
fn activations() {
    check("relu", &[random(&[3, 4], 11)], |g, v| {
        let y = g.relu(v[0]);
        project(g, y, 12)
    });
    check("sigmoid", &[random(&[3, 4], 13)], |g, v| {
        let y = g.sigmoid(v[0]);
        project(g, y, 14)
    });
    check("softmax", &[random(&[2, 3, 4, 2], 15)], |g, v| {
        let y = g.softmax(v[0])?;
        project(g, y, 16)
    });
}

#[test]
fn batchnorm_both_modes() {
    for mode in [BatchNormMode::Train, BatchNormMode::Infer] {
        let rm = random(&[3], 17);
        let rv = random(&[3], 18).map(|v| v.abs() + 0.5);
        check("batchnorm", &[random(&[2, 3, 4, 3], 19), random(&[3], 20), random(&[3], 21)], |g, v| {
            let state = BatchNormState { running_mean: &rm, running_var: &rv, ids: None, momentum: 0.99, eps: 1e-5 };
            let y = g.batch_norm(v[0], v[1], v[2], state, mode)?;
            project(g, y, 22)
        });
    }
}

#[test]
fn dense_and_layout_ops() {
    check("dense", &[random(&[4, 5], 23), random(&[3, 5], 24), random(&[3], 25)], |g, v| {
        let y = g.dense(v[0], v[1], v[2])?;
        project(g, y, 26)
    });
    check("layout", &[random(&[3, 4, 2, 2], 27), random(&[3, 1, 2, 2], 28)], |g, v| {
        let cat = g.concat_channels(&[v[0], v[1]])?;
        let sel = g.select_channels(cat, &[4, 1])?;
        let up = g.upsample_nearest(sel, &[2, 2])?;
        let vol = g.frames_to_volume(up)?;
        let fp = g.frame_pool(vol)?;
        project(g, fp, 29)
    });
    check("arith", &[random(&[2, 3], 30), random(&[2, 3], 31)], |g, v| {
        let m = g.mul(v[0], v[1])?;
        let a = g.add(m, v[0])?;
        let w = g.weighted_sum(&[(a, 0.5), (v[1], -2.0)])?;
        project(g, w, 32)
    });
}
