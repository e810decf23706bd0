use cq_core::losses::{self, bce_value, mse_value, soft_dice_value, DiceVariant, LossWeights};
use cq_tensor::{Graph, Tensor};
use proptest::prelude::*;

const W: [f64; 3] = [0.2, 0.3, 0.5];

/// Three pixels, one per class, as `[1, 3, 1, 3]`.
fn perfect_toy() -> Tensor<f64> {
    Tensor::new(&[1, 3, 1, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()
}

/// Straight transcription of both Dice forms, independent of the graph code.
fn dice_oracle(p: &[f64], y: &[f64], k: usize, w: &[f64], canonical: bool) -> f64 {
    let inner = p.len() / k;
    let mut acc = 0.0;
    for c in 0..k {
        let (mut inter, mut sy, mut sp) = (0.0, 0.0, 0.0);
        for i in 0..inner {
            inter += y[c * inner + i] * p[c * inner + i];
            sy += y[c * inner + i];
            sp += p[c * inner + i];
        }
        let num = if canonical { 2.0 * inter } else { inter };
        acc += w[c] * (num + 1e-6) / (sy + sp + 1e-6);
    }
    if canonical {
        1.0 - acc
    } else {
        1.0 - acc / k as f64
    }
}

#[test]
fn verbatim_dice_of_perfect_prediction() {
    let y = perfect_toy();
    let v = soft_dice_value(&y, &y, &W, DiceVariant::Verbatim).unwrap();
    let oracle = dice_oracle(y.data(), y.data(), 3, &W, false);
    assert!((v - oracle).abs() < 1e-12);
    assert!((v - 0.8333).abs() < 1e-4, "{v}");
}

#[test]
fn canonical_dice_of_perfect_prediction_is_zero() {
    let y = perfect_toy();
    let v = soft_dice_value(&y, &y, &W, DiceVariant::Canonical).unwrap();
    assert!(v.abs() < 1e-5, "{v}");
}

#[test]
fn disjoint_prediction_gives_one() {
    let y = perfect_toy();
    // Cyclic shift of the classes: no overlap anywhere.
    let p = Tensor::new(&[1, 3, 1, 3], vec![0., 1., 0., 0., 0., 1., 1., 0., 0.]).unwrap();
    for variant in [DiceVariant::Verbatim, DiceVariant::Canonical] {
        let v = soft_dice_value(&p, &y, &W, variant).unwrap();
        assert!((v - 1.0).abs() < 1e-5, "{variant:?} {v}");
    }
}

#[test]
fn dice_rejects_bad_inputs() {
    let y = perfect_toy();
    let mut p = y.clone();
    p.data_mut()[0] = 1.5;
    assert!(soft_dice_value(&p, &y, &W, DiceVariant::Verbatim).is_err());
    let mut not_onehot = y.clone();
    not_onehot.data_mut()[1] = 1.0;
    assert!(soft_dice_value(&y, &not_onehot, &W, DiceVariant::Verbatim).is_err());
    let mut half = y.clone();
    half.data_mut()[0] = 0.5;
    assert!(soft_dice_value(&y, &half, &W, DiceVariant::Verbatim).is_err());
}

#[test]
fn graph_dice_matches_value_helper() {
    let y = perfect_toy();
    let p = Tensor::new(&[1, 3, 1, 3], vec![0.7, 0.2, 0.1, 0.2, 0.5, 0.3, 0.1, 0.3, 0.6]).unwrap();
    for (variant, canonical) in [(DiceVariant::Verbatim, false), (DiceVariant::Canonical, true)] {
        let mut g = Graph::new();
        let pv = g.input(p.clone());
        let l = losses::soft_dice(&mut g, pv, &y, &W, variant).unwrap();
        let expect = dice_oracle(p.data(), y.data(), 3, &W, canonical);
        assert!((g.value(l).item().unwrap() - expect).abs() < 1e-12);
    }
}

#[test]
fn bce_examples() {
    assert!((bce_value(&[0.5, 0.5, 0.5], &[1.0, 0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-9);
    assert!((bce_value(&[0.25], &[1.0]).unwrap() - 1.3863).abs() < 1e-4);
    let at_limits = bce_value(&[1.0, 0.0], &[1.0, 0.0]).unwrap();
    assert!(at_limits > 0.0 && at_limits < 1e-6, "{at_limits}");
    assert!(bce_value(&[0.5], &[0.5]).is_err());
    assert!(bce_value(&[0.5], &[2.0]).is_err());
}

#[test]
fn bce_gradient_vanishes_where_clamped() {
    let mut g = Graph::new();
    let p = g.input_with_grad(Tensor::new(&[2, 1], vec![0.0, 0.3]).unwrap());
    let l = losses::bce(&mut g, p, &Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap()).unwrap();
    let grad = g.backward(l).unwrap().wrt(p).unwrap().clone();
    assert_eq!(grad.data()[0], 0.0);
    assert!((grad.data()[1] - (-1.0f64 / 0.3 / 2.0)).abs() < 1e-12);
}

#[test]
fn mse_examples() {
    let t = |d: Vec<f64>| Tensor::new(&[1, d.len()], d).unwrap();
    assert_eq!(mse_value(&t(vec![1., 2.]), &t(vec![1., 2.])).unwrap(), 0.0);
    assert_eq!(mse_value(&t(vec![3., 4.]), &t(vec![1., 2.])).unwrap(), 4.0);
    assert_eq!(mse_value(&t(vec![1., 2.]), &t(vec![0., 0.])).unwrap(), 2.5);
    assert!(mse_value(&t(vec![1., 2.]), &t(vec![0., 0., 0.])).is_err());
}

#[test]
fn mse_divides_by_every_element() {
    let pred = Tensor::new(&[2, 11], (0..22).map(|i| i as f64).collect()).unwrap();
    let target = Tensor::zeros(&[2, 11]).unwrap();
    let expect = (0..22).map(|i| (i * i) as f64).sum::<f64>() / 22.0;
    assert!((mse_value(&pred, &target).unwrap() - expect).abs() < 1e-12);
}

fn scalar(g: &mut Graph<f64>, v: f64) -> cq_tensor::Var {
    g.input(Tensor::scalar(v))
}

#[test]
fn weighted_combinations() {
    let w = LossWeights::default();
    let mut g = Graph::new();
    let (m, b) = (scalar(&mut g, 1.0), scalar(&mut g, 0.5));
    let l = losses::multitask(&mut g, m, b, w.multistage).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 3.0);
    let l = losses::multitask(&mut g, m, b, [1.0, 0.0]).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 1.0);
    let (z1, z2) = (scalar(&mut g, 0.0), scalar(&mut g, 0.0));
    let l = losses::multitask(&mut g, z1, z2, w.multistage).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);

    let (d, m, b) = (scalar(&mut g, 0.1), scalar(&mut g, 0.2), scalar(&mut g, 0.3));
    let l = losses::end_to_end(&mut g, d, m, b, w.end_to_end).unwrap();
    assert!((g.value(l).item().unwrap() - 1.5).abs() < 1e-15);
    let z3 = scalar(&mut g, 0.0);
    let l = losses::end_to_end(&mut g, z1, z2, z3, w.end_to_end).unwrap();
    assert_eq!(g.value(l).item().unwrap(), 0.0);
}

#[test]
fn loss_weights_reject_negative() {
    let w = LossWeights { multistage: [1.0, -4.0], ..LossWeights::default() };
    assert!(w.validate().is_err());
    assert!(LossWeights::default().validate().is_ok());
}

/// Random one-hot `[1, 3, 1, n]` and a probability map in the same layout.
fn onehot_and_probs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2usize..12).prop_flat_map(|n| {
        (prop::collection::vec(0usize..3, n), prop::collection::vec(prop::collection::vec(0.01f64..1.0, 3), n))
    })
    .prop_map(|(labels, raw)| {
        let n = labels.len();
        let mut y = vec![0.0; 3 * n];
        let mut p = vec![0.0; 3 * n];
        for i in 0..n {
            y[labels[i] * n + i] = 1.0;
            let s: f64 = raw[i].iter().sum();
            for c in 0..3 {
                p[c * n + i] = raw[i][c] / s;
            }
        }
        (y, p)
    })
}

proptest! {
    #[test]
    fn dice_is_minimal_at_the_target((y, q) in onehot_and_probs(), a in 0.0f64..1.0) {
        let n = y.len() / 3;
        let yt = Tensor::new(&[1, 3, 1, n], y.clone()).unwrap();
        let mixed: Vec<f64> = y.iter().zip(&q).map(|(y, q)| (1.0 - a) * y + a * q).collect();
        let pt = Tensor::new(&[1, 3, 1, n], mixed).unwrap();
        for variant in [DiceVariant::Verbatim, DiceVariant::Canonical] {
            let best = soft_dice_value(&yt, &yt, &W, variant).unwrap();
            let other = soft_dice_value(&pt, &yt, &W, variant).unwrap();
            prop_assert!(other >= best - 1e-12, "{:?}: {} < {}", variant, other, best);
        }
    }

    #[test]
    fn bce_is_convex_in_the_prediction(p in 0.0f64..1.0, q in 0.0f64..1.0, y in 0u8..2) {
        let label = [y as f64];
        let mid = bce_value(&[(p + q) / 2.0], &label).unwrap();
        let avg = (bce_value(&[p], &label).unwrap() + bce_value(&[q], &label).unwrap()) / 2.0;
        prop_assert!(mid <= avg + 1e-12);
    }

    #[test]
    fn losses_ignore_sample_order(
        probs in prop::collection::vec(0.0f64..1.0, 4),
        labels in prop::collection::vec(0u8..2, 4),
        shift in 1usize..4,
    ) {
        let labels: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
        let rot = |v: &[f64]| { let mut v = v.to_vec(); v.rotate_left(shift); v };
        let a = bce_value(&probs, &labels).unwrap();
        let b = bce_value(&rot(&probs), &rot(&labels)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);

        let pred = Tensor::new(&[4, 1], probs.clone()).unwrap();
        let tgt = Tensor::new(&[4, 1], labels.clone()).unwrap();
        let a = mse_value(&pred, &tgt).unwrap();
        let b = mse_value(&Tensor::new(&[4, 1], rot(&probs)).unwrap(), &Tensor::new(&[4, 1], rot(&labels)).unwrap()).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}
