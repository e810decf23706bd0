use cq_core::geometry::IndexVector;
use cq_core::metrics::*;
use cq_core::CqError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

/// Textbook two-pass Pearson correlation.
fn pcc_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>().sqrt();
    let sy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>().sqrt();
    cov / (sx * sy)
}

fn dice_oracle(a: &[u8], b: &[u8], label: u8) -> f64 {
    let ca = a.iter().filter(|&&v| v == label).count();
    let cb = b.iter().filter(|&&v| v == label).count();
    let both = a.iter().zip(b).filter(|(x, y)| **x == label && **y == label).count();
    if ca + cb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (ca + cb) as f64
    }
}

/// All-pairs Hausdorff distance between pixel centres.
fn hausdorff_oracle(a: &[u8], b: &[u8], w: usize, label: u8, spacing: f64) -> Option<f64> {
    let pts = |m: &[u8]| -> Vec<(f64, f64)> {
        m.iter().enumerate().filter(|(_, &v)| v == label).map(|(i, _)| ((i % w) as f64, (i / w) as f64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    if pa.is_empty() && pb.is_empty() {
        return Some(0.0);
    }
    if pa.is_empty() || pb.is_empty() {
        return None;
    }
    let directed = |p: &[(f64, f64)], q: &[(f64, f64)]| {
        p.iter()
            .map(|&(x, y)| q.iter().map(|&(u, v)| (x - u).hypot(y - v)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    Some(directed(&pa, &pb).max(directed(&pb, &pa)) * spacing)
}

#[test]
fn mae_and_pcc_examples() {
    assert_eq!(mae(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    assert!(close(pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 1.0, 1e-12));
    assert!(close(mae(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 4.0 / 3.0, 1e-12));
    assert!(close(pcc(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), -1.0, 1e-12));
    let (p, t) = ([1.0, 3.0, 4.0], [1.0, 2.0, 4.0]);
    assert!(close(mae(&p, &t).unwrap(), 1.0 / 3.0, 1e-12));
    let oracle = pcc_oracle(&p, &t);
    assert!(close(oracle, 13.0 / 14.0, 1e-15));
    assert!(close(pcc(&p, &t).unwrap(), oracle, 1e-12));
}

#[test]
fn mae_and_pcc_errors() {
    assert!(mae(&[1.0], &[1.0, 2.0]).is_err());
    assert!(matches!(pcc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(CqError::Degenerate { .. })));
    assert!(pcc(&[1.0], &[2.0]).is_err());
}

#[test]
fn error_rate_examples() {
    assert_eq!(error_rate(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 0.0);
    assert_eq!(error_rate(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap(), 25.0);
    assert_eq!(error_rate(&[1, 0, 0, 1], &[0, 1, 1, 0]).unwrap(), 100.0);
}

#[test]
fn dice_and_hausdorff_examples() {
    let mut a = vec![0u8; 25];
    let mut b = vec![0u8; 25];
    a[0] = 1;
    b[4 * 5 + 3] = 1; // (x 3, y 4)
    assert_eq!(hausdorff(&a, &b, 5, 5, 1, 1.0).unwrap(), 5.0);
    assert_eq!(hausdorff(&a, &b, 5, 5, 1, 2.0).unwrap(), 10.0);
    assert_eq!(dice_score(&a, &b, 1).unwrap(), 0.0);
    assert_eq!(dice_score(&a, &a, 1).unwrap(), 1.0);
    assert_eq!(hausdorff(&a, &a, 5, 5, 1, 1.0).unwrap(), 0.0);
    assert_eq!(dice_score(&a, &b, 2).unwrap(), 1.0);
    assert_eq!(hausdorff(&a, &b, 5, 5, 2, 1.0).unwrap(), 0.0);
    assert!(matches!(hausdorff(&a, &vec![0; 25], 5, 5, 1, 1.0), Err(CqError::Degenerate { .. })));
}

#[test]
fn distance_transform_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let set: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.2)).collect();
        if !set.contains(&true) {
            continue;
        }
        let d = squared_distance_transform(&set, h, w);
        for i in 0..h * w {
            let want = (0..h * w)
                .filter(|&j| set[j])
                .map(|j| {
                    let dx = (i % w) as f64 - (j % w) as f64;
                    let dy = (i / w) as f64 - (j / w) as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d[i], want);
        }
    }
}

#[test]
fn random_mask_pairs_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let a: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let b: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let spacing = rng.random_range(0.5..2.0);
        for label in [1, 2] {
            assert_eq!(dice_score(&a, &b, label).unwrap(), dice_oracle(&a, &b, label));
            match hausdorff_oracle(&a, &b, 8, label, spacing) {
                Some(want) => assert!(close(hausdorff(&a, &b, 8, 8, label, spacing).unwrap(), want, 1e-9)),
                None => assert!(hausdorff(&a, &b, 8, 8, label, spacing).is_err()),
            }
        }
    }
}

#[test]
fn bland_altman_examples() {
    let t = [1.0, 5.0, 2.0, 8.0];
    let same = bland_altman(&t, &t).unwrap();
    assert_eq!((same.bias, same.loa_low, same.loa_high), (0.0, 0.0, 0.0));
    let shifted: Vec<f64> = t.iter().map(|v| v + 3.0).collect();
    let s = bland_altman(&shifted, &t).unwrap();
    assert!(close(s.bias, 3.0, 1e-9) && close(s.loa_high - s.loa_low, 0.0, 1e-9));
    let d = bland_altman(&[1.0, -1.0], &[0.0, 0.0]).unwrap();
    assert!(close(d.bias, 0.0, 1e-9) && close(d.loa_low, -1.96, 1e-9) && close(d.loa_high, 1.96, 1e-9));
}

fn frame_eval(id: &str, offset: f64, phase_flip: bool) -> SubjectEval {
    let truth: Vec<IndexVector> = (0..4)
        .map(|t| IndexVector { values: std::array::from_fn(|k| (t * 11 + k) as f64 + 1.0), phase: (t % 2) as u8 })
        .collect();
    let pred = truth
        .iter()
        .map(|v| IndexVector {
            values: v.values.map(|x| x + offset),
            phase: if phase_flip { 1 - v.phase } else { v.phase },
        })
        .collect();
    let labels: Vec<u8> = (0..4 * 16).map(|i| [0, 1, 2, 1][i % 4]).collect();
    SubjectEval {
        id: id.into(),
        spacing: 1.0,
        height: 4,
        width: 4,
        pred_labels: labels.clone(),
        true_labels: labels,
        pred_indices: pred,
        true_indices: truth,
    }
}

#[test]
fn report_aggregates_over_subjects() {
    let r = MetricsReport::compute(&[frame_eval("a", 1.0, false), frame_eval("b", -1.0, true)]).unwrap();
    assert_eq!(r.frames, 8);
    assert!(r.mae.iter().all(|&m| close(m, 1.0, 1e-12)));
    assert_eq!(r.error_rate, 50.0);
    assert_eq!(r.dice, [1.0, 1.0]);
    assert_eq!(r.hausdorff, [0.0, 0.0]);
    for b in r.bland_altman {
        assert!(close(b.bias, 0.0, 1e-12) && close(b.loa_high, 1.96, 1e-12));
    }
    let csv = r.to_csv();
    assert!(csv.starts_with("metric,target,value\n"));
    assert!(csv.contains("error_rate,phase,50\n"), "{csv}");
    assert!(r.summary().contains("frames evaluated: 8"));
    assert!(MetricsReport::compute(&[]).is_err());
}

proptest! {
    #[test]
    fn mae_triangle_bound(
        v in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..30)
    ) {
        let a: Vec<f64> = v.iter().map(|t| t.0).collect();
        let b: Vec<f64> = v.iter().map(|t| t.1).collect();
        let c: Vec<f64> = v.iter().map(|t| t.2).collect();
        prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn pcc_affine_invariance(
        v in proptest::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        a in 0.1f64..10.0,
        b in -100.0f64..100.0,
    ) {
        let x: Vec<f64> = v.iter().map(|t| t.0).collect();
        let y: Vec<f64> = v.iter().map(|t| t.1).collect();
        let Ok(base) = pcc(&x, &y) else { return Ok(()) };
        let up: Vec<f64> = x.iter().map(|p| a * p + b).collect();
        let down: Vec<f64> = x.iter().map(|p| -a * p + b).collect();
        prop_assert!((pcc(&up, &y).unwrap() - base).abs() < 1e-9);
        prop_assert!((pcc(&down, &y).unwrap() + base).abs() < 1e-9);
    }

    #[test]
    fn dice_and_hausdorff_are_symmetric(
        a in proptest::collection::vec(0u8..3, 36),
        b in proptest::collection::vec(0u8..3, 36),
    ) {
        for label in [1, 2] {
            prop_assert_eq!(dice_score(&a, &b, label).unwrap(), dice_score(&b, &a, label).unwrap());
            match (hausdorff(&a, &b, 6, 6, label, 1.3), hausdorff(&b, &a, 6, 6, label, 1.3)) {
                (Ok(x), Ok(y)) => prop_assert_eq!(x, y),
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
        }
    }
}
