use cq_core::geometry::Connectivity;
use cq_core::imaging::dataset::{generate_set, PhantomSetConfig, Subject};
use cq_core::imaging::ClaheParams;
use cq_core::networks::{DrUnetConfig, StmtConfig};
use cq_core::train::*;
use cq_core::CqError;
use cq_tensor::{ParamKind, ParamStore, Tensor};

fn subjects(n: usize, seed: u64) -> Vec<Subject> {
    let cfg = PhantomSetConfig { subjects: n, frames: 4, height: 24, width: 24, ..Default::default() };
    generate_set(&cfg, seed)
        .unwrap()
        .into_iter()
        .map(|p| Subject { id: p.sequence.subject, images: p.sequence.frames, masks: p.masks, indices: p.indices })
        .collect()
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        epochs_g: 2,
        epochs_d: 2,
        epochs_joint: 2,
        lr_g: 1e-3,
        g: DrUnetConfig { base_filters: 4, depth: 2, dilations: vec![1, 2], ..Default::default() },
        d: StmtConfig { widths: vec![4, 4, 4], head_width: 8, ..Default::default() },
        clahe: ClaheParams { tiles: [2, 2], ..Default::default() },
        augmentation: false,
        ..Default::default()
    }
}

fn store_with(values: Vec<f64>) -> (ParamStore<f64>, cq_tensor::ParamId) {
    let mut s = ParamStore::new();
    let n = values.len();
    let id = s.add("w", Tensor::new(&[n], values).unwrap(), ParamKind::Trainable).unwrap();
    (s, id)
}

#[test]
fn adam_first_step_is_lr_times_sign() {
    let (mut s, id) = store_with(vec![1.0, -2.0, 0.5]);
    let mut adam = Adam::new(&s, vec![id], 0.01, 0.0);
    adam.step(&mut s, &[Tensor::new(&[3], vec![0.3, -5.0, 1e-3]).unwrap()]).unwrap();
    for (p, want) in s.get(id).data().iter().zip([0.99, -1.99, 0.49]) {
        assert!((p - want).abs() < 1e-6, "{p} vs {want}");
    }
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let (mut s, id) = store_with(vec![1.0, -2.0]);
    let mut adam = Adam::new(&s, vec![id], 0.01, 0.0);
    adam.step(&mut s, &[Tensor::new(&[2], vec![0.0, 0.0]).unwrap()]).unwrap();
    assert_eq!(s.get(id).data(), &[1.0, -2.0]);
}

#[test]
fn adam_two_steps_match_hand_unrolling() {
    let (mut s, id) = store_with(vec![0.0]);
    let mut adam = Adam::new(&s, vec![id], 0.001, 0.0);
    let g = Tensor::new(&[1], vec![0.5]).unwrap();
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.001);
    let (mut m, mut v, mut p) = (0.0, 0.0, 0.0);
    for t in 1..=2 {
        adam.step(&mut s, &[g.clone()]).unwrap();
        m = b1 * m + (1.0 - b1) * 0.5;
        v = b2 * v + (1.0 - b2) * 0.25;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p -= lr * mhat / (vhat.sqrt() + eps);
        assert!((s.get(id).data()[0] - p).abs() < 1e-15);
    }
    assert!((p + 0.002).abs() < 1e-9);
}

#[test]
fn adam_weight_decay_acts_as_gradient() {
    let (mut s, id) = store_with(vec![1.0]);
    let mut adam = Adam::new(&s, vec![id], 0.01, 0.1);
    adam.step(&mut s, &[Tensor::new(&[1], vec![0.0]).unwrap()]).unwrap();
    assert!((s.get(id).data()[0] - 0.99).abs() < 1e-6);
}

#[test]
fn adam_rejects_non_finite_gradient() {
    let (mut s, id) = store_with(vec![1.0, 2.0]);
    let mut adam = Adam::new(&s, vec![id], 0.01, 0.0);
    let e = adam.step(&mut s, &[Tensor::new(&[2], vec![0.1, f64::NAN]).unwrap()]).unwrap_err();
    assert!(matches!(&e, CqError::NonFiniteGradient { name } if name == "w"));
    assert_eq!(s.get(id).data(), &[1.0, 2.0]);
    assert_eq!(adam.steps(), 0);
}

#[test]
fn kfold_partitions() {
    let s = kfold_split(145, 5, 7).unwrap();
    assert!(s.folds.iter().all(|f| f.len() == 29));
    let mut all: Vec<usize> = s.folds.concat();
    all.sort_unstable();
    assert_eq!(all, (0..145).collect::<Vec<_>>());
    for k in 0..5 {
        assert_eq!(s.train_indices(k).len(), 116);
        assert!(s.train_indices(k).iter().all(|i| !s.folds[k].contains(i)));
    }
    let t = kfold_split(10, 5, 1).unwrap();
    assert!(t.folds.iter().all(|f| f.len() == 2));
    assert_eq!(kfold_split(10, 5, 1).unwrap(), t);
    assert_ne!(kfold_split(10, 5, 2).unwrap(), t);
    let u = kfold_split(7, 3, 0).unwrap();
    assert_eq!(u.folds.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 2, 2]);
    assert!(matches!(kfold_split(10, 0, 1), Err(CqError::Config { .. })));
    assert!(kfold_split(3, 4, 1).is_err());
}

#[test]
fn augmentation_expands_samples() {
    let subs = subjects(2, 1);
    let mut cfg = small_cfg();
    cfg.augmentation = true;
    cfg.augment.expansion = 3;
    let samples = prepare_samples(&subs, &cfg, 4).unwrap();
    assert_eq!(samples.len(), 6);
    assert_eq!(samples[1].id, "subject_000#aug1");
    assert!(samples.iter().all(|s| s.labels.iter().all(|&l| l <= 2) && s.indices.len() == 4));
    let again = prepare_samples(&subs, &cfg, 4).unwrap();
    assert!(samples.iter().zip(&again).all(|(a, b)| a.input == b.input && a.labels == b.labels));
}

#[test]
fn stage_two_leaves_g_untouched() {
    let subs = subjects(2, 2);
    let cfg = small_cfg();
    let samples = prepare_samples(&subs, &cfg, 0).unwrap();
    let mut model = init_model(&samples, &cfg, 0).unwrap();
    train_segmentation(&mut model, &samples, &cfg, 1, 0).unwrap();
    let g_before: Vec<_> = model.store.iter().filter(|(_, e)| e.name.starts_with("g.")).map(|(_, e)| e.value.clone()).collect();
    let d_before: Vec<_> = model.store.iter().filter(|(_, e)| e.name.starts_with("d.")).map(|(_, e)| e.value.clone()).collect();
    train_multitask(&mut model, &samples, &cfg, 2, 0).unwrap();
    let g_after: Vec<_> = model.store.iter().filter(|(_, e)| e.name.starts_with("g.")).map(|(_, e)| e.value.clone()).collect();
    let d_after: Vec<_> = model.store.iter().filter(|(_, e)| e.name.starts_with("d.")).map(|(_, e)| e.value.clone()).collect();
    assert_eq!(g_before, g_after);
    assert_ne!(d_before, d_after);
}

#[test]
fn training_is_deterministic() {
    let subs = subjects(2, 3);
    for strategy in [Strategy::Multistage, Strategy::End2end] {
        let cfg = TrainConfig { strategy, ..small_cfg() };
        let run = || {
            let samples = prepare_samples(&subs, &cfg, 9).unwrap();
            let out = train(&samples, &cfg, 9).unwrap();
            let mut bytes = Vec::new();
            out.model.save(&mut bytes).unwrap();
            (bytes, log_csv(&out.log_primary), log_csv(&out.log_secondary))
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn joint_gradient_reaches_first_g_layer() {
    let subs = subjects(1, 4);
    let mut cfg = small_cfg();
    // Without the Dice term, any gradient in G must come through D.
    cfg.loss.end_to_end = [0.0, 1.0, 1.0];
    let samples = prepare_samples(&subs, &cfg, 0).unwrap();
    let model = init_model(&samples, &cfg, 0).unwrap();
    let (grads, vals) = end_to_end_gradients(&model, &samples[0], &cfg).unwrap();
    assert!((vals[3] - vals[1] - vals[2]).abs() < 1e-5 * vals[3]);
    let (first, entry) = model.store.iter().find(|(_, e)| e.name.starts_with("g.")).unwrap();
    let norm: f32 = grads[first.index()].data().iter().map(|v| v * v).sum();
    assert!(norm > 0.0, "no gradient reached {}", entry.name);
}

#[test]
fn joint_training_without_d_terms_matches_segmentation_training() {
    let subs = subjects(2, 5);
    let mut cfg = small_cfg();
    cfg.strategy = Strategy::End2end;
    cfg.epochs_joint = 1;
    cfg.loss.end_to_end = [1.0, 0.0, 0.0];
    let samples = prepare_samples(&subs, &cfg, 3).unwrap();
    let joint = train(&samples, &cfg, 3).unwrap();
    let mut seg = init_model(&samples, &cfg, 3).unwrap();
    let log = train_segmentation(&mut seg, &samples, &cfg, 1, 3).unwrap();
    assert!((log[0].seg_loss - joint.log_primary[0].seg_loss).abs() < 1e-6);
    for (a, b) in seg.store.iter().zip(joint.model.store.iter()) {
        if a.1.name.starts_with("g.") {
            for (x, y) in a.1.value.data().iter().zip(b.1.value.data()) {
                assert!((x - y).abs() <= 1e-6 * x.abs().max(1.0), "{}: {x} vs {y}", a.1.name);
            }
        }
    }
}

#[test]
fn segmentation_loss_decreases() {
    let subs = subjects(2, 6);
    let cfg = small_cfg();
    let samples = prepare_samples(&subs, &cfg, 1).unwrap();
    let mut model = init_model(&samples, &cfg, 1).unwrap();
    let log = train_segmentation(&mut model, &samples, &cfg, 20, 1).unwrap();
    assert_eq!(log.len(), 20);
    assert!(log[19].seg_loss < log[0].seg_loss, "{} -> {}", log[0].seg_loss, log[19].seg_loss);
    let csv = log_csv(&log);
    assert!(csv.starts_with("epoch,seg_loss,mse_loss,bce_loss,total_loss,wall_seconds\n"));
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let subs = subjects(1, 7);
    let cfg = small_cfg();
    let samples = prepare_samples(&subs, &cfg, 0).unwrap();
    let model = init_model(&samples, &cfg, 0).unwrap();
    let mut bytes = Vec::new();
    model.save(&mut bytes).unwrap();
    let back = Model::load(bytes.as_slice()).unwrap();
    assert_eq!(back.to_tensors(), model.to_tensors());
    assert_eq!(back.transform, model.transform);
    let p = model.predict(&subs[0].images, subs[0].spacing()).unwrap();
    let q = back.predict(&subs[0].images, subs[0].spacing()).unwrap();
    assert_eq!(p.labels, q.labels);
    assert_eq!(p.ed_probability, q.ed_probability);

    let tensors = model.to_tensors();
    let victim = tensors.iter().find(|(n, _)| n.starts_with("d.")).unwrap().0.clone();
    let mut reshaped = tensors.clone();
    for (n, t) in &mut reshaped {
        if *n == victim {
            *t = Tensor::zeros(&[1, 1]).unwrap();
        }
    }
    let e = Model::from_tensors(reshaped).unwrap_err().to_string();
    assert!(e.contains(&victim), "{e}");
    let missing: Vec<_> = tensors.iter().filter(|(n, _)| *n != victim).cloned().collect();
    let e = Model::from_tensors(missing).unwrap_err().to_string();
    assert!(e.contains(&victim), "{e}");
    let mut extra = tensors.clone();
    extra.push(("g.bogus".into(), Tensor::zeros(&[1]).unwrap()));
    assert!(Model::from_tensors(extra).unwrap_err().to_string().contains("g.bogus"));
}

#[test]
fn identity_segmenter_reproduces_stored_indices() {
    let subs = subjects(2, 8);
    for s in &subs {
        let q = quantify_subject(&IdentitySegmenter, s, Connectivity::Eight).unwrap();
        assert_eq!(q, s.indices);
    }
}

#[test]
fn cross_validation_tests_every_subject_once() {
    let subs = subjects(4, 9);
    let cfg = TrainConfig { epochs_g: 1, epochs_d: 1, ..small_cfg() };
    let cv = cross_validate(&subs, &cfg, 2, 11).unwrap();
    assert_eq!(cv.folds.len(), 2);
    let mut tested: Vec<String> = cv.folds.iter().flat_map(|f| f.test_ids.clone()).collect();
    tested.sort();
    assert_eq!(tested, subs.iter().map(|s| s.id.clone()).collect::<Vec<_>>());
    assert_eq!(cv.aggregate.frames, 16);
    let curves = curves_csv(&cv.folds[0].evals);
    assert!(curves.starts_with("subject,frame,pred_A1,true_A1"), "{}", &curves[..60]);
    assert_eq!(curves.lines().count(), 1 + 4 * cv.folds[0].evals.len());
    assert!(matches!(cross_validate(&subs, &cfg, 1, 0), Err(CqError::Config { .. })));
}

#[test]
fn config_validation_and_parsing() {
    let cfg: TrainConfig = toml::from_str("strategy = \"end2end\"\nepochs_joint = 5\n").unwrap();
    assert_eq!(cfg.strategy, Strategy::End2end);
    assert_eq!(cfg.epochs_joint, 5);
    assert!(toml::from_str::<TrainConfig>("epochs = 5").is_err());
    assert_eq!("multistage".parse::<Strategy>().unwrap(), Strategy::Multistage);
    assert!("joint".parse::<Strategy>().is_err());
    let mut bad = small_cfg();
    bad.lr_d = 0.0;
    assert!(matches!(bad.validate(), Err(CqError::Config { name, .. }) if name == "lr_d"));
    let mut bad = small_cfg();
    bad.loss.class_weights = vec![1.0, 1.0];
    assert!(matches!(bad.validate(), Err(CqError::Config { name, .. }) if name == "class_weights"));
    let subs = subjects(1, 0);
    let mut odd = small_cfg();
    odd.g.depth = 4;
    let samples = prepare_samples(&subs, &odd, 0).unwrap();
    assert!(matches!(init_model(&samples, &odd, 0), Err(CqError::Config { name, .. }) if name == "depth"));
}
