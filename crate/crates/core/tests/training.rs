use aggdet_core::model::{Detector, ModelConfig, ParamGroup};
use aggdet_core::nn::checkpoint::collect_tensors;
use aggdet_core::rng;
use aggdet_core::synth::{generate_phantom, scan_spec, DatasetSpec};
use aggdet_core::train::{
    run_training, sample_crop, train_step_fprn, train_step_joint, train_step_rpn, Batch, LrSchedule, StepParams, TrainConfig, TrainMode, TrainScan,
};
use aggdet_core::{Box3D, Error, Volume};
use proptest::prelude::*;

fn scans(n: usize, seed: u64) -> Vec<TrainScan> {
    let ds = DatasetSpec::default();
    (0..n)
        .map(|i| {
            let p = generate_phantom(&scan_spec(seed, i, &ds)).unwrap();
            TrainScan {
                id: format!("s{i}"),
                volume: p.volume,
                gts: p.lesions,
            }
        })
        .collect()
}

fn lesion_batch(scans: &[TrainScan], seed: u64) -> Batch {
    let mut r = rng::seeded(seed);
    let crops = scans
        .iter()
        .take(2)
        .map(|s| sample_crop(&s.volume, &s.gts, 32, &[], 0.0, 1.0, 0.0, &mut r).unwrap())
        .collect();
    Batch::from_crops(crops).unwrap()
}

fn params(cfg: &TrainConfig) -> StepParams {
    StepParams {
        iter: 0,
        focus: cfg.focus(0, 100),
        sgd: cfg.sgd(0.01),
    }
}

fn snapshot(m: &mut Detector<f32>, g: ParamGroup) -> Vec<(String, aggdet_core::Tensor<f32>)> {
    collect_tensors(&mut m.group(g))
}

#[test]
fn rpn_step_leaves_second_branch_alone() {
    let s = scans(2, 10);
    let batch = lesion_batch(&s, 1);
    let cfg = TrainConfig::default();
    let mut m = Detector::<f32>::new(ModelConfig::default(), 3).unwrap();
    let fprn = snapshot(&mut m, ParamGroup::Fprn);
    let backbone = snapshot(&mut m, ParamGroup::BackboneRpn);
    train_step_rpn(&mut m, &batch, &cfg, &params(&cfg)).unwrap();
    assert_eq!(snapshot(&mut m, ParamGroup::Fprn), fprn);
    assert_ne!(snapshot(&mut m, ParamGroup::BackboneRpn), backbone);
}

#[test]
fn fprn_step_freezes_backbone_and_statistics() {
    let s = scans(2, 11);
    let batch = lesion_batch(&s, 2);
    let cfg = TrainConfig::default();
    let mut m = Detector::<f32>::new(ModelConfig::default(), 4).unwrap();
    let backbone = snapshot(&mut m, ParamGroup::BackboneRpn);
    let fprn = snapshot(&mut m, ParamGroup::Fprn);
    let loss = train_step_fprn(&mut m, &batch, &cfg, &params(&cfg), &mut rng::seeded(5)).unwrap();
    assert!(loss.n_fpr_pos > 0, "lesion crops always yield positives");
    assert!(loss.n_fpr - loss.n_fpr_pos <= 3 * loss.n_fpr_pos);
    assert!(loss.n_fpr <= cfg.fprn_cap);
    assert_eq!(snapshot(&mut m, ParamGroup::BackboneRpn), backbone);
    assert_ne!(snapshot(&mut m, ParamGroup::Fprn), fprn);
}

#[test]
fn joint_step_updates_both_branches() {
    let s = scans(2, 12);
    let batch = lesion_batch(&s, 3);
    let cfg = TrainConfig::default();
    let mut m = Detector::<f32>::new(ModelConfig::default(), 5).unwrap();
    let backbone = snapshot(&mut m, ParamGroup::BackboneRpn);
    let fprn = snapshot(&mut m, ParamGroup::Fprn);
    let loss = train_step_joint(&mut m, &batch, &cfg, &params(&cfg), &mut rng::seeded(6)).unwrap();
    assert!(loss.total.is_finite());
    assert!((loss.total - (loss.loss_neg + loss.loss_pos + loss.loss_reg + loss.loss_fpr)).abs() < 1e-9);
    assert_ne!(snapshot(&mut m, ParamGroup::BackboneRpn), backbone);
    assert_ne!(snapshot(&mut m, ParamGroup::Fprn), fprn);
}

#[test]
fn schedule_writes_log_and_checkpoints() {
    let s = scans(3, 13);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 1,
        epochs: 2,
        iters_per_epoch: Some(2),
        mode: TrainMode::Alternating,
        lr: LrSchedule {
            start: 0.01,
            decay: 0.1,
            milestones: vec![2],
        },
        ..TrainConfig::default()
    };
    let out = run_training(&s, &ModelConfig::default(), &cfg, 1, Some(dir.path())).unwrap();
    assert_eq!(out.log.len(), 6);
    assert!(out.log.iter().enumerate().all(|(i, r)| r.iter == i));
    for e in 0..3 {
        assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).is_file());
    }
    assert!(dir.path().join("model.ckpt").is_file());
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 7);
    assert!(log.starts_with("iter,loss_total,loss_neg,loss_pos,loss_reg,loss_fpr,n_pos,n_tn\n"));
    // Warmup iterations never touch the second branch.
    assert!(out.log[..2].iter().all(|r| r.loss.loss_fpr == 0.0));
}

#[test]
fn hard_region_stage_mines_from_training_scans() {
    let s = scans(2, 14);
    let cfg = TrainConfig {
        warmup_epochs: 1,
        epochs: 1,
        abs_epochs: 1,
        abs_enabled: true,
        abs_score_thresh: 0.0,
        iters_per_epoch: Some(1),
        ..TrainConfig::default()
    };
    let out = run_training(&s, &ModelConfig::default(), &cfg, 2, None).unwrap();
    assert_eq!(out.log.len(), 3);
    for (id, regions) in &out.pool.regions {
        assert!(s.iter().any(|t| &t.id == id));
        assert!(regions.iter().all(|r| &r.scan_id == id));
    }
}

#[test]
fn divergence_is_reported_with_iteration() {
    let s = scans(2, 15);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        warmup_epochs: 0,
        epochs: 30,
        iters_per_epoch: Some(1),
        clip_norm: 0.0,
        momentum: 0.0,
        lr: LrSchedule {
            start: 1e12,
            decay: 1.0,
            milestones: vec![],
        },
        ..TrainConfig::default()
    };
    let err = run_training(&s, &ModelConfig::default(), &cfg, 3, Some(dir.path())).unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    assert!(dir.path().join("train_log.csv").is_file());
    assert!(!dir.path().join("model.ckpt").exists());
}

#[test]
fn invalid_configs_are_rejected() {
    let s = scans(1, 16);
    for cfg in [
        TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        },
        TrainConfig {
            crop_size: 24,
            ..TrainConfig::default()
        },
        TrainConfig {
            abs_focus_prob: -0.1,
            ..TrainConfig::default()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        },
    ] {
        let e = run_training(&s, &ModelConfig::default(), &cfg, 0, None).unwrap_err();
        assert!(matches!(e, Error::InvalidArgument { .. }), "{e}");
    }
    assert!(run_training(&[], &ModelConfig::default(), &TrainConfig::default(), 0, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn crops_keep_exactly_the_lesions_they_contain(
        seed in 0u64..1000,
        n in 20usize..48,
        crop in prop::sample::select(vec![8usize, 16, 32]),
        centers in prop::collection::vec((0.0f64..48.0, 0.0f64..48.0, 0.0f64..48.0, 2.0f64..10.0), 0..5),
        gt_prob in 0.0f64..=1.0,
    ) {
        let vol = Volume::filled([n; 3], [1.0; 3], 1.0).unwrap();
        let gts: Vec<Box3D> = centers.iter().map(|&(z, y, x, d)| Box3D::new(z, y, x, d)).collect();
        let mut r = rng::seeded(seed);
        let c = sample_crop(&vol, &gts, crop, &[], 0.0, gt_prob, -5.0, &mut r).unwrap();
        prop_assert_eq!(c.volume.dims(), [crop; 3]);
        let expected: Vec<Box3D> = gts
            .iter()
            .map(|g| g.translated(-c.origin[0] as f64, -c.origin[1] as f64, -c.origin[2] as f64))
            .filter(|g| g.center().iter().all(|&v| v >= 0.0 && v < crop as f64))
            .collect();
        prop_assert_eq!(&c.boxes, &expected);
        for z in 0..crop {
            for y in 0..crop {
                for x in 0..crop {
                    let g = [z as i64 + c.origin[0], y as i64 + c.origin[1], x as i64 + c.origin[2]];
                    let inside = g.iter().all(|&v| v >= 0 && v < n as i64);
                    prop_assert_eq!(c.volume.get(z, y, x), if inside { 1.0 } else { -5.0 });
                }
            }
        }
    }
}
