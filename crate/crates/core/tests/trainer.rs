use std::path::{Path, PathBuf};

use proptest::prelude::*;
use qyolop::augment::AugmentConfig;
use qyolop::config::{Preset, RunConfig};
use qyolop::data::load_samples;
use qyolop::network::{load_checkpoint, Model};
use qyolop::toyset::{generate, SceneSpec};
use qyolop::trainer::{lr_at, run_schedule, run_stage, Resume, StageConfig, StageName, TrainSchedule};
use qyolop::Error;

fn toy_data(dir: &Path, n: usize) -> PathBuf {
    let spec = SceneSpec {
        seed: 21,
        n_images: n,
        ..SceneSpec::default()
    };
    generate(&spec, &dir.join("train")).unwrap()
}

fn stage(name: StageName, epochs: usize) -> StageConfig {
    StageConfig {
        name,
        epochs,
        batch_size: 4,
        lr_init: 1e-2,
        lr_min: 1e-5,
        warmup_epochs: 0,
        mosaic: false,
        mosaic_off_tail: 0,
        datasets: vec!["train/manifest.json".into()],
        qat: name == StageName::Qat,
    }
}

fn small_schedule(root: &Path, stages: Vec<StageConfig>) -> TrainSchedule {
    let mut cfg = RunConfig::preset(Preset::Toy);
    cfg.network.width_multiple = 0.25;
    cfg.paths.data_root = root.to_path_buf();
    cfg.paths.val = None;
    cfg.schedule.stages = stages;
    cfg.train_schedule()
}

#[test]
fn one_epoch_stage_logs_one_finite_entry() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 8);
    let s = small_schedule(dir.path(), vec![stage(StageName::Pretrain1, 1)]);
    let out = run_schedule(&s, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.logs.len(), 1);
    let l = &out.logs[0];
    assert_eq!(l.steps, 2);
    assert!(l.loss.components().iter().all(|(_, v)| v.is_finite()));
    let lines = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 8);
    let mut st = stage(StageName::Pretrain2, 2);
    st.mosaic = true;
    let s = small_schedule(dir.path(), vec![st]);
    let a = run_schedule(&s, &dir.path().join("a"), None).unwrap();
    let b = run_schedule(&s, &dir.path().join("b"), None).unwrap();
    assert_eq!(a.logs, b.logs);
    assert_eq!(a.model.store, b.model.store);
}

#[test]
fn mosaic_respects_the_off_tail() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 8);
    let mut all_off = stage(StageName::Pretrain2, 2);
    all_off.mosaic = true;
    all_off.mosaic_off_tail = 2;
    let mut tail_one = all_off.clone();
    tail_one.mosaic_off_tail = 1;
    let s = small_schedule(dir.path(), vec![all_off, tail_one]);
    let out = run_schedule(&s, &dir.path().join("run"), None).unwrap();
    let counts: Vec<(usize, usize)> = out.logs.iter().map(|l| (l.mosaic_applied, l.mosaic_skipped)).collect();
    assert_eq!(counts, [(0, 8), (0, 8), (8, 0), (0, 8)]);
}

#[test]
fn empty_schedule_returns_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_schedule(dir.path(), vec![]);
    let out = run_schedule(&s, &dir.path().join("run"), None).unwrap();
    assert!(out.logs.is_empty() && out.checkpoints.is_empty());
    let fresh = Model::build(&s.network, s.seed).unwrap();
    assert_eq!(out.model.store, fresh.store);
}

#[test]
fn each_stage_writes_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 4);
    let s = small_schedule(dir.path(), vec![stage(StageName::Pretrain1, 1), stage(StageName::Qat, 1)]);
    let out = run_schedule(&s, &dir.path().join("run"), None).unwrap();
    assert_eq!(out.checkpoints.len(), 2);
    assert!(out.checkpoints.iter().all(|p| p.exists()));
    let first = load_checkpoint(&out.checkpoints[0]).unwrap();
    assert!(!first.is_fused() && first.qat.is_none());
    let last = load_checkpoint(&out.checkpoints[1]).unwrap();
    assert!(last.is_fused() && last.qat.is_some());
}

#[test]
fn resume_reproduces_the_remaining_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 8);
    let mut second = stage(StageName::Finetune, 2);
    second.mosaic = true;
    let s = small_schedule(dir.path(), vec![stage(StageName::Pretrain1, 1), second]);
    let straight = run_schedule(&s, &dir.path().join("straight"), None).unwrap();
    let resumed = run_schedule(
        &s,
        &dir.path().join("straight"),
        Some(Resume {
            model: load_checkpoint(&straight.checkpoints[0]).unwrap(),
            next_stage: 1,
        }),
    )
    .unwrap();
    assert_eq!(resumed.logs, straight.logs[1..]);
    assert_eq!(resumed.model.store, straight.model.store);
}

#[test]
fn missing_dataset_aborts_with_stage_context() {
    let dir = tempfile::tempdir().unwrap();
    let s = small_schedule(dir.path(), vec![stage(StageName::Pretrain1, 1)]);
    match run_schedule(&s, &dir.path().join("run"), None) {
        Err(Error::Stage { stage, epoch, .. }) => assert_eq!((stage.as_str(), epoch), ("pretrain1", 0)),
        other => panic!("expected a stage error, got {:?}", other.err()),
    }
}

#[test]
fn non_finite_loss_names_the_component() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_data(dir.path(), 4);
    let mut data = load_samples(&manifest).unwrap();
    data[0].image.data[5] = f32::NAN;
    let s = small_schedule(dir.path(), vec![stage(StageName::Pretrain1, 1)]);
    let mut model = Model::build(&s.network, 0).unwrap();
    let mut hook = |_: &qyolop::trainer::EpochLog| Ok(());
    match run_stage(&mut model, &s, 0, &data, None, &mut hook) {
        Err(Error::NonFiniteLoss { stage, epoch, component }) => {
            assert_eq!((stage.as_str(), epoch), ("pretrain1", 0));
            assert!(!component.is_empty());
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training on NaN input succeeded"),
    }
}

#[test]
fn loss_decreases_when_overfitting_eight_samples() {
    let dir = tempfile::tempdir().unwrap();
    toy_data(dir.path(), 8);
    let mut st = stage(StageName::Pretrain1, 50);
    st.batch_size = 8;
    st.warmup_epochs = 5;
    st.lr_init = 1e-2;
    let mut s = small_schedule(dir.path(), vec![st]);
    s.augment = AugmentConfig {
        perspective_scale: 0.0,
        translate: 0.0,
        hsv_h: 0.0,
        hsv_s: 0.0,
        hsv_v: 0.0,
        flip_prob: 0.0,
        ..AugmentConfig::default()
    };
    let out = run_schedule(&s, &dir.path().join("run"), None).unwrap();
    let losses: Vec<f64> = out.logs.iter().map(|l| l.loss.total).collect();
    // ten-epoch window means fall strictly
    let means: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(means.windows(2).all(|w| w[1] < w[0]), "{means:?}");
    assert!(losses[49] < losses[0], "{} → {}", losses[0], losses[49]);
}

fn lr_stage() -> impl Strategy<Value = (StageConfig, usize)> {
    (1usize..30, 0usize..6, 1usize..20, 1e-4f64..1e-1, 0.0f64..1.0).prop_filter_map(
        "warmup shorter than the stage",
        |(epochs, warm, spe, lr, frac)| {
            (warm < epochs).then(|| {
                let mut s = stage(StageName::Pretrain1, epochs);
                s.warmup_epochs = warm;
                s.lr_init = lr;
                s.lr_min = lr * frac;
                (s, spe)
            })
        },
    )
}

proptest! {
    #[test]
    fn lr_is_non_increasing_after_warmup((s, spe) in lr_stage()) {
        let warm = s.warmup_epochs * spe;
        let total = s.epochs * spe;
        let mut prev = f64::INFINITY;
        for step in warm..total {
            let lr = lr_at(&s, step, spe);
            prop_assert!(lr <= prev + 1e-15);
            prop_assert!(lr >= s.lr_min - 1e-15 && lr <= s.lr_init + 1e-15);
            prev = lr;
        }
        if total > warm + 1 {
            prop_assert!((lr_at(&s, total - 1, spe) - s.lr_min).abs() < 1e-12);
        }
    }

    #[test]
    fn warmup_ramps_to_lr_init((s, spe) in lr_stage()) {
        let warm = s.warmup_epochs * spe;
        prop_assume!(warm > 0);
        prop_assert!((lr_at(&s, 0, spe) - s.lr_init / 100.0).abs() < 1e-15);
        prop_assert!((lr_at(&s, warm, spe) - s.lr_init).abs() < 1e-15);
        for step in 1..=warm {
            prop_assert!(lr_at(&s, step, spe) > lr_at(&s, step - 1, spe));
        }
        // the step before the boundary approaches lr_init linearly
        let gap = s.lr_init - lr_at(&s, warm - 1, spe);
        prop_assert!((gap - 0.99 * s.lr_init / warm as f64).abs() < 1e-12);
    }
}

#[test]
fn cosine_midpoint_is_the_mean_of_the_endpoints() {
    let mut s = stage(StageName::Pretrain1, 6);
    s.warmup_epochs = 1;
    // 2 steps per epoch: warmup ends at step 2, the last step is 11, so the
    // cosine spans 9 steps and has no grid point at its middle; 3 epochs of
    // 1 step without warmup put step 1 exactly halfway.
    let mut odd = stage(StageName::Pretrain1, 3);
    odd.warmup_epochs = 0;
    assert!((lr_at(&odd, 1, 1) - (odd.lr_init + odd.lr_min) / 2.0).abs() < 1e-15);
    let (spe, warm, last) = (2, 2, 11);
    let span = (last - warm) as f64;
    for step in warm..=last {
        let t = (step - warm) as f64 / span;
        let want = s.lr_min + 0.5 * (s.lr_init - s.lr_min) * (1.0 + (std::f64::consts::PI * t).cos());
        assert!((lr_at(&s, step, spe) - want).abs() < 1e-15);
    }
}
