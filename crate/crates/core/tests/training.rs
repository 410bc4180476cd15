mod common;

use common::synthetic;
use espt::ablation::{run_sweep, Axis, SweepSpec};
use espt::config::EvalConfig;
use espt::episodes::{EpisodeShape, Split};
use espt::tensor::blob::Precision;
use espt::training::{train, TrainConfig};
use espt::transforms::TransformSet;

fn small() -> TrainConfig {
    let mut cfg = TrainConfig::desk(EpisodeShape::new(2, 1, 3));
    cfg.epochs = 2;
    cfg.episodes_per_epoch = 6;
    cfg.validation_every = 0;
    cfg.seed = 5;
    cfg
}

#[test]
fn paired_runs_share_episodes_and_transforms() {
    let data = synthetic(6, 10, 16, 1, [4, 0, 2]);
    let with = train(&small(), &data, None).unwrap();
    let mut cfg = small();
    cfg.alpha = 0.0;
    let without = train(&cfg, &data, None).unwrap();
    assert_eq!(with.log[0].class_loss, without.log[0].class_loss);
    assert_eq!(with.log[0].train_accuracy, without.log[0].train_accuracy);
    assert!(with.log.iter().all(|r| r.pretext_loss.is_some()));
    assert!(without.log.iter().all(|r| r.pretext_loss.is_none() && r.total_loss == r.class_loss));
    assert_ne!(with.last.params.fingerprint(), without.last.params.fingerprint());

    let mut cfg = small();
    cfg.rotations = TransformSet::from_degrees(&[180]).unwrap();
    let half_turns = train(&cfg, &data, None).unwrap();
    assert!(half_turns.log.iter().all(|r| r.rotation == Some(180)));
    assert_eq!(half_turns.log[0].class_loss, with.log[0].class_loss);
}

#[test]
fn removing_stop_gradient_changes_the_update() {
    let data = synthetic(6, 10, 16, 1, [4, 0, 2]);
    let mut cfg = small();
    cfg.epochs = 1;
    cfg.episodes_per_epoch = 1;
    let detached = train(&cfg, &data, None).unwrap();
    cfg.stop_gradient = false;
    let free = train(&cfg, &data, None).unwrap();
    assert_eq!(detached.log[0].total_loss, free.log[0].total_loss);
    assert_ne!(detached.last.params.fingerprint(), free.last.params.fingerprint());
}

#[test]
fn single_precision_storage_keeps_parameters_on_the_f32_grid() {
    let data = synthetic(6, 10, 16, 1, [4, 0, 2]);
    let mut cfg = small();
    cfg.precision = Precision::F32;
    let out = train(&cfg, &data, None).unwrap();
    for p in out.last.params.iter() {
        assert!(p.value.data().iter().all(|&v| (v as f32) as f64 == v), "{} off the f32 grid", p.name);
    }
    assert!(out.log.iter().all(|r| r.total_loss.is_finite()));
}

#[test]
fn transform_sweep_covers_every_subset() {
    let data = synthetic(6, 10, 16, 1, [4, 0, 2]);
    let mut base = small();
    base.epochs = 1;
    base.episodes_per_epoch = 2;
    let spec = SweepSpec { axis: Axis::all_transform_subsets(), seeds: vec![1] };
    let eval = EvalConfig { shape: EpisodeShape::new(2, 1, 3), tasks: 4, split: Split::Test, seed: None };
    let mut seen = Vec::new();
    let rows = run_sweep(&base, &spec, &eval, &data, |r| seen.push(r.value.clone())).unwrap();
    assert_eq!(rows.len(), 7);
    assert_eq!(seen, ["{90}", "{180}", "{270}", "{90;180}", "{90;270}", "{180;270}", "{90;180;270}"]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean_acc)));
}
