mod common;

use common::synthetic;
use espt::backbone::{BackboneConfig, Model};
use espt::checkpoint;
use espt::episodes::{EpisodeShape, Split};
use espt::evaluation::{evaluate, evaluate_with, THREADS_ENV};
use espt::tensor::blob::Precision;
use rand::Rng;

#[test]
fn evaluation_leaves_the_model_untouched_and_survives_a_checkpoint() {
    let data = synthetic(8, 20, 16, 2, [4, 0, 4]);
    let model = Model::init(BackboneConfig::toy(), 3).unwrap();
    let before = model.params.fingerprint();
    let shape = EpisodeShape::new(4, 1, 5);
    let first = evaluate(&model, &data, Split::Test, shape, 40, 9, 1.0).unwrap();
    assert_eq!(model.params.fingerprint(), before);

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&model, dir.path(), Precision::F64).unwrap();
    let restored = checkpoint::load(dir.path()).unwrap();
    assert_eq!(restored.params.fingerprint(), before);
    let again = evaluate(&restored, &data, Split::Test, shape, 40, 9, 1.0).unwrap();
    assert_eq!(first, again);
    assert_eq!(first.accuracies.len(), 40);
}

#[test]
fn results_do_not_depend_on_worker_count_and_ci_shrinks_with_tasks() {
    let data = synthetic(10, 20, 8, 4, [5, 0, 5]);
    let shape = EpisodeShape::new(5, 1, 15);
    let guess = |ep: &espt::episodes::Episode, rng: &mut rand_chacha::ChaCha8Rng| Ok((0..ep.num_query()).map(|_| rng.gen_range(0..5)).collect());

    std::env::set_var(THREADS_ENV, "1");
    let serial = evaluate_with(&data, Split::Test, shape, 1000, 3, guess).unwrap();
    std::env::set_var(THREADS_ENV, "3");
    let parallel = evaluate_with(&data, Split::Test, shape, 1000, 3, guess).unwrap();
    std::env::remove_var(THREADS_ENV);
    assert_eq!(serial, parallel);

    let doubled = evaluate_with(&data, Split::Test, shape, 2000, 3, guess).unwrap();
    let ratio = doubled.ci95 / serial.ci95;
    assert!((ratio - 0.5f64.sqrt()).abs() < 0.05, "ratio {ratio}");
    assert_eq!(&doubled.accuracies[..1000], &serial.accuracies[..]);
}

#[test]
fn mismatched_model_and_dataset_are_rejected() {
    let data = synthetic(8, 20, 8, 2, [4, 0, 4]);
    let model = Model::init(BackboneConfig::toy(), 0).unwrap();
    let err = evaluate(&model, &data, Split::Test, EpisodeShape::new(2, 1, 1), 5, 0, 1.0).unwrap_err();
    assert_eq!(err.kind(), "shape");
    let err = evaluate_with(&data, Split::Val, EpisodeShape::new(2, 1, 1), 5, 0, |_, _| Ok(vec![])).unwrap_err();
    assert_eq!(err.kind(), "sampler");
}
