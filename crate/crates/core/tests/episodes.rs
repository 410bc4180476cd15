mod common;

use std::collections::HashSet;
use std::fs;

use common::synthetic;
use espt::episodes::{load_dataset, sample_episode, save_dataset, DatasetManifest, EpisodeShape, Split};
use espt::tensor::blob::Precision;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn episodes_respect_splits_and_never_reuse_an_image() {
    let data = synthetic(12, 10, 8, 1, [6, 3, 3]);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for split in [Split::Train, Split::Val, Split::Test] {
        let allowed: HashSet<usize> = data.splits.get(split).iter().copied().collect();
        for _ in 0..1000 {
            let shape = EpisodeShape::new(3, 2, 4);
            let ep = sample_episode(&data, split, shape, &mut rng).unwrap();
            let classes: HashSet<usize> = ep.class_ids.iter().copied().collect();
            assert_eq!(classes.len(), 3);
            assert!(classes.is_subset(&allowed));
            let mut seen = HashSet::new();
            for (i, &(cid, s)) in ep.support_sources.iter().chain(&ep.query_sources).enumerate() {
                assert!(seen.insert((cid, s)), "image ({cid}, {s}) drawn twice");
                let label = if i < ep.num_support() { ep.support_labels[i] } else { ep.query_labels[i - ep.num_support()] };
                assert_eq!(ep.class_ids[label], cid);
            }
            assert_eq!(ep.support.shape(), &[6, 1, 8, 8]);
            assert_eq!(ep.query.shape(), &[12, 1, 8, 8]);
            let first = &ep.query_sources[0];
            assert_eq!(ep.query.index_axis0(0), data.class(first.0).unwrap().image(first.1));
        }
    }
}

#[test]
fn classes_are_drawn_uniformly() {
    let data = synthetic(8, 4, 8, 3, [4, 0, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let episodes = 10_000;
    let mut counts = [0usize; 8];
    for _ in 0..episodes {
        let ep = sample_episode(&data, Split::Train, EpisodeShape::new(2, 1, 1), &mut rng).unwrap();
        for c in ep.class_ids {
            counts[c] += 1;
        }
    }
    // Each train class appears with probability 1/2 per episode.
    let (mean, sd) = (episodes as f64 * 0.5, (episodes as f64 * 0.25).sqrt());
    for &c in &data.splits.train {
        assert!((counts[c] as f64 - mean).abs() <= 3.0 * sd, "class {c}: {} draws", counts[c]);
    }
    for &c in &data.splits.test {
        assert_eq!(counts[c], 0);
    }
}

#[test]
fn raw_pixel_nearest_centroid_beats_chance() {
    let data = synthetic(8, 30, 16, 5, [4, 0, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut hits, mut total) = (0usize, 0usize);
    for _ in 0..300 {
        let ep = sample_episode(&data, Split::Test, EpisodeShape::new(2, 1, 10), &mut rng).unwrap();
        let px = ep.support.data().len() / 2;
        for (q, &y) in ep.query_labels.iter().enumerate() {
            let image = &ep.query.data()[q * px..(q + 1) * px];
            let dist = |c: usize| -> f64 { ep.support.data()[c * px..(c + 1) * px].iter().zip(image).map(|(a, b)| (a - b).powi(2)).sum() };
            let guess = usize::from(dist(1) < dist(0));
            hits += usize::from(guess == y);
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc > 0.55, "raw-pixel accuracy {acc}");
}

#[test]
fn storage_round_trip_and_damage_detection() {
    let data = synthetic(6, 5, 8, 7, [3, 1, 2]);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&data, &dir.path().join("f64"), Precision::F64).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), data);

    let manifest32 = save_dataset(&data, &dir.path().join("f32"), Precision::F32).unwrap();
    let back = load_dataset(&manifest32).unwrap();
    for (a, b) in back.classes.iter().zip(&data.classes) {
        assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| *x == (*y as f32) as f64));
    }

    let text = fs::read_to_string(&manifest).unwrap();
    let mut m: DatasetManifest = toml::from_str(&text).unwrap();
    m.classes[2].samples += 1;
    fs::write(&manifest, toml::to_string(&m).unwrap()).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert_eq!(err.kind(), "load", "{err}");

    m.classes[2].samples -= 1;
    m.splits.test.push(m.splits.train[0]);
    fs::write(&manifest, toml::to_string(&m).unwrap()).unwrap();
    assert!(load_dataset(&manifest).is_err());

    m.splits.test.pop();
    fs::write(&manifest, toml::to_string(&m).unwrap()).unwrap();
    fs::remove_file(manifest.parent().unwrap().join(&m.classes[0].blob)).unwrap();
    let err = load_dataset(&manifest).unwrap_err();
    assert!(err.to_string().contains("missing blob"), "{err}");
}

#[test]
fn undersized_splits_are_reported_with_the_deficit() {
    let data = synthetic(6, 5, 8, 7, [3, 1, 2]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_episode(&data, Split::Test, EpisodeShape::new(3, 1, 1), &mut rng).unwrap_err();
    assert!(err.to_string().contains("short by 1"), "{err}");
    let err = sample_episode(&data, Split::Train, EpisodeShape::new(2, 3, 3), &mut rng).unwrap_err();
    assert!(err.to_string().contains("short by 1"), "{err}");
    assert_eq!(err.kind(), "sampler");
}
