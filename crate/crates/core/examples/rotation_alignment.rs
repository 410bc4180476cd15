//! Rotating the input of a rotation-equivariant backbone rotates its feature map, so the
//! reconstruction coefficients of the two branches agree and the consistency loss vanishes.
//! A generic backbone does not have this property.
//!
//!     cargo run --release --example rotation_alignment

use espt::backbone::{BackboneConfig, Model};
use espt::episodes::{generate_synthetic, sample_episode, EpisodeShape, Split, SyntheticSpec};
use espt::loss::EsptHyperparams;
use espt::training::{episode_objective, ObjectiveOptions};
use espt::transforms::{rotate_feature_map, rotate_image, TransformSet};
use espt::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> espt::Result<()> {
    let data = generate_synthetic(&SyntheticSpec { num_classes: 4, samples_per_class: 6, image_side: 16, seed: 1, split: Some([4, 0, 0]) })?;
    let episode = sample_episode(&data, Split::Train, EpisodeShape::new(3, 1, 2), &mut ChaCha8Rng::seed_from_u64(2))?;

    for (name, config) in [("kernel-1 backbone", BackboneConfig::equivariant_toy()), ("3x3 backbone", BackboneConfig::toy())] {
        let model = Model::init(config, 0)?;
        println!("{name}");
        for &rotation in TransformSet::all().members() {
            let turns = rotation.turns();
            let g = Graph::new();
            let rotated_then_extracted = model.extract(&rotate_image(&episode.batch(), turns)?)?;
            let extracted = g.constant(model.extract(&episode.batch())?);
            let extracted_then_rotated = rotate_feature_map(extracted, turns)?.value();
            let gap = rotated_then_extracted.zip_map(&extracted_then_rotated, |a, b| a - b).max_abs();

            let bound = model.params.bind(&g);
            let obj = episode_objective(&model, &bound, &episode, Some(rotation), EsptHyperparams::default(), ObjectiveOptions::default())?;
            println!(
                "  {rotation:>4}: max |f(rot x) - rot f(x)| = {gap:.2e}, L_pretext = {:.2e}",
                obj.pretext_loss.expect("rotation given").item()
            );
        }
    }
    Ok(())
}
