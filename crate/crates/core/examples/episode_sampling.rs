//! Generate the procedural dataset, save it, reload it and draw a few episodes.
//!
//!     cargo run --release --example episode_sampling -- [out_dir]

use espt::episodes::{generate_synthetic, load_dataset, sample_episode, save_dataset, synthetic_family, EpisodeShape, Split, SyntheticSpec};
use espt::tensor::blob::Precision;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> espt::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("espt-episodes"), Into::into);
    let spec = SyntheticSpec { num_classes: 12, samples_per_class: 20, image_side: 16, seed: 3, split: None };
    let data = generate_synthetic(&spec)?;
    let manifest = save_dataset(&data, &out, Precision::F32)?;
    let data = load_dataset(&manifest)?;
    println!("{} images in {} classes, stored at {}", data.num_images(), data.classes.len(), manifest.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        let names: Vec<String> = data.splits.get(split).iter().map(|&c| data.class(c).expect("class").name.clone()).collect();
        println!("  {split:<5} {}", names.join(", "));
    }
    let (shape, texture) = synthetic_family(5);
    println!("class 5 uses shape {shape} and texture {texture}");

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let shape = EpisodeShape::new(3, 2, 4);
    for i in 0..3 {
        let ep = sample_episode(&data, Split::Train, shape, &mut rng)?;
        println!(
            "episode {i} ({shape}): classes {:?}, support {:?}, query {:?}, first support images {:?}",
            ep.class_ids,
            ep.support.shape(),
            ep.query.shape(),
            &ep.support_sources[..2]
        );
    }
    Ok(())
}
