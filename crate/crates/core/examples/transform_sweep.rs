//! Train with each nonempty subset of {90°, 180°, 270°} as the transform pool.
//!
//!     cargo run --release --example transform_sweep -- [episodes]

use espt::ablation::{mean_by_value, run_sweep, Axis, SweepSpec};
use espt::config::EvalConfig;
use espt::episodes::{generate_synthetic, EpisodeShape, Split, SyntheticSpec};
use espt::training::TrainConfig;

fn main() -> espt::Result<()> {
    let episodes: usize = std::env::args().nth(1).map_or(300, |a| a.parse().expect("episodes"));
    let data = generate_synthetic(&SyntheticSpec { num_classes: 8, samples_per_class: 40, image_side: 16, seed: 7, split: Some([4, 0, 4]) })?;
    let mut base = TrainConfig::desk(EpisodeShape::new(4, 1, 6));
    base.epochs = 10;
    base.episodes_per_epoch = episodes / 10;
    base.validation_every = 0;
    let spec = SweepSpec { axis: Axis::all_transform_subsets(), seeds: vec![1] };
    let eval = EvalConfig { shape: EpisodeShape::new(4, 1, 15), tasks: 300, split: Split::Test, seed: None };

    let rows = run_sweep(&base, &spec, &eval, &data, |_| {})?;
    println!("{:<14} {:>8}", "U", "accuracy");
    for (value, mean) in mean_by_value(&rows) {
        println!("{value:<14} {:>7.2}%", 100.0 * mean);
    }
    Ok(())
}
