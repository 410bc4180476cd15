//! Paired-seed sweep over the consistency weight α on the synthetic dataset.
//!
//!     cargo run --release --example alpha_sweep -- [episodes] [seeds]

use espt::ablation::{mean_by_value, run_sweep, write_table, Axis, SweepSpec};
use espt::config::EvalConfig;
use espt::episodes::{generate_synthetic, EpisodeShape, Split, SyntheticSpec};
use espt::training::TrainConfig;

fn main() -> espt::Result<()> {
    let mut args = std::env::args().skip(1);
    let episodes: usize = args.next().map_or(400, |a| a.parse().expect("episodes"));
    let seeds: u64 = args.next().map_or(2, |a| a.parse().expect("seeds"));

    let data = generate_synthetic(&SyntheticSpec { num_classes: 8, samples_per_class: 40, image_side: 16, seed: 7, split: Some([4, 0, 4]) })?;
    let mut base = TrainConfig::desk(EpisodeShape::new(4, 1, 6));
    base.epochs = 10;
    base.episodes_per_epoch = episodes / 10;
    base.validation_every = 0;
    let spec = SweepSpec { axis: Axis::Alpha(vec![0.0, 0.1, 0.3, 1.0]), seeds: (1..=seeds).collect() };
    let eval = EvalConfig { shape: EpisodeShape::new(4, 1, 15), tasks: 300, split: Split::Test, seed: None };

    let rows = run_sweep(&base, &spec, &eval, &data, |r| eprintln!("alpha {} seed {}: {:.4}", r.value, r.seed, r.mean_acc))?;
    write_table(&rows, std::io::stdout())?;
    for (value, mean) in mean_by_value(&rows) {
        eprintln!("alpha {value}: mean accuracy {mean:.4}");
    }
    Ok(())
}
