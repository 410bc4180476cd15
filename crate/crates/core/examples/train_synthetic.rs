//! Train a small backbone on the synthetic dataset and evaluate on its novel classes.
//!
//!     cargo run --release --example train_synthetic -- [alpha] [episodes]

use std::time::Instant;

use espt::episodes::{generate_synthetic, EpisodeShape, Split, SyntheticSpec};
use espt::evaluation::evaluate;
use espt::training::{train, TrainConfig};

fn main() -> espt::Result<()> {
    let mut args = std::env::args().skip(1);
    let alpha: f64 = args.next().map_or(0.3, |a| a.parse().expect("alpha"));
    let episodes: usize = args.next().map_or(500, |a| a.parse().expect("episodes"));

    let spec = SyntheticSpec { num_classes: 8, samples_per_class: 40, image_side: 16, seed: 7, split: Some([4, 0, 4]) };
    let data = generate_synthetic(&spec)?;

    let mut config = TrainConfig::desk(EpisodeShape::new(4, 1, 6));
    config.alpha = alpha;
    config.epochs = 10;
    config.episodes_per_epoch = episodes / 10;
    config.validation_every = 0;

    let started = Instant::now();
    let out = train(&config, &data, None)?;
    let elapsed = started.elapsed();
    let tail = &out.log[out.log.len().saturating_sub(50)..];
    let mean = |f: fn(&espt::training::MetricsRecord) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    println!(
        "{} steps in {:.1}s ({:.1} ms/step); last 50: L_class {:.3}, train acc {:.3}",
        out.log.len(),
        elapsed.as_secs_f64(),
        1e3 * elapsed.as_secs_f64() / out.log.len().max(1) as f64,
        mean(|r| r.class_loss),
        mean(|r| r.train_accuracy),
    );

    let report = evaluate(&out.best, &data, Split::Test, EpisodeShape::new(4, 1, 15), 500, 11, config.lambda_bar)?;
    println!("{}", report.summary());
    Ok(())
}
