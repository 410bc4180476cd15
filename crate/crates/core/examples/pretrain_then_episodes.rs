//! Supervised pre-training with a linear head, then episodic fine-tuning, with validation
//! based model selection and a checkpoint round trip.
//!
//!     cargo run --release --example pretrain_then_episodes -- [out_dir]

use espt::checkpoint;
use espt::episodes::{generate_synthetic, EpisodeShape, Split, SyntheticSpec};
use espt::evaluation::evaluate;
use espt::optim::LrSchedule;
use espt::training::{train, PretrainConfig, TrainConfig};

fn main() -> espt::Result<()> {
    let out = std::env::args().nth(1).map_or_else(|| std::env::temp_dir().join("espt-pretrain"), Into::into);
    let data = generate_synthetic(&SyntheticSpec { num_classes: 12, samples_per_class: 30, image_side: 16, seed: 4, split: Some([6, 3, 3]) })?;

    let mut config = TrainConfig::desk(EpisodeShape::new(3, 1, 6));
    config.epochs = 6;
    config.episodes_per_epoch = 50;
    config.validation_every = 2;
    config.validation_tasks = 100;
    config.pretrain = Some(PretrainConfig { epochs: 3, batch_size: 16, lr_schedule: LrSchedule::new(vec![(0, 0.05), (2, 0.01)])? });

    let outcome = train(&config, &data, None)?;
    let losses: Vec<String> = outcome.pretrain_losses.iter().map(|l| format!("{l:.3}")).collect();
    println!("pre-training loss per epoch: {}", losses.join(", "));
    for r in outcome.log.iter().filter(|r| r.val_accuracy.is_some()) {
        println!("epoch {}: validation accuracy {:.4}", r.epoch + 1, r.val_accuracy.unwrap_or_default());
    }
    if let Some((epoch, acc)) = outcome.best_validation {
        println!("selected the snapshot after epoch {} ({acc:.4})", epoch + 1);
    }

    let dir = out.join("best");
    checkpoint::save(&outcome.best, &dir, config.precision)?;
    let model = checkpoint::load(&dir)?;
    let report = evaluate(&model, &data, Split::Test, EpisodeShape::new(3, 1, 15), 300, 1, config.lambda_bar)?;
    println!("{} (checkpoint in {})", report.summary(), dir.display());
    Ok(())
}
