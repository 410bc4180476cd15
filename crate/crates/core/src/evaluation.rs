//! Original-branch inference and many-task accuracy estimation with 95% confidence intervals.

use std::io::Write;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeShape, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{predict_proba, reconstruct, split_leading};
use crate::seeding;

/// Environment variable capping evaluation worker threads.
pub const THREADS_ENV: &str = "ESPT_THREADS";

/// Worker pool sized by `ESPT_THREADS` when set, otherwise by the machine.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Class probabilities for every query, using the untransformed images only.
pub fn predict_proba_episode(model: &Model, episode: &Episode, lambda_bar: f64) -> Result<Vec<Vec<f64>>> {
    let g = Graph::new();
    let params = model.params.bind_frozen(&g);
    let features = model.forward(&params, g.constant(episode.batch()))?;
    let (fs, fq) = split_leading(features, episode.num_support());
    let recon = reconstruct(fs, &episode.support_labels, fq, episode.shape.n, lambda_bar)?;
    let logits = recon.logits.value();
    let n = episode.shape.n;
    let gamma = model.temperature();
    Ok(logits.data().chunks(n).map(|row| predict_proba(row, gamma)).collect())
}

/// Index of the largest value; the first wins ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

/// Episode-local predicted label for every query.
pub fn predict(model: &Model, episode: &Episode, lambda_bar: f64) -> Result<Vec<usize>> {
    Ok(predict_proba_episode(model, episode, lambda_bar)?.iter().map(|p| argmax(p)).collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    assert_eq!(predicted.len(), labels.len(), "one prediction per label");
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Mean and 95% half-width `1.96·s/√N`, with `s` the sample standard deviation.
/// A single value has half-width 0.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "no values");
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub shape: EpisodeShape,
    pub num_tasks: usize,
    pub seed: u64,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct EvalRow {
    split: Split,
    n: usize,
    k: usize,
    l: usize,
    num_tasks: usize,
    seed: u64,
    mean_acc: f64,
    ci: f64,
}

impl EvalReport {
    pub fn from_accuracies(split: Split, shape: EpisodeShape, seed: u64, accuracies: Vec<f64>) -> Self {
        let (mean_accuracy, ci95) = mean_ci95(&accuracies);
        Self { split, shape, num_tasks: accuracies.len(), seed, mean_accuracy, ci95, accuracies }
    }

    pub fn summary(&self) -> String {
        format!(
            "{}-way {}-shot ({} queries/class) on {}: {:.2}% ± {:.2}% over {} tasks",
            self.shape.n,
            self.shape.k,
            self.shape.l,
            self.split,
            100.0 * self.mean_accuracy,
            100.0 * self.ci95,
            self.num_tasks
        )
    }

    /// Append this report as one row of a delimited table, writing the header when asked.
    pub fn write_csv_row<W: Write>(&self, out: W, header: bool) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(header).from_writer(out);
        w.serialize(EvalRow {
            split: self.split,
            n: self.shape.n,
            k: self.shape.k,
            l: self.shape.l,
            num_tasks: self.num_tasks,
            seed: self.seed,
            mean_acc: self.mean_accuracy,
            ci: self.ci95,
        })
        .map_err(|e| Error::Format(e.to_string()))?;
        w.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Run `predictor` on `num_tasks` episodes. Task `i` draws its episode (and anything else
/// the predictor needs) from its own stream of `seed`, so results do not depend on how
/// tasks are spread over workers.
pub fn evaluate_with<F>(
    dataset: &Dataset,
    split: Split,
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
    predictor: F,
) -> Result<EvalReport>
where
    F: Fn(&Episode, &mut ChaCha8Rng) -> Result<Vec<usize>> + Sync,
{
    if num_tasks == 0 {
        return Err(Error::Config("evaluation needs at least one task".into()));
    }
    dataset.check_episode_shape(split, shape.n, shape.k + shape.l)?;
    let pool = thread_pool()?;
    let accuracies: Vec<f64> = pool.install(|| {
        (0..num_tasks)
            .into_par_iter()
            .map(|task| {
                let mut rng = seeding::stream(seed, task as u64);
                let episode = sample_episode(dataset, split, shape, &mut rng)?;
                let predicted = predictor(&episode, &mut rng)?;
                Ok(accuracy(&predicted, &episode.query_labels))
            })
            .collect::<Result<_>>()
    })?;
    Ok(EvalReport::from_accuracies(split, shape, seed, accuracies))
}

/// Mean top-1 accuracy of `model` over `num_tasks` random episodes of `split`.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split: Split,
    shape: EpisodeShape,
    num_tasks: usize,
    seed: u64,
    lambda_bar: f64,
) -> Result<EvalReport> {
    let [c, s, _] = dataset.image_shape;
    if c != model.config.in_channels || s != model.config.input_size {
        return Err(Error::Shape(format!(
            "dataset images are {c}×{s}×{s}, model expects {}×{}×{}",
            model.config.in_channels, model.config.input_size, model.config.input_size
        )));
    }
    evaluate_with(dataset, split, shape, num_tasks, seed, |episode, _| predict(model, episode, lambda_bar))
}
