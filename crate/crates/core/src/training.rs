//! Episodic training: two-branch objective, SGD steps, optional pre-training and
//! validation-based model selection.

use std::io::Write;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, Bound, Model, ParamKind, ParamSet, TEMPERATURE};
use crate::episodes::{sample_episode, Dataset, Episode, EpisodeShape, Split};
use crate::error::{Error, Result};
use crate::evaluation::{self, argmax};
use crate::graph::{Graph, Var};
use crate::loss::{
    classification_loss, consistency_losses, pretext_loss, reconstruct, split_leading, total_loss, EsptHyperparams,
};
use crate::optim::{LrSchedule, OptimizerConfig, Sgd};
use crate::seeding;
use crate::tensor::blob::Precision;
use crate::tensor::Tensor;
use crate::transforms::{rotate_feature_map, rotate_image, Rotation, TransformSet};

fn default_true() -> bool {
    true
}

fn default_validation_tasks() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub backbone: BackboneConfig,
    pub shape: EpisodeShape,
    /// Rotation degrees the per-episode transform is drawn from.
    pub rotations: TransformSet,
    pub lambda_bar: f64,
    pub alpha: f64,
    /// Detach the original-branch coefficients in the consistency loss.
    #[serde(default = "default_true")]
    pub stop_gradient: bool,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    /// Validate after every this many epochs (and always after the last); 0 disables.
    pub validation_every: usize,
    #[serde(default = "default_validation_tasks")]
    pub validation_tasks: usize,
    /// Episode shape for validation; defaults to the training shape.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation_shape: Option<EpisodeShape>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain: Option<PretrainConfig>,
    #[serde(default)]
    pub precision: Precision,
}

impl TrainConfig {
    /// Small-backbone defaults for synthetic 16×16 data.
    pub fn desk(shape: EpisodeShape) -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            shape,
            rotations: TransformSet::all(),
            lambda_bar: EsptHyperparams::default().lambda_bar,
            alpha: EsptHyperparams::default().alpha,
            stop_gradient: true,
            optimizer: OptimizerConfig::new(LrSchedule::new(vec![(0, 0.05), (15, 0.01)]).expect("valid")),
            epochs: 20,
            episodes_per_epoch: 100,
            validation_every: 5,
            validation_tasks: default_validation_tasks(),
            validation_shape: None,
            seed: 0,
            pretrain: None,
            precision: Precision::F64,
        }
    }

    pub fn hyper(&self) -> EsptHyperparams {
        EsptHyperparams { lambda_bar: self.lambda_bar, alpha: self.alpha }
    }

    pub fn eval_shape(&self) -> EpisodeShape {
        self.validation_shape.unwrap_or(self.shape)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.shape.validate()?;
        self.hyper().validate()?;
        self.optimizer.validate()?;
        if let Some(s) = self.validation_shape {
            s.validate()?;
        }
        if self.episodes_per_epoch == 0 {
            return Err(Error::Config("episodes_per_epoch must be positive".into()));
        }
        if self.validation_every > 0 && self.validation_tasks == 0 {
            return Err(Error::Config("validation_tasks must be positive when validation is enabled".into()));
        }
        if let Some(p) = &self.pretrain {
            if p.batch_size < 2 {
                return Err(Error::Config("pretrain batch_size must be at least 2".into()));
            }
        }
        Ok(())
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        let [c, s, _] = dataset.image_shape;
        if c != self.backbone.in_channels || s != self.backbone.input_size {
            return Err(Error::Config(format!(
                "dataset images are {c}×{s}×{s} but the backbone expects {}×{}×{}",
                self.backbone.in_channels, self.backbone.input_size, self.backbone.input_size
            )));
        }
        dataset.check_episode_shape(Split::Train, self.shape.n, self.shape.k + self.shape.l)?;
        Ok(())
    }
}

/// Options controlling how the two branches are combined.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveOptions<'a> {
    pub stop_gradient: bool,
    /// Fixed original-branch coefficients to compare against instead of recomputing them
    /// from the current parameters.
    pub reference: Option<&'a [Tensor]>,
}

impl Default for ObjectiveOptions<'_> {
    fn default() -> Self {
        Self { stop_gradient: true, reference: None }
    }
}

/// Losses of one episode, recorded on a graph.
pub struct Objective<'g> {
    pub class_loss: Var<'g>,
    /// `None` when no transform was applied.
    pub pretext_loss: Option<Var<'g>>,
    pub total: Var<'g>,
    /// `n_query × n_way`, original branch.
    pub logits: Var<'g>,
    /// Original-branch coefficients in the rotated layout, one per class.
    pub original_coefficients: Vec<Var<'g>>,
}

/// Build the episode objective. The original branch extracts features of the untransformed
/// episode and yields the classification loss; with a `rotation`, the transformed branch
/// extracts features of the rotated episode, and its reconstruction coefficients are pulled
/// toward those of the rotated original feature maps.
pub fn episode_objective<'g>(
    model: &Model,
    params: &Bound<'g>,
    episode: &Episode,
    rotation: Option<Rotation>,
    hyper: EsptHyperparams,
    options: ObjectiveOptions<'_>,
) -> Result<Objective<'g>> {
    let g = params.vars()[0].graph();
    let n = episode.shape.n;
    let ns = episode.num_support();
    let labels = &episode.support_labels;
    let batch = episode.batch();

    let features = model.forward(params, g.constant(batch.clone()))?;
    let (fs, fq) = split_leading(features, ns);
    let original = reconstruct(fs, labels, fq, n, hyper.lambda_bar)?;
    let class_loss = classification_loss(original.logits, params.var(TEMPERATURE), &episode.query_labels);

    let Some(rotation) = rotation else {
        return Ok(Objective {
            class_loss,
            pretext_loss: None,
            total: class_loss,
            logits: original.logits,
            original_coefficients: Vec::new(),
        });
    };
    let turns = rotation.turns();
    let original_coefficients = match options.reference {
        Some(fixed) => {
            if fixed.len() != n {
                return Err(Error::Shape(format!("{} reference coefficient sets for {n} classes", fixed.len())));
            }
            fixed.iter().map(|t| g.constant(t.clone())).collect()
        }
        None => {
            let (rs, rq) = split_leading(rotate_feature_map(features, turns)?, ns);
            reconstruct(rs, labels, rq, n, hyper.lambda_bar)?.coefficients
        }
    };
    let rotated = model.forward(params, g.constant(rotate_image(&batch, turns)?))?;
    let (ts, tq) = split_leading(rotated, ns);
    let transformed = reconstruct(ts, labels, tq, n, hyper.lambda_bar)?;
    let per_query = consistency_losses(&original_coefficients, &transformed.coefficients, transformed.hw, options.stop_gradient);
    let pretext = pretext_loss(per_query);
    Ok(Objective {
        class_loss,
        pretext_loss: Some(pretext),
        total: total_loss(class_loss, pretext, hyper.alpha),
        logits: original.logits,
        original_coefficients,
    })
}

/// Fraction of queries whose largest logit is their label (γ is applied first, so a
/// negative temperature flips the ranking).
fn logits_accuracy(logits: &Tensor, gamma: f64, labels: &[usize]) -> f64 {
    let n = logits.shape()[1];
    let predicted: Vec<usize> =
        logits.data().chunks(n).map(|row| argmax(&row.iter().map(|l| gamma * l).collect::<Vec<_>>())).collect();
    evaluation::accuracy(&predicted, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub class_loss: f64,
    pub pretext_loss: Option<f64>,
    pub total_loss: f64,
    pub accuracy: f64,
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    pub rotation: Option<u32>,
    pub class_loss: f64,
    pub pretext_loss: Option<f64>,
    pub total_loss: f64,
    pub train_accuracy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_accuracy: Option<f64>,
}

/// Everything that changes during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub optimizer: Sgd,
    pub epoch: usize,
    pub iteration: usize,
    pub precision: Precision,
    pub stop_gradient: bool,
}

impl TrainState {
    pub fn new(model: Model, optimizer: &OptimizerConfig, precision: Precision) -> Self {
        let mut model = model;
        quantize(&mut model.params, precision);
        let optimizer = Sgd::new(&model.params, optimizer);
        Self { model, optimizer, epoch: 0, iteration: 0, precision, stop_gradient: true }
    }
}

fn quantize(params: &mut ParamSet, precision: Precision) {
    if precision == Precision::F32 {
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = precision.quantize(*v));
        }
    }
}

/// Compute the episode objective, back-propagate and apply one optimizer update.
/// `rotation = None` trains on the classification loss alone.
pub fn train_step(
    state: &mut TrainState,
    episode: &Episode,
    rotation: Option<Rotation>,
    hyper: EsptHyperparams,
    lr: f64,
) -> Result<StepMetrics> {
    let g = Graph::new();
    let params = state.model.params.bind(&g);
    let options = ObjectiveOptions { stop_gradient: state.stop_gradient, reference: None };
    let obj = episode_objective(&state.model, &params, episode, rotation, hyper, options)?;
    let metrics = StepMetrics {
        class_loss: obj.class_loss.item(),
        pretext_loss: obj.pretext_loss.map(|p| p.item()),
        total_loss: obj.total.item(),
        accuracy: logits_accuracy(&obj.logits.value(), state.model.temperature(), &episode.query_labels),
    };
    let diagnostic = || {
        format!(
            "iteration {} (epoch {}): L_class={} L_pretext={} L_total={} classes={:?} rotation={:?}",
            state.iteration,
            state.epoch,
            metrics.class_loss,
            metrics.pretext_loss.map_or("n/a".to_string(), |v| v.to_string()),
            metrics.total_loss,
            episode.class_ids,
            rotation.map(|r| r.degrees())
        )
    };
    if !metrics.total_loss.is_finite() {
        return Err(Error::NonFinite(format!("non-finite loss at {}", diagnostic())));
    }
    let grads = g.backward(obj.total)?;
    let grads: Vec<Tensor> = params.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    if let Some((p, _)) = state.model.params.iter().zip(&grads).find(|(_, gr)| gr.data().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite(format!("non-finite gradient for {} at {}", p.name, diagnostic())));
    }
    state.optimizer.step(&mut state.model.params, &grads, lr);
    quantize(&mut state.model.params, state.precision);
    state.iteration += 1;
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// Highest-validation snapshot, or the final model when validation is off.
    pub best: Model,
    pub last: Model,
    /// `(epoch, accuracy)` of the selected snapshot.
    pub best_validation: Option<(usize, f64)>,
    pub log: Vec<MetricsRecord>,
    pub pretrain_losses: Vec<f64>,
}

/// Full episodic training loop. Metrics records are appended to `log` as JSON lines when a
/// writer is supplied. All randomness derives from `config.seed`.
pub fn train(config: &TrainConfig, dataset: &Dataset, mut log: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let eval_shape = config.eval_shape();
    let validating = config.validation_every > 0 && !dataset.splits.val.is_empty();
    if validating {
        dataset.check_episode_shape(Split::Val, eval_shape.n, eval_shape.k + eval_shape.l)?;
    }

    let mut model = Model::init(config.backbone.clone(), seeding::derive(config.seed, seeding::INIT))?;
    let pretrain_losses = match &config.pretrain {
        Some(p) => pretrain(&mut model, p, &config.optimizer, dataset, seeding::derive(config.seed, seeding::PRETRAIN))?,
        None => Vec::new(),
    };
    let mut state = TrainState::new(model, &config.optimizer, config.precision);
    state.stop_gradient = config.stop_gradient;
    let hyper = config.hyper();
    let mut episodes = seeding::stream(config.seed, seeding::EPISODES);
    let mut transforms = seeding::stream(config.seed, seeding::TRANSFORMS);
    let val_seed = seeding::derive(config.seed, seeding::VALIDATION);

    let mut records = Vec::with_capacity(config.epochs * config.episodes_per_epoch);
    let mut best: Option<(Model, usize, f64)> = None;
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = config.optimizer.lr_schedule.lr_at(epoch);
        for _ in 0..config.episodes_per_epoch {
            let episode = sample_episode(dataset, Split::Train, config.shape, &mut episodes)?;
            let drawn = config.rotations.sample(&mut transforms);
            let rotation = (config.alpha > 0.0).then_some(drawn);
            let m = train_step(&mut state, &episode, rotation, hyper, lr)?;
            records.push(MetricsRecord {
                iteration: state.iteration,
                epoch,
                lr,
                rotation: rotation.map(|r| r.degrees()),
                class_loss: m.class_loss,
                pretext_loss: m.pretext_loss,
                total_loss: m.total_loss,
                train_accuracy: m.accuracy,
                val_accuracy: None,
            });
        }
        let last_epoch = epoch + 1 == config.epochs;
        if validating && ((epoch + 1) % config.validation_every == 0 || last_epoch) {
            let report = evaluation::evaluate(
                &state.model,
                dataset,
                Split::Val,
                eval_shape,
                config.validation_tasks,
                val_seed,
                config.lambda_bar,
            )?;
            let acc = report.mean_accuracy;
            if let Some(r) = records.last_mut() {
                r.val_accuracy = Some(acc);
            }
            if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
                best = Some((state.model.clone(), epoch, acc));
            }
        }
        if let Some(w) = log.as_deref_mut() {
            let start = records.len() - config.episodes_per_epoch;
            for r in &records[start..] {
                let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::Format(format!("metrics log: {e}")))?;
            }
            w.flush().map_err(|e| Error::Format(format!("metrics log: {e}")))?;
        }
    }
    let last = state.model;
    let (best_model, best_validation) = match best {
        Some((m, e, a)) => (m, Some((e, a))),
        None => (last.clone(), None),
    };
    Ok(TrainOutcome { best: best_model, last, best_validation, log: records, pretrain_losses })
}

/// Linear head on globally average-pooled features.
fn pretrain_head(d: usize, classes: usize, seed: u64) -> ParamSet {
    let mut rng = seeding::stream(seed, 0);
    let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("finite std");
    let mut head = ParamSet::default();
    head.push("head.weight", ParamKind::HeadWeight, Tensor::new(vec![d, classes], (0..d * classes).map(|_| normal.sample(&mut rng)).collect()).expect("shape"));
    head.push("head.bias", ParamKind::HeadBias, Tensor::zeros(&[classes]));
    head
}

/// Mini-batch cross-entropy over all training classes. The head is discarded afterwards.
/// Returns the loss of every batch.
pub fn pretrain(
    model: &mut Model,
    config: &PretrainConfig,
    optimizer: &OptimizerConfig,
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<f64>> {
    let classes = &dataset.splits.train;
    if classes.is_empty() {
        return Err(Error::Config("pre-training needs at least one training class".into()));
    }
    let mut items: Vec<(usize, usize)> = Vec::new();
    for (label, &cid) in classes.iter().enumerate() {
        let class = dataset.class(cid).expect("validated class");
        items.extend((0..class.len()).map(|s| (label, s)));
    }
    let d = model.config.feature_dim();
    let mut head = pretrain_head(d, classes.len(), seed);
    let mut opt = Sgd::new(&model.params, optimizer);
    let mut head_opt = Sgd::new(&head, optimizer);
    let mut rng = seeding::stream(seed, 1);
    let mut losses = Vec::new();
    for epoch in 0..config.epochs {
        let lr = config.lr_schedule.lr_at(epoch);
        items.shuffle(&mut rng);
        for chunk in items.chunks(config.batch_size).filter(|c| c.len() >= 2) {
            let images: Vec<Tensor> =
                chunk.iter().map(|&(label, s)| dataset.class(classes[label]).expect("class").image(s)).collect();
            let labels: Vec<usize> = chunk.iter().map(|&(label, _)| label).collect();
            let batch = Tensor::stack(&images.iter().collect::<Vec<_>>())?;

            let g = Graph::new();
            let params = model.params.bind(&g);
            let hp = head.bind(&g);
            let f = model.forward(&params, g.constant(batch))?;
            let s = f.shape();
            let pooled = f.reshape(&[s[0] * s[1], s[2] * s[3]]).mean_rows().reshape(&[s[0], s[1]]);
            let logits = pooled.matmul(hp.var("head.weight")).add_row(hp.var("head.bias"));
            let logp = logits.log_softmax_rows();
            let c = classes.len();
            let index: Vec<usize> = labels.iter().enumerate().map(|(i, &y)| i * c + y).collect();
            let loss = -logp.gather(index.into(), &[labels.len()]).mean();
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("pre-training loss {value} at epoch {epoch}")));
            }
            losses.push(value);
            let grads = g.backward(loss)?;
            let gp: Vec<Tensor> = params.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            let gh: Vec<Tensor> = hp.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
            opt.step(&mut model.params, &gp, lr);
            head_opt.step(&mut head, &gh, lr);
        }
    }
    Ok(losses)
}
