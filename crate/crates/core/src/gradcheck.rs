//! Central finite-difference checks of the episode objective's gradients.

use serde::Serialize;

use crate::backbone::{BackboneConfig, Model};
use crate::episodes::{generate_synthetic, sample_episode, Episode, EpisodeShape, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::EsptHyperparams;
use crate::seeding;
use crate::tensor::Tensor;
use crate::training::{episode_objective, ObjectiveOptions};
use crate::transforms::Rotation;

pub const DEFAULT_STEP: f64 = 1e-4;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor of [`relative_error`].
pub const DEFAULT_FLOOR: f64 = 1e-6;
/// Successive step reductions tried when a stencil crosses a kink.
const REFINEMENTS: [f64; 3] = [1e-1, 1e-2, 1e-3];

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// A model, an episode and a transform to differentiate at.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: Model,
    pub episode: Episode,
    pub rotation: Rotation,
    pub hyper: EsptHyperparams,
}

impl Problem {
    /// 2-way 1-shot episode of 16×16 synthetic images on the 2-block toy backbone.
    pub fn toy(seed: u64) -> Result<Self> {
        let data = generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            samples_per_class: 4,
            image_side: 16,
            seed,
            split: Some([4, 0, 0]),
        })?;
        let mut rng = seeding::stream(seed, seeding::EPISODES);
        let episode = sample_episode(&data, Split::Train, EpisodeShape::new(2, 1, 2), &mut rng)?;
        Ok(Self {
            model: Model::init(BackboneConfig::toy(), seeding::derive(seed, seeding::INIT))?,
            episode,
            rotation: Rotation::QUARTER,
            hyper: EsptHyperparams::default(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Losses {
    pub class: f64,
    pub pretext: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub coords: usize,
    /// Coordinates whose stencil at the nominal step crossed a kink and were re-checked
    /// with a smaller step.
    pub refined: usize,
    /// Coordinates for which no tried step avoided a kink.
    pub unresolved: usize,
    /// Largest relative error per loss.
    pub class: f64,
    pub pretext: f64,
    pub total: f64,
}

impl ParamReport {
    pub fn max(&self) -> f64 {
        self.class.max(self.pretext).max(self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub step: f64,
    pub floor: f64,
    pub params: Vec<ParamReport>,
}

impl Report {
    pub fn max(&self) -> f64 {
        self.params.iter().map(ParamReport::max).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max() < tolerance && self.unresolved() == 0
    }

    pub fn refined(&self) -> usize {
        self.params.iter().map(|p| p.refined).sum()
    }

    pub fn unresolved(&self) -> usize {
        self.params.iter().map(|p| p.unresolved).sum()
    }

    pub fn coords(&self) -> usize {
        self.params.iter().map(|p| p.coords).sum()
    }
}

/// Loss values with the original-branch coefficients pinned to `reference`. Since the
/// consistency loss stops gradients at those coefficients, this is the function whose
/// derivative back-propagation computes. Also returns the activation pattern.
pub fn losses_at(problem: &Problem, model: &Model, reference: &[Tensor]) -> Result<(Losses, u64)> {
    let g = Graph::new();
    let bound = model.params.bind_frozen(&g);
    let options = ObjectiveOptions { stop_gradient: true, reference: Some(reference) };
    let obj = episode_objective(model, &bound, &problem.episode, Some(problem.rotation), problem.hyper, options)?;
    let losses = Losses {
        class: obj.class_loss.item(),
        pretext: obj.pretext_loss.expect("rotation given").item(),
        total: obj.total.item(),
    };
    Ok((losses, g.activation_pattern()))
}

/// Analytic gradients of the three losses, in parameter order, and the reference
/// coefficients.
pub fn analytic(problem: &Problem) -> Result<([Vec<Tensor>; 3], Vec<Tensor>)> {
    let g = Graph::new();
    let bound = problem.model.params.bind(&g);
    let obj = episode_objective(
        &problem.model,
        &bound,
        &problem.episode,
        Some(problem.rotation),
        problem.hyper,
        ObjectiveOptions::default(),
    )?;
    let reference = obj.original_coefficients.iter().map(|v| (*v.value()).clone()).collect();
    let pretext = obj.pretext_loss.expect("rotation given");
    let mut out: [Vec<Tensor>; 3] = Default::default();
    for (slot, loss) in out.iter_mut().zip([obj.class_loss, pretext, obj.total]) {
        let grads = g.backward(loss)?;
        *slot = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();
    }
    Ok((out, reference))
}

/// Compare every gradient coordinate of every parameter against central differences with
/// `step`. Where the stencil `x ± step` changes the activation pattern (so the function is
/// not smooth across it), the coordinate is re-checked with successively smaller steps.
pub fn check(problem: &Problem, step: f64, floor: f64) -> Result<Report> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let ([gc, gp, gt], reference) = analytic(problem)?;
    let mut model = problem.model.clone();
    let (_, base_pattern) = losses_at(problem, &model, &reference)?;
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).collect();
    let mut reports = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        let len = model.params.iter().nth(i).expect("index").value.len();
        let mut worst = [0.0f64; 3];
        let (mut refined, mut unresolved) = (0, 0);
        for j in 0..len {
            let x0 = model.params.iter().nth(i).expect("index").value.data()[j];
            let mut at = |x: f64| -> Result<(Losses, u64)> {
                model.params.iter_mut().nth(i).expect("index").value.data_mut()[j] = x;
                losses_at(problem, &model, &reference)
            };
            let mut numeric = [0.0; 3];
            let mut smooth = false;
            for (attempt, h) in std::iter::once(step).chain(REFINEMENTS.iter().map(|r| step * r)).enumerate() {
                let (plus, pp) = at(x0 + h)?;
                let (minus, pm) = at(x0 - h)?;
                numeric = [
                    (plus.class - minus.class) / (2.0 * h),
                    (plus.pretext - minus.pretext) / (2.0 * h),
                    (plus.total - minus.total) / (2.0 * h),
                ];
                if pp == base_pattern && pm == base_pattern {
                    refined += (attempt > 0) as usize;
                    smooth = true;
                    break;
                }
            }
            at(x0)?;
            if !smooth {
                refined += 1;
                unresolved += 1;
            }
            for (w, (num, grads)) in worst.iter_mut().zip(numeric.iter().zip([&gc, &gp, &gt])) {
                *w = w.max(relative_error(grads[i].data()[j], *num, floor));
            }
        }
        reports.push(ParamReport {
            name: name.clone(),
            coords: len,
            refined,
            unresolved,
            class: worst[0],
            pretext: worst[1],
            total: worst[2],
        });
    }
    Ok(Report { step, floor, params: reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn pinned_reference_matches_live_objective() {
        let p = Problem::toy(5).unwrap();
        let (_, reference) = analytic(&p).unwrap();
        let (pinned, _) = losses_at(&p, &p.model, &reference).unwrap();
        let g = Graph::new();
        let bound = p.model.params.bind_frozen(&g);
        let live = episode_objective(&p.model, &bound, &p.episode, Some(p.rotation), p.hyper, ObjectiveOptions::default()).unwrap();
        assert_eq!(pinned.total, live.total.item());
    }
}
