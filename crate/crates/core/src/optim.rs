//! SGD with Nesterov momentum, decoupled-by-kind weight decay and a staged learning rate.

use serde::{Deserialize, Serialize};

use crate::backbone::ParamSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Piecewise-constant learning rate: each `(epoch, lr)` stage applies from `epoch` until
/// the next stage begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(usize, f64)>", into = "Vec<(usize, f64)>")]
pub struct LrSchedule {
    stages: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn new(stages: Vec<(usize, f64)>) -> Result<Self> {
        match stages.first() {
            None => return Err(Error::Config("learning-rate schedule is empty".into())),
            Some(&(e, _)) if e != 0 => {
                return Err(Error::Config(format!("learning-rate schedule must start at epoch 0, starts at {e}")))
            }
            _ => {}
        }
        for w in stages.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "learning-rate schedule epochs must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(e, lr)) = stages.iter().find(|(_, lr)| !(*lr > 0.0 && lr.is_finite())) {
            return Err(Error::Config(format!("learning rate at epoch {e} must be positive, got {lr}")));
        }
        Ok(Self { stages })
    }

    pub fn constant(lr: f64) -> Result<Self> {
        Self::new(vec![(0, lr)])
    }

    pub fn stages(&self) -> &[(usize, f64)] {
        &self.stages
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.stages.iter().rev().find(|(e, _)| *e <= epoch).map(|&(_, lr)| lr).expect("stage 0 exists")
    }
}

impl TryFrom<Vec<(usize, f64)>> for LrSchedule {
    type Error = Error;
    fn try_from(v: Vec<(usize, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LrSchedule> for Vec<(usize, f64)> {
    fn from(s: LrSchedule) -> Self {
        s.stages
    }
}

fn default_nesterov() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_schedule: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(default = "default_nesterov")]
    pub nesterov: bool,
}

impl OptimizerConfig {
    pub fn new(lr_schedule: LrSchedule) -> Self {
        Self { lr_schedule, momentum: 0.9, weight_decay: 5e-4, nesterov: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Velocity slots, one per parameter tensor, in [`ParamSet`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(params: &ParamSet, config: &OptimizerConfig) -> Self {
        Self {
            momentum: config.momentum,
            weight_decay: config.weight_decay,
            nesterov: config.nesterov,
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// One update. Weight decay is added to the gradient only for kinds that decay:
    ///
    /// ```text
    /// g = ∇ + wd·p      v = μ·v + g      p -= lr·(g + μ·v)   (Nesterov)
    ///                                     p -= lr·v          (plain momentum)
    /// ```
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per parameter");
        let (mu, wd) = (self.momentum, self.weight_decay);
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            assert_eq!(p.value.shape(), g.shape(), "gradient shape for {}", p.name);
            let decay = if p.kind.decays() { wd } else { 0.0 };
            let pv = p.value.data_mut();
            for ((x, &gi), vi) in pv.iter_mut().zip(g.data()).zip(v.data_mut()) {
                let gi = gi + decay * *x;
                *vi = mu * *vi + gi;
                let dir = if self.nesterov { gi + mu * *vi } else { *vi };
                *x -= lr * dir;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ParamKind;

    fn scalar_set(kind: ParamKind, x: f64) -> ParamSet {
        let mut ps = ParamSet::default();
        ps.push("x", kind, Tensor::scalar(x));
        ps
    }

    #[test]
    fn nesterov_on_scalar_quadratic() {
        // f(x) = x², gradient 2x, from x = 1 with lr 0.1 and μ = 0.9
        let mut ps = scalar_set(ParamKind::Temperature, 1.0);
        let mut cfg = OptimizerConfig::new(LrSchedule::constant(0.1).unwrap());
        cfg.weight_decay = 0.0;
        let mut opt = Sgd::new(&ps, &cfg);
        let expected = [(2.0, 0.62), (3.04, 0.2224), (3.1808, -0.108352)];
        for (v_want, x_want) in expected {
            let x = ps.get("x").unwrap().value.item();
            opt.step(&mut ps, &[Tensor::scalar(2.0 * x)], 0.1);
            let x = ps.get("x").unwrap().value.item();
            assert!((opt.velocity()[0].item() - v_want).abs() < 1e-12);
            assert!((x - x_want).abs() < 1e-12, "{x} vs {x_want}");
        }
    }

    #[test]
    fn decay_only_touches_weights() {
        let cfg = OptimizerConfig::new(LrSchedule::constant(0.1).unwrap());
        for (kind, moves) in [
            (ParamKind::ConvWeight, true),
            (ParamKind::HeadWeight, true),
            (ParamKind::NormScale, false),
            (ParamKind::NormShift, false),
            (ParamKind::Temperature, false),
            (ParamKind::HeadBias, false),
        ] {
            let mut ps = scalar_set(kind, 2.0);
            let mut opt = Sgd::new(&ps, &cfg);
            opt.step(&mut ps, &[Tensor::scalar(0.0)], 0.1);
            assert_eq!(ps.get("x").unwrap().value.item() != 2.0, moves, "{kind:?}");
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let mut ps = scalar_set(ParamKind::ConvWeight, 0.7);
        let cfg = OptimizerConfig::new(LrSchedule::constant(0.1).unwrap());
        let mut opt = Sgd::new(&ps, &cfg);
        opt.step(&mut ps, &[Tensor::scalar(3.0)], 0.0);
        assert_eq!(ps.get("x").unwrap().value.item(), 0.7);
    }

    #[test]
    fn schedule() {
        let s = LrSchedule::new(vec![(0, 0.1), (10, 0.01), (20, 0.001)]).unwrap();
        assert_eq!((s.lr_at(0), s.lr_at(9), s.lr_at(10), s.lr_at(99)), (0.1, 0.1, 0.01, 0.001));
        assert!(LrSchedule::new(vec![]).is_err());
        assert!(LrSchedule::new(vec![(1, 0.1)]).is_err());
        assert!(LrSchedule::new(vec![(0, 0.1), (0, 0.2)]).is_err());
        assert!(LrSchedule::new(vec![(0, 0.0)]).is_err());
    }
}
