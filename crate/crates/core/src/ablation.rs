//! Paired-seed sweeps over the pretext weight α or the transform set U.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::episodes::Dataset;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalReport};
use crate::seeding;
use crate::training::{train, TrainConfig};
use crate::transforms::TransformSet;

use crate::config::EvalConfig;

/// The swept hyperparameter and its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Axis {
    Alpha(Vec<f64>),
    Transforms(Vec<TransformSet>),
}

impl Axis {
    /// Every nonempty subset of {90°, 180°, 270°}, in table order.
    pub fn all_transform_subsets() -> Self {
        Axis::Transforms(TransformSet::all_subsets())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Axis::Alpha(_) => "alpha",
            Axis::Transforms(_) => "transforms",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Axis::Alpha(v) => v.len(),
            Axis::Transforms(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, i: usize) -> String {
        match self {
            Axis::Alpha(v) => v[i].to_string(),
            Axis::Transforms(v) => v[i].to_string(),
        }
    }

    /// `base` with the `i`-th axis value applied.
    pub fn apply(&self, base: &TrainConfig, i: usize) -> TrainConfig {
        let mut cfg = base.clone();
        match self {
            Axis::Alpha(v) => cfg.alpha = v[i],
            Axis::Transforms(v) => cfg.rotations = v[i].clone(),
        }
        cfg
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let labels: Vec<String> = (0..self.len()).map(|i| self.label(i)).collect();
        write!(f, "{} = [{}]", self.name(), labels.join(", "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn validate(&self, base: &TrainConfig) -> Result<()> {
        if self.axis.is_empty() {
            return Err(Error::Config(format!("sweep axis {} has no values", self.axis.name())));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        for i in 0..self.axis.len() {
            self.axis.apply(base, i).validate().map_err(|e| e.context(format!("{} = {}", self.axis.name(), self.axis.label(i))))?;
        }
        Ok(())
    }
}

/// One trained-and-evaluated cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub mean_acc: f64,
    pub ci: f64,
}

/// Seed used to evaluate cells trained with master seed `seed`.
pub fn eval_seed(eval: &EvalConfig, seed: u64) -> u64 {
    eval.seed.unwrap_or_else(|| seeding::derive(seed, seeding::TEST))
}

/// Train and evaluate one model per (axis value, seed). Cells that share a seed share the
/// dataset, the episode stream, the initialization and the evaluation tasks. `progress` is
/// called after every finished cell.
pub fn run_sweep(
    base: &TrainConfig,
    spec: &SweepSpec,
    eval: &EvalConfig,
    dataset: &Dataset,
    mut progress: impl FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    spec.validate(base)?;
    let mut rows = Vec::with_capacity(spec.axis.len() * spec.seeds.len());
    for i in 0..spec.axis.len() {
        for &seed in &spec.seeds {
            let label = spec.axis.label(i);
            let cell = || -> Result<EvalReport> {
                let mut cfg = spec.axis.apply(base, i);
                cfg.seed = seed;
                let out = train(&cfg, dataset, None)?;
                evaluate(&out.best, dataset, eval.split, eval.shape, eval.tasks, eval_seed(eval, seed), cfg.lambda_bar)
            };
            let report = cell().map_err(|e| e.context(format!("sweep point {} = {label}, seed {seed}", spec.axis.name())))?;
            let row = SweepRow {
                axis: spec.axis.name().to_string(),
                value: label,
                seed,
                mean_acc: report.mean_accuracy,
                ci: report.ci95,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Write rows as a delimited table with header `axis,value,seed,mean_acc,ci`.
pub fn write_table<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(["axis", "value", "seed", "mean_acc", "ci"]).map_err(|e| Error::Format(e.to_string()))?;
    }
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Mean accuracy per axis value, averaged over seeds, in axis order.
pub fn mean_by_value(rows: &[SweepRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows {
        match out.iter_mut().find(|(v, _, _)| *v == r.value) {
            Some(slot) => {
                slot.1 += r.mean_acc;
                slot.2 += 1;
            }
            None => out.push((r.value.clone(), r.mean_acc, 1)),
        }
    }
    out.into_iter().map(|(v, s, n)| (v, s / n as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episodes::{generate_synthetic, EpisodeShape, Split, SyntheticSpec};

    #[test]
    fn transform_axis_layout() {
        let axis = Axis::all_transform_subsets();
        assert_eq!(axis.len(), 7);
        assert_eq!(axis.label(0), "{90}");
        assert_eq!(axis.label(6), "{90;180;270}");
        let text = toml::to_string(&SweepSpec { axis, seeds: vec![1] }).unwrap();
        let back: SweepSpec = toml::from_str(&text).unwrap();
        assert_eq!(back.axis.len(), 7);
    }

    #[test]
    fn table_header_and_means() {
        let row = |v: &str, s, a| SweepRow { axis: "alpha".into(), value: v.into(), seed: s, mean_acc: a, ci: 0.01 };
        let rows = vec![row("0", 1, 0.5), row("0", 2, 0.7), row("0.3", 1, 0.6)];
        let mut buf = Vec::new();
        write_table(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("axis,value,seed,mean_acc,ci\nalpha,0,1,0.5,0.01\n"));
        let means = mean_by_value(&rows);
        assert_eq!(means[0].0, "0");
        assert!((means[0].1 - 0.6).abs() < 1e-15);
    }

    #[test]
    fn identical_values_give_identical_rows() {
        let data = generate_synthetic(&SyntheticSpec { num_classes: 4, samples_per_class: 6, image_side: 16, seed: 1, split: Some([2, 0, 2]) })
            .unwrap();
        let mut base = TrainConfig::desk(EpisodeShape::new(2, 1, 2));
        base.epochs = 1;
        base.episodes_per_epoch = 2;
        base.validation_every = 0;
        let eval = EvalConfig { shape: EpisodeShape::new(2, 1, 2), tasks: 5, split: Split::Test, seed: None };
        let spec = SweepSpec { axis: Axis::Alpha(vec![0.3, 0.3]), seeds: vec![4] };
        let rows = run_sweep(&base, &spec, &eval, &data, |_| {}).unwrap();
        assert_eq!(rows[0].mean_acc, rows[1].mean_acc);

        let bad = SweepSpec { axis: Axis::Alpha(vec![-1.0]), seeds: vec![4] };
        let err = run_sweep(&base, &bad, &eval, &data, |_| {}).unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("alpha = -1"), "{err}");
    }
}
