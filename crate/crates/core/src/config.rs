//! Run and sweep configuration files (TOML).
//!
//! ```toml
//! dataset = "data/manifest.toml"   # relative to this file
//! out_dir = "runs/espt"
//!
//! [train]
//! shape = { n = 4, k = 1, l = 6 }
//! rotations = [90, 180, 270]
//! lambda_bar = 1.0
//! alpha = 0.3
//! epochs = 20
//! episodes_per_epoch = 100
//! validation_every = 5
//! seed = 0
//! [train.backbone]
//! in_channels = 1
//! input_size = 16
//! rescale = true
//! blocks = [{ filters = 8, convs_per_block = 2, kernel = 3 }, { filters = 16, convs_per_block = 2, kernel = 3 }]
//! [train.optimizer]
//! lr_schedule = [[0, 0.05], [15, 0.01]]
//! momentum = 0.9
//! weight_decay = 0.0005
//!
//! [eval]
//! shape = { n = 4, k = 1, l = 15 }
//! tasks = 1000
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::ablation::SweepSpec;
use crate::episodes::{EpisodeShape, Split};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

fn default_tasks() -> usize {
    1000
}

fn default_split() -> Split {
    Split::Test
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub shape: EpisodeShape,
    #[serde(default = "default_tasks")]
    pub tasks: usize,
    #[serde(default = "default_split")]
    pub split: Split,
    /// Defaults to a stream derived from the training seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.tasks == 0 {
            return Err(Error::Config("eval.tasks must be positive".into()));
        }
        Ok(())
    }
}

/// Everything one `train`/`eval` invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// A [`RunConfig`] plus the swept axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub sweep: SweepSpec,
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Format(e.to_string()))
}

/// Resolve `p` against the directory holding the config file.
fn anchor(p: &Path, config_path: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn require_file(p: &Path, what: &str) -> Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", p.display())))
    }
}

impl RunConfig {
    /// Parse, anchor relative paths at the file's directory, and validate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        cfg.dataset = anchor(&cfg.dataset, path);
        cfg.out_dir = anchor(&cfg.out_dir, path);
        cfg.validate().map_err(|e| e.context(path.display().to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        require_file(&self.dataset, "dataset manifest")
    }
}

impl SweepConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        cfg.dataset = anchor(&cfg.dataset, path);
        cfg.out_dir = anchor(&cfg.out_dir, path);
        cfg.validate().map_err(|e| e.context(path.display().to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.eval.validate()?;
        self.sweep.validate(&self.train)?;
        require_file(&self.dataset, "dataset manifest")
    }

    /// Backbones much larger than the desk presets take hours per cell on a CPU.
    pub fn is_long_running(&self) -> bool {
        self.train.backbone.input_size > 32 || self.train.backbone.feature_dim() > 64
    }
}

/// Parse any config type from a file without path resolution or validation.
pub fn parse_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_toml(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::Axis;

    fn sample() -> RunConfig {
        RunConfig {
            dataset: "data/manifest.toml".into(),
            out_dir: "runs/a".into(),
            train: TrainConfig::desk(EpisodeShape::new(4, 1, 6)),
            eval: EvalConfig { shape: EpisodeShape::new(4, 1, 15), tasks: 1000, split: Split::Test, seed: None },
        }
    }

    #[test]
    fn round_trip() {
        let cfg = sample();
        let text = to_toml(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(to_toml(&back).unwrap(), text);

        let sweep = SweepConfig {
            dataset: cfg.dataset.clone(),
            out_dir: cfg.out_dir.clone(),
            train: cfg.train.clone(),
            eval: cfg.eval.clone(),
            sweep: SweepSpec { axis: Axis::Alpha(vec![0.0, 0.1, 0.3]), seeds: vec![1, 2] },
        };
        let back: SweepConfig = toml::from_str(&to_toml(&sweep).unwrap()).unwrap();
        assert_eq!(back, sweep);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = to_toml(&sample()).unwrap().replace("alpha = 0.3", "alpha = 0.3\nalpah = 1.0");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let text = to_toml(&sample()).unwrap().replace("rotations = [90, 180, 270]", "rotations = [45]");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
    }

    #[test]
    fn load_resolves_and_checks_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, to_toml(&sample()).unwrap()).unwrap();
        let err = RunConfig::load(&path).unwrap_err();
        assert!(err.is_usage() && err.to_string().contains("does not exist"), "{err}");

        fs::create_dir_all(dir.path().join("data")).unwrap();
        fs::write(dir.path().join("data/manifest.toml"), "").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.dataset, dir.path().join("data/manifest.toml"));
        assert_eq!(cfg.out_dir, dir.path().join("runs/a"));
    }

    #[test]
    fn documented_example_parses() {
        let doc = include_str!("config.rs");
        let example: String = doc
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start().to_string() + "\n")
            .collect();
        let cfg: RunConfig = toml::from_str(&example).unwrap();
        assert_eq!(cfg.train.shape, EpisodeShape::new(4, 1, 6));
        assert_eq!(cfg.train.validation_tasks, 200);
        assert!(cfg.train.stop_gradient);
    }
}
