//! Class-split datasets, n-way k-shot episode sampling, a procedural synthetic dataset and
//! manifest-based storage.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::blob::{self, Precision};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}; use train, val or test"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassData {
    pub id: usize,
    pub name: String,
    /// `samples × c × s × s`.
    pub images: Tensor,
}

impl ClassData {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&self, i: usize) -> Tensor {
        self.images.index_axis0(i)
    }
}

/// Labeled images grouped by class, with a disjoint train/val/test class partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[channels, side, side]`.
    pub image_shape: [usize; 3],
    pub classes: Vec<ClassData>,
    pub splits: Splits,
}

impl Dataset {
    pub fn new(name: impl Into<String>, image_shape: [usize; 3], classes: Vec<ClassData>, splits: Splits) -> Result<Self> {
        let ds = Self { name: name.into(), image_shape, classes, splits };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<usize> = self.classes.iter().map(|c| c.id).collect();
        if ids.len() != self.classes.len() {
            return Err(Error::Load("duplicate class ids".into()));
        }
        for c in &self.classes {
            let s = c.images.shape();
            if s.len() != 4 || s[1..] != self.image_shape {
                return Err(Error::Load(format!(
                    "class {} ({}): images {s:?} do not match image shape {:?}",
                    c.id, c.name, self.image_shape
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for &id in self.splits.get(split) {
                if !ids.contains(&id) {
                    return Err(Error::Load(format!("split {split} names unknown class {id}")));
                }
                if !seen.insert(id) {
                    return Err(Error::Load(format!("class {id} is assigned to more than one split")));
                }
            }
        }
        if seen != ids {
            let missing: Vec<_> = ids.difference(&seen).collect();
            return Err(Error::Load(format!("classes {missing:?} are not assigned to any split")));
        }
        Ok(())
    }

    pub fn class(&self, id: usize) -> Option<&ClassData> {
        self.classes.iter().find(|c| c.id == id)
    }

    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.len()).sum()
    }

    /// Check that `split` can supply `n`-way episodes with `per_class` samples per class.
    pub fn check_episode_shape(&self, split: Split, n: usize, per_class: usize) -> Result<()> {
        let ids = self.splits.get(split);
        if ids.len() < n {
            return Err(Error::Sampler(format!(
                "split {split} has {} classes but the episode needs {n} (short by {})",
                ids.len(),
                n - ids.len()
            )));
        }
        for &id in ids {
            let have = self.class(id).map_or(0, |c| c.len());
            if have < per_class {
                return Err(Error::Sampler(format!(
                    "class {id} in split {split} has {have} samples but the episode needs {per_class} (short by {})",
                    per_class - have
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeShape {
    /// Classes per episode.
    pub n: usize,
    /// Support samples per class.
    pub k: usize,
    /// Query samples per class.
    pub l: usize,
}

impl EpisodeShape {
    pub fn new(n: usize, k: usize, l: usize) -> Self {
        Self { n, k, l }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 || self.l == 0 {
            return Err(Error::Config(format!("episode shape {self} must be positive")));
        }
        Ok(())
    }
}

impl fmt::Display for EpisodeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.n, self.k, self.l)
    }
}

impl std::str::FromStr for EpisodeShape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("episode shape {s:?} must be n,k,l")))?;
        match parts[..] {
            [n, k, l] => {
                let shape = Self { n, k, l };
                shape.validate()?;
                Ok(shape)
            }
            _ => Err(Error::Config(format!("episode shape {s:?} must be n,k,l"))),
        }
    }
}

/// One few-shot task. Support and query are ordered by episode class, then by draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub shape: EpisodeShape,
    /// Global ids of the sampled classes; position = episode-local label.
    pub class_ids: Vec<usize>,
    /// `n·k × c × s × s`.
    pub support: Tensor,
    pub support_labels: Vec<usize>,
    /// `n·l × c × s × s`.
    pub query: Tensor,
    pub query_labels: Vec<usize>,
    /// `(class id, sample index)` of every support image.
    pub support_sources: Vec<(usize, usize)>,
    pub query_sources: Vec<(usize, usize)>,
}

impl Episode {
    /// Support followed by query as one `(n·k + n·l) × c × s × s` batch.
    pub fn batch(&self) -> Tensor {
        Tensor::concat0(&[&self.support, &self.query]).expect("support and query share an image shape")
    }

    pub fn num_support(&self) -> usize {
        self.support_labels.len()
    }

    pub fn num_query(&self) -> usize {
        self.query_labels.len()
    }
}

/// Draw an `n`-way `k`-shot episode with `l` queries per class from `split`.
pub fn sample_episode<R: Rng + ?Sized>(dataset: &Dataset, split: Split, shape: EpisodeShape, rng: &mut R) -> Result<Episode> {
    shape.validate()?;
    let EpisodeShape { n, k, l } = shape;
    dataset.check_episode_shape(split, n, k + l)?;
    let ids = dataset.splits.get(split);
    let chosen: Vec<usize> = index::sample(rng, ids.len(), n).into_iter().map(|i| ids[i]).collect();

    let mut support = Vec::with_capacity(n * k);
    let mut query = Vec::with_capacity(n * l);
    let mut support_sources = Vec::with_capacity(n * k);
    let mut query_sources = Vec::with_capacity(n * l);
    let mut support_labels = Vec::with_capacity(n * k);
    let mut query_labels = Vec::with_capacity(n * l);
    for (label, &cid) in chosen.iter().enumerate() {
        let class = dataset.class(cid).expect("validated class");
        let picks = index::sample(rng, class.len(), k + l).into_vec();
        for (j, &s) in picks.iter().enumerate() {
            if j < k {
                support.push(class.image(s));
                support_labels.push(label);
                support_sources.push((cid, s));
            } else {
                query.push(class.image(s));
                query_labels.push(label);
                query_sources.push((cid, s));
            }
        }
    }
    let stack = |v: &[Tensor]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(Episode {
        shape,
        class_ids: chosen,
        support: stack(&support)?,
        support_labels,
        query: stack(&query)?,
        query_labels,
        support_sources,
        query_sources,
    })
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub image_side: usize,
    pub seed: u64,
    /// Class counts for (train, val, test); defaults to a 50/25/25 split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[usize; 3]>,
}

const SHAPES: [&str; 8] = ["square", "disc", "ring", "plus", "diamond", "triangle", "frame", "cross"];
const TEXTURES: [&str; 4] = ["solid", "stripes", "checker", "dots"];
pub const MAX_SYNTHETIC_CLASSES: usize = SHAPES.len() * TEXTURES.len();

impl SyntheticSpec {
    pub fn split_counts(&self) -> [usize; 3] {
        self.split.unwrap_or_else(|| {
            let train = (self.num_classes as f64 * 0.5).round() as usize;
            let val = (self.num_classes as f64 * 0.25).round() as usize;
            [train, val, self.num_classes - train - val]
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_classes > MAX_SYNTHETIC_CLASSES {
            return Err(Error::Config(format!(
                "num_classes must be in 1..={MAX_SYNTHETIC_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if self.image_side < 8 {
            return Err(Error::Config(format!("image_side must be at least 8, got {}", self.image_side)));
        }
        let counts = self.split_counts();
        if counts.iter().sum::<usize>() != self.num_classes {
            return Err(Error::Config(format!("split {counts:?} does not add up to {} classes", self.num_classes)));
        }
        Ok(())
    }
}

/// Shape and texture family of synthetic class `c`. Distinct for every `c` below
/// [`MAX_SYNTHETIC_CLASSES`].
pub fn synthetic_family(c: usize) -> (usize, usize) {
    (c % SHAPES.len(), (c + c / SHAPES.len()) % TEXTURES.len())
}

fn inside_shape(shape: usize, u: f64, v: f64) -> bool {
    let r = (u * u + v * v).sqrt();
    match shape {
        0 => u.abs() <= 0.8 && v.abs() <= 0.8,
        1 => r <= 0.9,
        2 => (0.55..=1.0).contains(&r),
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        4 => u.abs() + v.abs() <= 1.0,
        5 => (-1.0 + 0.0..=0.8).contains(&v) && u.abs() <= (v + 1.0) * 0.5,
        6 => u.abs().max(v.abs()) <= 0.95 && u.abs().max(v.abs()) >= 0.55,
        _ => ((u - v).abs() <= 0.35 || (u + v).abs() <= 0.35) && u.abs() <= 1.0 && v.abs() <= 1.0,
    }
}

fn texture_value(texture: usize, x: usize, y: usize, phase: usize) -> f64 {
    match texture {
        0 => 1.0,
        1 => {
            if ((y + phase) / 2).is_multiple_of(2) {
                1.0
            } else {
                0.3
            }
        }
        2 => {
            if ((x + phase) / 2 + (y + phase) / 2).is_multiple_of(2) {
                1.0
            } else {
                0.3
            }
        }
        _ => {
            if (x + phase).is_multiple_of(3) && (y + phase).is_multiple_of(3) {
                1.0
            } else {
                0.45
            }
        }
    }
}

fn render<R: Rng>(shape: usize, texture: usize, side: usize, rng: &mut R, noise: &Normal<f64>) -> Vec<f64> {
    let s = side as f64;
    let cx = s / 2.0 + rng.gen_range(-s / 5.0..=s / 5.0);
    let cy = s / 2.0 + rng.gen_range(-s / 5.0..=s / 5.0);
    let radius = s * rng.gen_range(0.22..0.42);
    let phase = rng.gen_range(0..6);
    let contrast = rng.gen_range(0.45..1.0);
    let background = rng.gen_range(0.0..0.3);
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            let base = if inside_shape(shape, u, v) {
                contrast * texture_value(texture, x, y, phase)
            } else {
                background
            };
            img.push(base + noise.sample(rng));
        }
    }
    img
}

/// Generate a dataset of procedural shape×texture classes. Classes are assigned to splits
/// in id order: the first `train` ids, then `val`, then `test`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let side = spec.image_side;
    let noise = Normal::new(0.0, 0.25).expect("finite std");
    let mut classes = Vec::with_capacity(spec.num_classes);
    for c in 0..spec.num_classes {
        let (shape, texture) = synthetic_family(c);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(c as u64 + 1)));
        let mut data = Vec::with_capacity(spec.samples_per_class * side * side);
        for _ in 0..spec.samples_per_class {
            data.extend(render(shape, texture, side, &mut rng, &noise));
        }
        classes.push(ClassData {
            id: c,
            name: format!("{}/{}", SHAPES[shape], TEXTURES[texture]),
            images: Tensor::new(vec![spec.samples_per_class, 1, side, side], data)?,
        });
    }
    let [train, val, _] = spec.split_counts();
    let ids: Vec<usize> = (0..spec.num_classes).collect();
    let splits = Splits {
        train: ids[..train].to_vec(),
        val: ids[train..train + val].to_vec(),
        test: ids[train + val..].to_vec(),
    };
    Dataset::new("synthetic", [1, side, side], classes, splits)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassEntry {
    pub id: usize,
    pub name: String,
    pub samples: usize,
    /// Blob path, relative to the manifest's directory.
    pub blob: PathBuf,
}

/// On-disk description of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub image_shape: [usize; 3],
    pub splits: Splits,
    pub classes: Vec<ClassEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

/// Write `dataset` as `dir/manifest.toml` plus one blob per class. Returns the manifest path.
pub fn save_dataset(dataset: &Dataset, dir: &Path, precision: Precision) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.classes.len());
    for c in &dataset.classes {
        let file = PathBuf::from(format!("class_{:04}.bin", c.id));
        blob::write(&dir.join(&file), &c.images, precision)?;
        entries.push(ClassEntry { id: c.id, name: c.name.clone(), samples: c.len(), blob: file });
    }
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        image_shape: dataset.image_shape,
        splits: dataset.splits.clone(),
        classes: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Load a dataset from its manifest, checking every blob and split invariant.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", manifest_path.display())))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut classes = Vec::with_capacity(manifest.classes.len());
    for entry in &manifest.classes {
        let path = root.join(&entry.blob);
        if !path.exists() {
            return Err(Error::Load(format!("class {} ({}): missing blob {}", entry.id, entry.name, path.display())));
        }
        let images = blob::read(&path)?;
        let mut expected = vec![entry.samples];
        expected.extend_from_slice(&manifest.image_shape);
        if images.shape() != expected.as_slice() {
            return Err(Error::Load(format!(
                "class {} ({}): blob {} has shape {:?}, manifest declares {expected:?}",
                entry.id,
                entry.name,
                path.display(),
                images.shape()
            )));
        }
        classes.push(ClassData { id: entry.id, name: entry.name.clone(), images });
    }
    Dataset::new(manifest.name, manifest.image_shape, classes, manifest.splits)
        .map_err(|e| e.context(manifest_path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(samples: &[usize]) -> Dataset {
        let classes = samples
            .iter()
            .enumerate()
            .map(|(i, &n)| ClassData {
                id: i,
                name: format!("c{i}"),
                images: Tensor::new(vec![n, 1, 2, 2], (0..n * 4).map(|v| (v + 100 * i) as f64).collect()).unwrap(),
            })
            .collect();
        let splits = Splits { train: (0..samples.len()).collect(), val: vec![], test: vec![] };
        Dataset::new("tiny", [1, 2, 2], classes, splits).unwrap()
    }

    #[test]
    fn episode_counts() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_classes: 10,
            samples_per_class: 20,
            image_side: 16,
            seed: 1,
            split: Some([5, 0, 5]),
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = sample_episode(&ds, Split::Train, EpisodeShape::new(5, 1, 16), &mut rng).unwrap();
        assert_eq!(e.support.shape()[0], 5);
        assert_eq!(e.query.shape()[0], 80);
        assert!(e.query_labels.iter().all(|&y| y < 5));
    }

    #[test]
    fn forced_single_class_episode() {
        let ds = tiny(&[2]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = sample_episode(&ds, Split::Train, EpisodeShape::new(1, 1, 1), &mut rng).unwrap();
        let mut used = vec![e.support_sources[0].1, e.query_sources[0].1];
        used.sort();
        assert_eq!(used, vec![0, 1]);
    }

    #[test]
    fn deficits_are_reported() {
        let ds = tiny(&[3, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let err = sample_episode(&ds, Split::Train, EpisodeShape::new(3, 1, 1), &mut rng).unwrap_err();
        assert!(err.to_string().contains("short by 1"), "{err}");
        let err = sample_episode(&ds, Split::Train, EpisodeShape::new(2, 2, 2), &mut rng).unwrap_err();
        assert!(err.to_string().contains("class 0") && err.to_string().contains("short by 1"), "{err}");
        assert!(sample_episode(&ds, Split::Val, EpisodeShape::new(1, 1, 1), &mut rng).is_err());
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = tiny(&[4, 4, 4]);
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_episode(&ds, Split::Train, EpisodeShape::new(2, 1, 2), &mut rng).unwrap()
        };
        assert_eq!(draw(8), draw(8));
    }

    #[test]
    fn overlapping_splits_rejected() {
        let mut ds = tiny(&[2, 2]);
        ds.splits = Splits { train: vec![0, 1], val: vec![1], test: vec![] };
        assert!(ds.validate().unwrap_err().to_string().contains("more than one split"));
        ds.splits = Splits { train: vec![0], val: vec![], test: vec![] };
        assert!(ds.validate().is_err());
    }

    #[test]
    fn synthetic_counts_and_determinism() {
        let spec = SyntheticSpec { num_classes: 8, samples_per_class: 40, image_side: 16, seed: 7, split: None };
        let ds = generate_synthetic(&spec).unwrap();
        assert_eq!(ds.num_images(), 320);
        assert_eq!((ds.splits.train.len(), ds.splits.val.len(), ds.splits.test.len()), (4, 2, 2));
        assert_eq!(generate_synthetic(&spec).unwrap(), ds);
        let other = generate_synthetic(&SyntheticSpec { seed: 8, ..spec }).unwrap();
        assert_eq!(other.classes[0].images.shape(), ds.classes[0].images.shape());
        assert_ne!(other.classes[0].images, ds.classes[0].images);
    }

    #[test]
    fn families_are_distinct() {
        let fams: BTreeSet<_> = (0..MAX_SYNTHETIC_CLASSES).map(synthetic_family).collect();
        assert_eq!(fams.len(), MAX_SYNTHETIC_CLASSES);
    }

    #[test]
    fn shape_parsing() {
        assert_eq!("5,1,16".parse::<EpisodeShape>().unwrap(), EpisodeShape::new(5, 1, 16));
        assert!("5,1".parse::<EpisodeShape>().is_err());
        assert!("5,0,1".parse::<EpisodeShape>().is_err());
    }
}
