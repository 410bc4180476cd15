//! Quarter-turn rotations for images and feature maps.
//!
//! All rotations are counterclockwise and implemented as exact index permutations, so
//! rotating an image and rotating a feature map use the same permutation table.

use std::fmt;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// A counterclockwise rotation by a whole number of quarter turns (1, 2 or 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Rotation(u8);

impl Rotation {
    pub const QUARTER: Rotation = Rotation(1);
    pub const HALF: Rotation = Rotation(2);
    pub const THREE_QUARTERS: Rotation = Rotation(3);

    pub fn from_turns(turns: u8) -> Result<Self> {
        match turns {
            1..=3 => Ok(Rotation(turns)),
            _ => Err(Error::Config(format!("rotation must be 1, 2 or 3 quarter turns, got {turns}"))),
        }
    }

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg {
            90 => Ok(Self::QUARTER),
            180 => Ok(Self::HALF),
            270 => Ok(Self::THREE_QUARTERS),
            _ => Err(Error::Config(format!("unsupported rotation {deg} degrees; use 90, 180 or 270"))),
        }
    }

    pub fn turns(self) -> u8 {
        self.0
    }

    pub fn degrees(self) -> u32 {
        90 * self.0 as u32
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.degrees())
    }
}

/// For an `h×w` plane rotated `turns` times, the output shape and the source offset of
/// every output cell. `turns` is taken mod 4; turns of 0 give the identity.
pub fn plane_permutation(h: usize, w: usize, turns: u8) -> Result<((usize, usize), Vec<usize>)> {
    let turns = turns % 4;
    if turns % 2 == 1 && h != w {
        return Err(Error::Contract(format!(
            "a quarter-turn rotation needs a square grid, got {h}x{w}"
        )));
    }
    let (oh, ow) = if turns % 2 == 1 { (w, h) } else { (h, w) };
    let mut src = Vec::with_capacity(h * w);
    for i in 0..oh {
        for j in 0..ow {
            let (si, sj) = match turns {
                0 => (i, j),
                1 => (j, w - 1 - i),
                2 => (h - 1 - i, w - 1 - j),
                _ => (h - 1 - j, i),
            };
            src.push(si * w + sj);
        }
    }
    Ok(((oh, ow), src))
}

/// Index table rotating every trailing `h×w` plane of a tensor of `shape`.
fn batched_permutation(shape: &[usize], turns: u8) -> Result<(Vec<usize>, Vec<usize>)> {
    if shape.len() < 2 {
        return Err(Error::Shape(format!("rotation needs at least 2 dims, got {shape:?}")));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let ((oh, ow), plane) = plane_permutation(h, w, turns)?;
    let planes: usize = shape[..shape.len() - 2].iter().product();
    let hw = h * w;
    let index = (0..planes).flat_map(|p| plane.iter().map(move |&s| p * hw + s)).collect();
    let mut out_shape = shape.to_vec();
    let r = out_shape.len();
    out_shape[r - 2] = oh;
    out_shape[r - 1] = ow;
    Ok((out_shape, index))
}

/// Rotate a `c×s×s` image (or any tensor whose trailing two axes are spatial).
pub fn rotate_image(image: &Tensor, turns: u8) -> Result<Tensor> {
    let (shape, index) = batched_permutation(image.shape(), turns)?;
    let data = index.iter().map(|&i| image.data()[i]).collect();
    Tensor::new(shape, data)
}

/// Rotate the spatial grid of a recorded `N×d×h×w` feature batch; channel vectors move
/// intact and the gradient is the inverse permutation.
pub fn rotate_feature_map<'g>(fmap: Var<'g>, turns: u8) -> Result<Var<'g>> {
    let (shape, index) = batched_permutation(&fmap.shape(), turns)?;
    Ok(fmap.gather(Rc::from(index), &shape))
}

/// The set `U` of rotations an episode's transform is drawn from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u32>", into = "Vec<u32>")]
pub struct TransformSet {
    members: Vec<Rotation>,
}

impl TransformSet {
    pub fn new(mut members: Vec<Rotation>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Config("transform set must not be empty".into()));
        }
        members.sort();
        let before = members.len();
        members.dedup();
        if members.len() != before {
            return Err(Error::Config("transform set has duplicate rotations".into()));
        }
        Ok(Self { members })
    }

    pub fn from_degrees(degrees: &[u32]) -> Result<Self> {
        Self::new(degrees.iter().map(|&d| Rotation::from_degrees(d)).collect::<Result<_>>()?)
    }

    /// `{90°, 180°, 270°}`.
    pub fn all() -> Self {
        Self { members: vec![Rotation::QUARTER, Rotation::HALF, Rotation::THREE_QUARTERS] }
    }

    /// Every nonempty subset of `{90°, 180°, 270°}`: the three singletons, the three pairs,
    /// then the full set.
    pub fn all_subsets() -> Vec<TransformSet> {
        [&[90][..], &[180], &[270], &[90, 180], &[90, 270], &[180, 270], &[90, 180, 270]]
            .iter()
            .map(|d| Self::from_degrees(d).expect("valid degrees"))
            .collect()
    }

    pub fn members(&self) -> &[Rotation] {
        &self.members
    }

    pub fn degrees(&self) -> Vec<u32> {
        self.members.iter().map(|r| r.degrees()).collect()
    }

    /// Draw one rotation uniformly; an episode shares a single draw across all its images.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Rotation {
        self.members[rng.gen_range(0..self.members.len())]
    }
}

impl TryFrom<Vec<u32>> for TransformSet {
    type Error = Error;
    fn try_from(degrees: Vec<u32>) -> Result<Self> {
        Self::from_degrees(&degrees)
    }
}

impl From<TransformSet> for Vec<u32> {
    fn from(set: TransformSet) -> Self {
        set.degrees()
    }
}

impl fmt::Display for TransformSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.members.iter().map(|r| r.to_string()).collect();
        write!(f, "{{{}}}", parts.join(";"))
    }
}
