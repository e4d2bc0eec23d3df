//! Seeded synthetic segmentation tasks built from discs.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::ndtensor::Tensor;
use crate::rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    /// Every blob is foreground.
    BlobsAll,
    /// Only the largest 4-connected blob is foreground.
    LargestBlob,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BlobsAll => "blobs-all",
            Self::LargestBlob => "largest-blob",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs-all" => Ok(Self::BlobsAll),
            "largest-blob" => Ok(Self::LargestBlob),
            _ => Err(arg_err!("unknown task {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTask {
    pub kind: TaskKind,
    pub size: [usize; 2],
    /// Inclusive range of discs per image.
    pub blobs: [usize; 2],
    /// Inclusive disc radius range in pixels.
    pub radius: [f64; 2],
    /// Per-disc intensity range; background is 0.
    pub intensity: [f64; 2],
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::BlobsAll,
            size: [32, 32],
            blobs: [1, 4],
            radius: [2.0, 6.0],
            intensity: [0.5, 1.0],
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthTask {
    pub fn validate(&self) -> Result<()> {
        let ok = self.size[0] > 0
            && self.size[1] > 0
            && self.blobs[0] >= 1
            && self.blobs[0] <= self.blobs[1]
            && self.radius[0] > 0.0
            && self.radius[0] <= self.radius[1]
            && self.intensity[0] <= self.intensity[1]
            && self.noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(arg_err!("invalid synthetic task {self:?}"))
        }
    }
}

/// 4-connected components of a mask, as lists of flat pixel indices in
/// discovery order (row-major seeds).
pub fn components(mask: &[bool], width: usize) -> Vec<Vec<usize>> {
    let height = mask.len() / width.max(1);
    let mut label = vec![false; mask.len()];
    let mut out = Vec::new();
    for seed in 0..mask.len() {
        if !mask[seed] || label[seed] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![seed];
        label[seed] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (r, c) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !label[q] {
                    label[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                visit(p - width);
            }
            if r + 1 < height {
                visit(p + width);
            }
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < width {
                visit(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

/// The component with the most pixels; ties go to the one whose bounding box
/// starts topmost, then leftmost.
pub fn largest_component(mask: &[bool], width: usize) -> Option<Vec<usize>> {
    let key = |c: &Vec<usize>| {
        let top = c.iter().map(|p| p / width).min().unwrap();
        let left = c.iter().map(|p| p % width).min().unwrap();
        (std::cmp::Reverse(c.len()), top, left)
    };
    components(mask, width).into_iter().min_by_key(key)
}

/// Image `H×W×1` and binary mask `H×W` for sample `index`; a pure function
/// of `(task, index)`.
pub fn gen_synthetic<T: Scalar>(task: &SynthTask, index: u64) -> Result<(Tensor<T>, Tensor<T>)> {
    task.validate()?;
    let [h, w] = task.size;
    let mut r = rng::stream(rng::derive(task.seed, "synth"), &format!("sample{index}"));
    let n = r.random_range(task.blobs[0]..=task.blobs[1]);
    let mut image = vec![0.0f64; h * w];
    let mut union = vec![false; h * w];
    for _ in 0..n {
        let cy = r.random_range(0.0..h as f64);
        let cx = r.random_range(0.0..w as f64);
        let rad = r.random_range(task.radius[0]..=task.radius[1]);
        let val = r.random_range(task.intensity[0]..=task.intensity[1]);
        for i in 0..h {
            for j in 0..w {
                let (dy, dx) = (i as f64 + 0.5 - cy, j as f64 + 0.5 - cx);
                if dy * dy + dx * dx <= rad * rad {
                    let p = i * w + j;
                    image[p] = image[p].max(val);
                    union[p] = true;
                }
            }
        }
    }
    if task.noise > 0.0 {
        let noise = Normal::new(0.0, task.noise).map_err(|e| arg_err!("{e}"))?;
        for v in image.iter_mut() {
            *v = (*v + noise.sample(&mut r)).clamp(0.0, 1.0);
        }
    }
    let mask = match task.kind {
        TaskKind::BlobsAll => union,
        TaskKind::LargestBlob => {
            let mut m = vec![false; h * w];
            for p in largest_component(&union, w).unwrap_or_default() {
                m[p] = true;
            }
            m
        }
    };
    let img = Tensor::new(&[h, w, 1], image.into_iter().map(T::lit).collect())?;
    let mask = Tensor::new(&[h, w], mask.into_iter().map(|b| if b { T::one() } else { T::zero() }).collect())?;
    Ok((img, mask))
}
