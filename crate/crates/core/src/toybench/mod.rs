//! Dataset generators and model builders for desk-scale experiments.

mod experiment;
mod reference;
mod zoo;

pub use experiment::{prune_toy, toy_experiment, ToyExperimentConfig, ToyReport, ToyRow};
pub use reference::{build_reference_arch, REFERENCE_ARCHS};
pub use zoo::{build_toy_mlp, build_zoo, build_zoo_graph, randomize_batch_norm, ZOO_NAMES};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::engine;
use crate::error::{Error, Result};
use crate::graph::ModelGraph;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Gaussian blobs in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub classes: usize,
    /// Training samples per class.
    pub per_class: usize,
    /// Test samples per class, as a fraction of `per_class`.
    pub test_fraction: f64,
    pub std: f64,
    /// Distance of each center from the origin along both axes (corners at ±radius for 4 classes).
    pub radius: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 1000,
            test_fraction: 0.5,
            std: 1.25,
            radius: 2.5,
            seed: 0,
        }
    }
}

impl BlobSpec {
    /// Centers evenly spaced on the circle through the corners `(±r, ±r)`,
    /// starting at `(r, r)`; four classes sit exactly on the corners.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        if self.classes == 4 {
            let r = self.radius;
            return vec![[r, r], [-r, r], [-r, -r], [r, -r]];
        }
        let rho = self.radius * std::f64::consts::SQRT_2;
        (0..self.classes)
            .map(|i| {
                let t = std::f64::consts::FRAC_PI_4 + 2.0 * std::f64::consts::PI * i as f64 / self.classes as f64;
                [rho * t.cos(), rho * t.sin()]
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::Config(format!("std must be > 0, got {}", self.std)));
        }
        if self.per_class == 0 {
            return Err(Error::Config("need at least one sample per class".into()));
        }
        if !(self.test_fraction >= 0.0 && self.test_fraction.is_finite()) {
            return Err(Error::Config(format!("test fraction must be >= 0, got {}", self.test_fraction)));
        }
        Ok(())
    }
}

fn shuffled(x: Vec<f64>, y: Vec<usize>, sample_shape: &[usize], classes: usize, rng: &mut Rng) -> Dataset {
    let n = y.len();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    let data = Dataset {
        x: Tensor::from_parts(shape, x),
        y,
        classes,
    };
    data.subset(&rng.permutation(n))
}

/// Balanced blobs; returns `(train, test)`, each shuffled.
pub fn gen_blobs(spec: &BlobSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let centers = spec.centers();
    let test_per_class = (spec.per_class as f64 * spec.test_fraction).round() as usize;
    let make = |count: usize, stream: u64| {
        let mut rng = Rng::derive(spec.seed, stream);
        let mut x = Vec::with_capacity(count * spec.classes * 2);
        let mut y = Vec::with_capacity(count * spec.classes);
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..count {
                x.push(center[0] + spec.std * rng.normal());
                x.push(center[1] + spec.std * rng.normal());
                y.push(c);
            }
        }
        shuffled(x, y, &[2], spec.classes, &mut rng)
    };
    Ok((make(spec.per_class, 1), make(test_per_class, 2)))
}

/// Small multi-channel images: one smooth random template per class,
/// randomly shifted, rescaled and corrupted with noise per sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub noise: f64,
    /// Maximum shift in pixels along each axis.
    pub max_shift: usize,
    pub seed: u64,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            classes: 4,
            per_class: 150,
            test_per_class: 100,
            channels: 3,
            size: 12,
            noise: 2.0,
            max_shift: 1,
            seed: 0,
        }
    }
}

/// Box-blurred Gaussian noise, so templates have spatial structure.
fn template(rng: &mut Rng, channels: usize, size: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..channels * size * size).map(|_| rng.normal()).collect();
    let mut out = vec![0.0; raw.len()];
    for c in 0..channels {
        for i in 0..size {
            for j in 0..size {
                let mut acc = 0.0;
                let mut cnt = 0.0;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if a >= 0 && b >= 0 && (a as usize) < size && (b as usize) < size {
                            acc += raw[(c * size + a as usize) * size + b as usize];
                            cnt += 1.0;
                        }
                    }
                }
                out[(c * size + i) * size + j] = 2.0 * acc / cnt;
            }
        }
    }
    out
}

/// Returns `(train, test)` images shaped `(N, channels, size, size)`.
pub fn gen_patterns(spec: &PatternSpec) -> Result<(Dataset, Dataset)> {
    if spec.classes < 2 || spec.per_class == 0 || spec.size == 0 || spec.channels == 0 {
        return Err(Error::Config("pattern spec needs >= 2 classes and nonzero sizes".into()));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) || spec.max_shift >= spec.size {
        return Err(Error::Config("pattern noise must be >= 0 and shift smaller than the image".into()));
    }
    let (c, s) = (spec.channels, spec.size);
    let mut trng = Rng::derive(spec.seed, 10);
    let templates: Vec<Vec<f64>> = (0..spec.classes).map(|_| template(&mut trng, c, s)).collect();
    let make = |count: usize, stream: u64| {
        let mut rng = Rng::derive(spec.seed, stream);
        let mut x = Vec::with_capacity(count * spec.classes * c * s * s);
        let mut y = Vec::with_capacity(count * spec.classes);
        let span = 2 * spec.max_shift + 1;
        for (k, t) in templates.iter().enumerate() {
            for _ in 0..count {
                let di = rng.below(span) as i64 - spec.max_shift as i64;
                let dj = rng.below(span) as i64 - spec.max_shift as i64;
                let amp = rng.uniform_range(0.8, 1.2);
                for ch in 0..c {
                    for i in 0..s as i64 {
                        for j in 0..s as i64 {
                            let (a, b) = (i - di, j - dj);
                            let base = if a >= 0 && b >= 0 && a < s as i64 && b < s as i64 {
                                t[(ch * s + a as usize) * s + b as usize]
                            } else {
                                0.0
                            };
                            x.push(amp * base + spec.noise * rng.normal());
                        }
                    }
                }
                y.push(k);
            }
        }
        shuffled(x, y, &[c, s, s], spec.classes, &mut rng)
    };
    Ok((make(spec.per_class, 11), make(spec.test_per_class, 12)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

/// Batches considered when picking easy or hard samples.
pub const SELECTION_BATCHES: usize = 10;

/// The batch with the lowest (easy) or highest (hard) mean eval-mode loss
/// among the first ten consecutive batches; ties go to the earliest batch.
pub fn select_by_loss(g: &ModelGraph, data: &Dataset, mode: Difficulty, batch_size: usize) -> Result<Dataset> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let batches = data.len().div_ceil(batch_size).min(SELECTION_BATCHES);
    if batches == 0 {
        return Err(Error::Data("cannot select from an empty dataset".into()));
    }
    let losses = engine::per_sample_loss(g, &data.range(0, batches * batch_size).x, &data.range(0, batches * batch_size).y)?;
    let means: Vec<f64> = losses
        .chunks(batch_size)
        .map(|b| b.iter().sum::<f64>() / b.len() as f64)
        .collect();
    let mut best = 0;
    for (i, &m) in means.iter().enumerate() {
        let better = match mode {
            Difficulty::Easy => m < means[best],
            Difficulty::Hard => m > means[best],
        };
        if better {
            best = i;
        }
    }
    Ok(data.range(best * batch_size, (best + 1) * batch_size))
}
