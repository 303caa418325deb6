//! Synthetic datasets with known structure, used as test fixtures.
//!
//! `two-gaussians-images`: pixels are `0.5 ± (s/2)·σ·u + σ·z` with `u` the
//! unit vector along the all-ones direction, `z` standard normal noise and
//! σ = 0.05. The projection onto `u` separates the two classes by `s·σ`, so
//! the Bayes-optimal accuracy is `Φ(s/2)` (99.87% at s = 6).
//!
//! `striped-classes`: class `k` is a square wave of period `2 + k/2`
//! (horizontal stripes for even `k`, vertical for odd `k`) with a random
//! phase, amplitude 0.25 around 0.5, plus Gaussian noise of σ = 0.05.
//!
//! Labels cycle `0, 1, …, C−1, 0, …`, so classes are balanced whenever `C`
//! divides `n`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SYNTHETIC_SIGMA: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    TwoGaussians,
    Striped,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two-gaussians-images" | "two-gaussians" => Ok(Self::TwoGaussians),
            "striped-classes" | "striped" => Ok(Self::Striped),
            other => Err(Error::config(format!(
                "unknown synthetic dataset {other:?}; expected \"two-gaussians-images\" or \"striped-classes\""
            ))),
        }
    }
}

fn clamp01(v: f64) -> f32 {
    v.clamp(0.0, 1.0) as f32
}

pub fn two_gaussians(n: usize, input: [usize; 3], separation: f64, seed: u64) -> Result<ImageDataset> {
    if n < 2 {
        return Err(Error::config("two-gaussians needs at least 2 samples"));
    }
    let d: usize = input.iter().product();
    let shift = separation / 2.0 * SYNTHETIC_SIGMA / (d as f64).sqrt();
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * d);
    for &y in &labels {
        let sign = if y == 1 { 1.0 } else { -1.0 };
        for _ in 0..d {
            data.push(clamp01(0.5 + sign * shift + noise.sample(&mut rng)));
        }
    }
    ImageDataset::new(
        "two-gaussians-images",
        Tensor::new([n, input[0], input[1], input[2]], data)?,
        labels,
        2,
    )
}

pub fn striped_classes(n: usize, classes: usize, input: [usize; 3], seed: u64) -> Result<ImageDataset> {
    if classes == 0 || n < classes {
        return Err(Error::config(format!("striped-classes needs n >= classes, got n={n}, classes={classes}")));
    }
    let [c, h, w] = input;
    let noise = Normal::new(0.0, SYNTHETIC_SIGMA).expect("positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &y in &labels {
        let period = 2.0 + (y / 2) as f64;
        let phase: f64 = rng.random::<f64>() * period;
        for _ in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let coord = if y % 2 == 0 { i } else { j } as f64;
                    let wave = if ((coord + phase) / period).fract() < 0.5 { 1.0 } else { -1.0 };
                    data.push(clamp01(0.5 + 0.25 * wave + noise.sample(&mut rng)));
                }
            }
        }
    }
    ImageDataset::new("striped-classes", Tensor::new([n, c, h, w], data)?, labels, classes)
}

/// Fixture by kind with default shapes: two-gaussians uses 6σ separation;
/// striped uses 10 classes. Both produce `input`-shaped images.
pub fn synthetic_dataset(kind: SyntheticKind, n: usize, input: [usize; 3], seed: u64) -> Result<ImageDataset> {
    match kind {
        SyntheticKind::TwoGaussians => two_gaussians(n, input, 6.0, seed),
        SyntheticKind::Striped => striped_classes(n, 10, input, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_deterministic() {
        let a = two_gaussians(10, [1, 2, 2], 6.0, 4).unwrap();
        assert_eq!(a.labels().iter().filter(|&&l| l == 1).count(), 5);
        let b = two_gaussians(10, [1, 2, 2], 6.0, 4).unwrap();
        assert_eq!(a, b);
        let s = striped_classes(20, 10, [1, 4, 4], 0).unwrap();
        assert_eq!(s, striped_classes(20, 10, [1, 4, 4], 0).unwrap());
        assert!(striped_classes(5, 10, [1, 4, 4], 0).is_err());
    }

    #[test]
    fn linear_probe_on_two_gaussians() {
        // projection onto the all-ones direction, threshold at the midpoint
        let n = 20_000;
        let ds = two_gaussians(n, [3, 8, 8], 6.0, 11).unwrap();
        let d = 3 * 8 * 8;
        let correct = (0..n)
            .filter(|&i| {
                let s: f64 = ds.images().data()[i * d..(i + 1) * d].iter().map(|&v| v as f64 - 0.5).sum();
                (s > 0.0) == (ds.labels()[i] == 1)
            })
            .count();
        assert!(correct as f64 / n as f64 >= 0.997, "{correct}");
    }
}
