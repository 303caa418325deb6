//! Synthetic common corruptions at five severities.
//!
//! | kind           | parameter by severity 1..5          | effect                              |
//! |----------------|-------------------------------------|-------------------------------------|
//! | gaussian_noise | σ = .04 .06 .08 .09 .10             | `x + N(0, σ²)`                      |
//! | shot_noise     | c = 500 250 100 75 50               | `Poisson(c·x) / c`                  |
//! | impulse_noise  | p = .01 .02 .03 .05 .07             | each value replaced by 0 or 1 w.p. p|
//! | box_blur       | r = .5 .75 1 1.25 1.5               | separable box of fractional radius r|
//! | brightness     | b = .05 .1 .15 .2 .3                | `x + b`                             |
//! | contrast       | c = .75 .5 .4 .3 .15                | `(x − μ_channel)·c + μ_channel`     |
//!
//! Results are clamped to `[0, 1]`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Poisson};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Corruption {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    BoxBlur,
    Brightness,
    Contrast,
}

pub const ALL_CORRUPTIONS: [Corruption; 6] = [
    Corruption::GaussianNoise,
    Corruption::ShotNoise,
    Corruption::ImpulseNoise,
    Corruption::BoxBlur,
    Corruption::Brightness,
    Corruption::Contrast,
];

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::ShotNoise => "shot_noise",
            Corruption::ImpulseNoise => "impulse_noise",
            Corruption::BoxBlur => "box_blur",
            Corruption::Brightness => "brightness",
            Corruption::Contrast => "contrast",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ALL_CORRUPTIONS.into_iter().find(|c| c.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = ALL_CORRUPTIONS.iter().map(|c| c.name()).collect();
            Error::config(format!("unknown corruption {s:?}; valid kinds: {}", valid.join(", ")))
        })
    }

    fn index(self) -> u64 {
        ALL_CORRUPTIONS.iter().position(|&c| c == self).expect("listed") as u64
    }

    /// Table parameter for a severity in `1..=5`.
    pub fn parameter(self, severity: usize) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::config(format!("severity must be 1..=5, got {severity}")));
        }
        let table: [f64; 5] = match self {
            Corruption::GaussianNoise => [0.04, 0.06, 0.08, 0.09, 0.10],
            Corruption::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            Corruption::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            Corruption::BoxBlur => [0.5, 0.75, 1.0, 1.25, 1.5],
            Corruption::Brightness => [0.05, 0.1, 0.15, 0.2, 0.3],
            Corruption::Contrast => [0.75, 0.5, 0.4, 0.3, 0.15],
        };
        Ok(table[severity - 1])
    }

    /// A quantity that grows with severity for every kind (the parameter
    /// itself, `1/c` for shot noise and `1 − c` for contrast).
    pub fn strength(self, severity: usize) -> Result<f64> {
        let p = self.parameter(severity)?;
        Ok(match self {
            Corruption::ShotNoise => 1.0 / p,
            Corruption::Contrast => 1.0 - p,
            _ => p,
        })
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
pub struct CorruptionSet {
    /// A [`Corruption`] name, or any CIFAR-10-C file stem for loaded sets.
    pub name: String,
    pub severity: usize,
    pub dataset: ImageDataset,
}

fn box_weights(radius: f64) -> Vec<f32> {
    let whole = radius.floor() as usize;
    let frac = radius - whole as f64;
    let mut w = vec![1.0f64; 2 * whole + 1];
    if frac > 0.0 {
        w.insert(0, frac);
        w.push(frac);
    }
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| (v / s) as f32).collect()
}

fn blur_plane(plane: &mut [f32], h: usize, w: usize, kernel: &[f32]) {
    let r = (kernel.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; plane.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * plane[y * w + clampi(x as isize + k as isize - r, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * tmp[clampi(y as isize + k as isize - r, h) * w + x])
                .sum();
        }
    }
}

/// Apply a corruption with an explicit parameter. A zero noise level, blur
/// radius or brightness shift, or a contrast factor of one, is the identity.
pub fn corrupt_with_param<R: Rng + ?Sized>(x: &Tensor, kind: Corruption, param: f64, rng: &mut R) -> Result<Tensor> {
    if x.ndim() != 4 {
        return Err(Error::InvalidShape {
            op: "corrupt",
            shape: x.shape().to_vec(),
            reason: "expected N×C×H×W".into(),
        });
    }
    if !(param.is_finite() && param >= 0.0) {
        return Err(Error::config(format!("corruption parameter must be >= 0, got {param}")));
    }
    let s = x.shape().to_vec();
    let (h, w) = (s[2], s[3]);
    let mut out = x.clone();
    let data = out.data_mut();
    match kind {
        Corruption::GaussianNoise => {
            if param > 0.0 {
                let n = Normal::new(0.0, param).expect("positive sigma");
                for v in data.iter_mut() {
                    *v = (*v as f64 + n.sample(rng)) as f32;
                }
            }
        }
        Corruption::ShotNoise => {
            if param > 0.0 {
                for v in data.iter_mut() {
                    let lam = *v as f64 * param;
                    *v = if lam > 0.0 {
                        (Poisson::new(lam).expect("positive rate").sample(rng) / param) as f32
                    } else {
                        0.0
                    };
                }
            }
        }
        Corruption::ImpulseNoise => {
            for v in data.iter_mut() {
                if rng.random::<f64>() < param {
                    *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                }
            }
        }
        Corruption::BoxBlur => {
            if param > 0.0 {
                let k = box_weights(param);
                for plane in data.chunks_mut(h * w) {
                    blur_plane(plane, h, w, &k);
                }
            }
        }
        Corruption::Brightness => {
            for v in data.iter_mut() {
                *v = (*v as f64 + param) as f32;
            }
        }
        Corruption::Contrast => {
            if param != 1.0 {
                for plane in data.chunks_mut(h * w) {
                    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64;
                    for v in plane.iter_mut() {
                        *v = ((*v as f64 - mean) * param + mean) as f32;
                    }
                }
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Corrupt a whole dataset at a table severity; deterministic given `seed`.
pub fn generate_corruptions(ds: &ImageDataset, kind: Corruption, severity: usize, seed: u64) -> Result<CorruptionSet> {
    let param = kind.parameter(severity)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(seed, Stream::Corruption, kind.index() * 8 + severity as u64));
    let images = corrupt_with_param(ds.images(), kind, param, &mut rng)?;
    let dataset = ImageDataset::new(
        format!("{}-{}-{severity}", ds.name(), kind.name()),
        images,
        ds.labels().to_vec(),
        ds.classes(),
    )?;
    Ok(CorruptionSet {
        name: kind.name().to_string(),
        severity,
        dataset,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    fn ds(n: usize) -> ImageDataset {
        let x = Tensor::from_fn([n, 3, 8, 8], |i| 0.3 + 0.4 * ((i * 31 % 17) as f32 / 17.0));
        ImageDataset::new("t", x, vec![0; n], 10).unwrap()
    }

    #[test]
    fn strength_is_monotone() {
        for k in ALL_CORRUPTIONS {
            for s in 1..5 {
                assert!(k.strength(s + 1).unwrap() > k.strength(s).unwrap(), "{k} at {s}");
            }
        }
        assert!(Corruption::GaussianNoise.parameter(0).is_err());
        assert!(Corruption::GaussianNoise.parameter(6).is_err());
    }

    #[test]
    fn unknown_kind_lists_valid() {
        let e = Corruption::parse("fog").unwrap_err().to_string();
        assert!(e.contains("gaussian_noise") && e.contains("contrast"));
    }

    #[test]
    fn identity_parameters() {
        let d = ds(2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (k, p) in [
            (Corruption::GaussianNoise, 0.0),
            (Corruption::ShotNoise, 0.0),
            (Corruption::ImpulseNoise, 0.0),
            (Corruption::BoxBlur, 0.0),
            (Corruption::Brightness, 0.0),
            (Corruption::Contrast, 1.0),
        ] {
            assert_eq!(&corrupt_with_param(d.images(), k, p, &mut rng).unwrap(), d.images(), "{k}");
        }
    }

    #[test]
    fn deterministic_and_in_range() {
        let d = ds(3);
        for k in ALL_CORRUPTIONS {
            let a = generate_corruptions(&d, k, 3, 7).unwrap();
            let b = generate_corruptions(&d, k, 3, 7).unwrap();
            assert_eq!(a.dataset.images().checksum(), b.dataset.images().checksum());
            assert!(a.dataset.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn gaussian_noise_std_matches_sigma() {
        // mid-grey images so clamping never triggers at 0.08 noise
        let x = Tensor::full([1000, 3, 8, 8], 0.5);
        let d = ImageDataset::new("g", x, vec![0; 1000], 10).unwrap();
        let c = generate_corruptions(&d, Corruption::GaussianNoise, 3, 1).unwrap();
        let diffs: Vec<f64> = c.dataset.images().data().iter().map(|&v| v as f64 - 0.5).collect();
        let m = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let sd = (diffs.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / diffs.len() as f64).sqrt();
        assert!((sd / 0.08 - 1.0).abs() < 0.05, "sd = {sd}");
    }

    #[test]
    fn box_kernel_weights() {
        assert_eq!(box_weights(1.0), vec![1.0 / 3.0; 3]);
        let k = box_weights(0.5);
        assert_eq!(k.len(), 3);
        assert!((k[0] - 0.25).abs() < 1e-7 && (k[1] - 0.5).abs() < 1e-7);
        let mut flat = vec![0.4f32; 16];
        blur_plane(&mut flat, 4, 4, &box_weights(1.5));
        assert!(flat.iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }
}
