//! Random crop from a reflection-padded image plus horizontal flip.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reflection padding on each side before cropping.
pub const PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentParams {
    /// Crop offset in the padded image; `(PAD, PAD)` is the original window.
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentParams {
    pub const IDENTITY: Self = Self {
        dy: PAD,
        dx: PAD,
        flip: false,
    };
}

// numpy "reflect": the edge pixel is not repeated
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Apply explicit crop/flip parameters, one per image.
pub fn crop_flip(x: &Tensor, params: &[AugmentParams]) -> Result<Tensor> {
    if x.ndim() != 4 || params.len() != x.shape()[0] {
        return Err(Error::ShapeMismatch {
            op: "augment",
            lhs: x.shape().to_vec(),
            rhs: vec![params.len()],
        });
    }
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = vec![0.0f32; x.numel()];
    let src = x.data();
    for (b, p) in params.iter().enumerate() {
        if p.dy > 2 * PAD || p.dx > 2 * PAD {
            return Err(Error::config(format!("crop offset ({}, {}) exceeds padding", p.dy, p.dx)));
        }
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for i in 0..h {
                let si = reflect(i as isize + p.dy as isize - PAD as isize, h);
                for j in 0..w {
                    let jj = if p.flip { w - 1 - j } else { j };
                    let sj = reflect(jj as isize + p.dx as isize - PAD as isize, w);
                    out[base + i * w + j] = src[base + si * w + sj];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Random crop (offsets uniform in `0..=2·PAD`) and a fair-coin flip per
/// image; identity when `enabled` is false.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, rng: &mut R, enabled: bool) -> Result<Tensor> {
    if !enabled {
        return Ok(x.clone());
    }
    let n = x.shape().first().copied().unwrap_or(0);
    let params: Vec<AugmentParams> = (0..n)
        .map(|_| AugmentParams {
            dy: rng.random_range(0..=2 * PAD),
            dx: rng.random_range(0..=2 * PAD),
            flip: rng.random(),
        })
        .collect();
    crop_flip(x, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn centre_crop_is_identity_and_flip_involutive() {
        let x = Tensor::from_fn([2, 3, 5, 5], |i| i as f32 / 150.0);
        assert_eq!(crop_flip(&x, &[AugmentParams::IDENTITY; 2]).unwrap(), x);
        let f = AugmentParams {
            flip: true,
            ..AugmentParams::IDENTITY
        };
        let once = crop_flip(&x, &[f; 2]).unwrap();
        assert_ne!(once, x);
        assert_eq!(crop_flip(&once, &[f; 2]).unwrap(), x);
    }

    #[test]
    fn disabled_is_identity_and_shape_preserved() {
        let x = Tensor::from_fn([3, 1, 8, 8], |i| (i % 13) as f32 / 13.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&x, &mut rng, false).unwrap(), x);
        let y = augment(&x, &mut rng, true).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn shifted_crop_moves_content() {
        let x = Tensor::from_fn([1, 1, 6, 6], |i| i as f32);
        let p = AugmentParams {
            dy: PAD + 1,
            dx: PAD,
            flip: false,
        };
        let y = crop_flip(&x, &[p]).unwrap();
        assert_eq!(&y.data()[..6], &x.data()[6..12]);
    }
}
