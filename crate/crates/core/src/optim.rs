//! SGD with heavy-ball momentum and L2 weight decay.

use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl SgdMomentum {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// `v ← momentum·v + g + wd·p`, `p ← p − lr·v`. Weight decay only applies
    /// to parameters flagged for it; missing gradients count as zero.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>], lr: f32) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != params.len() {
            return Err(Error::config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if let Some(g) = g {
                if g.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "sgd_step",
                        lhs: p.value.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            let m = self.momentum;
            let gd = g.as_ref().map(|g| g.data());
            let data = p.value.data_mut();
            for (i, (w, vel)) in data.iter_mut().zip(v.iter_mut()).enumerate() {
                let gi = gd.map_or(0.0, |g| g[i]);
                *vel = m * *vel + gi + wd * *w;
                *w -= lr * *vel;
            }
        }
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f32>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, v: Vec<Vec<f32>>) {
        self.velocity = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Param;

    fn single(value: f32) -> ParamSet {
        ParamSet::new(vec![Param::new("p", Tensor::scalar(value), true)])
    }

    #[test]
    fn plain_step() {
        let mut ps = single(1.0);
        let mut opt = SgdMomentum::new(0.0, 0.0);
        opt.step(&mut ps, &[Some(Tensor::scalar(1.0))], 0.1).unwrap();
        assert!((ps.get(0).value.item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn two_momentum_steps() {
        let mut ps = single(0.0);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        for _ in 0..2 {
            opt.step(&mut ps, &[Some(Tensor::scalar(1.0))], 0.1).unwrap();
        }
        assert!((ps.get(0).value.item() + 0.29).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_is_fixed_point() {
        let mut ps = single(0.37);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        opt.step(&mut ps, &[Some(Tensor::scalar(0.0))], 0.1).unwrap();
        assert_eq!(ps.get(0).value.item(), 0.37);
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut ps = single(0.0);
        let mut opt = SgdMomentum::new(0.9, 0.0);
        assert!(opt.step(&mut ps, &[None], 0.0).is_err());
        assert!(opt.step(&mut ps, &[None], -1.0).is_err());
    }

    #[test]
    fn decay_only_on_flagged_params() {
        let mut ps = ParamSet::new(vec![
            Param::new("w", Tensor::scalar(1.0), true),
            Param::new("b", Tensor::scalar(1.0), false),
        ]);
        let mut opt = SgdMomentum::new(0.0, 0.5);
        opt.step(&mut ps, &[None, None], 0.1).unwrap();
        assert!((ps.get(0).value.item() - 0.95).abs() < 1e-7);
        assert_eq!(ps.get(1).value.item(), 1.0);
    }

    #[test]
    fn plain_gradient_descent_exact() {
        use proptest::prelude::*;
        proptest!(|(p in -10.0f32..10.0, g in -10.0f32..10.0, lr in 1e-4f32..1.0)| {
            let mut ps = single(p);
            let mut opt = SgdMomentum::new(0.0, 0.0);
            opt.step(&mut ps, &[Some(Tensor::scalar(g))], lr).unwrap();
            prop_assert_eq!(ps.get(0).value.item(), p - lr * g);
        });
    }
}
