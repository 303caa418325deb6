//! Projected gradient descent adversaries.
//!
//! l∞ steps move by `α·sign(∇)`; l2 steps move by `α·∇/‖∇‖₂` per sample.
//! After each step the perturbation is projected onto the closed ε-ball
//! around the original sample and pixels are clamped to `[0, 1]`. The model
//! is always evaluated with its running normalization statistics, so the
//! attack objective is deterministic and the model is never mutated.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Bound, Head, Mode, Network, StatsRecord};
use crate::tensor::{cross_entropy_per_sample, Graph, Tensor, Var};

/// Slack allowed on `‖x_adv − x‖ ≤ ε`, relative to ε.
pub const CONTAINMENT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Norm {
    #[serde(rename = "l2")]
    L2,
    #[serde(rename = "linf")]
    Linf,
}

impl Norm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "l2" | "L2" => Ok(Norm::L2),
            "linf" | "Linf" | "l_inf" => Ok(Norm::Linf),
            other => Err(Error::config(format!("unknown norm {other:?}; expected \"l2\" or \"linf\""))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Norm::L2 => "l2",
            Norm::Linf => "linf",
        }
    }

    /// Norm of a perturbation, accumulated in f64.
    pub fn measure(self, delta: impl IntoIterator<Item = f64>) -> f64 {
        match self {
            Norm::L2 => delta.into_iter().map(|d| d * d).sum::<f64>().sqrt(),
            Norm::Linf => delta.into_iter().fold(0.0, |m, d| m.max(d.abs())),
        }
    }
}

impl std::fmt::Display for Norm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub random_start: bool,
    /// Add `lambda2 · L_SS` on the self-supervised batch to the attack loss.
    pub use_ss_loss: bool,
    pub lambda2: f64,
}

impl AttackConfig {
    pub fn new(norm: Norm, epsilon: f64, alpha: f64, steps: usize) -> Self {
        Self {
            norm,
            epsilon,
            alpha,
            steps,
            random_start: true,
            use_ss_loss: false,
            lambda2: 1.0,
        }
    }

    /// No perturbation at all.
    pub fn disabled(norm: Norm) -> Self {
        Self {
            random_start: false,
            ..Self::new(norm, 0.0, 0.0, 0)
        }
    }

    pub fn is_active(&self) -> bool {
        self.epsilon > 0.0 && (self.steps > 0 || self.random_start)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config(format!("epsilon must be finite and >= 0, got {}", self.epsilon)));
        }
        if self.steps > 0 && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be > 0 when steps > 0, got {}", self.alpha)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::config(format!("lambda2 must be finite and >= 0, got {}", self.lambda2)));
        }
        Ok(())
    }
}

/// A self-supervised batch riding along with the attack.
#[derive(Clone, Copy, Debug)]
pub struct SsBatch<'a> {
    pub x: &'a Tensor,
    pub labels: &'a [usize],
    /// Whether this batch is perturbed too (stepped on its own gradient and
    /// projected around its own original).
    pub perturb: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvBatch {
    pub x_adv: Tensor,
    pub x_ss_adv: Option<Tensor>,
    /// Per-sample cross entropy of the attacked head at the final iterate.
    pub losses: Vec<f32>,
}

fn per_sample(x: &Tensor) -> Result<(usize, usize)> {
    match x.shape().first() {
        Some(&n) if n > 0 => Ok((n, x.numel() / n)),
        _ => Err(Error::EmptyBatch),
    }
}

/// Clip each coordinate to `[-ε, ε]`.
pub fn project_linf(delta: &mut [f32], epsilon: f64) {
    let e = epsilon as f32;
    for d in delta {
        *d = d.clamp(-e, e);
    }
}

/// Scale onto the l2 ball of radius ε when outside it.
pub fn project_l2(delta: &mut [f32], epsilon: f64) {
    let n = Norm::L2.measure(delta.iter().map(|&d| d as f64));
    if n > epsilon {
        let s = epsilon / n;
        for d in delta {
            *d = (*d as f64 * s) as f32;
        }
    }
}

pub fn project(delta: &mut [f32], norm: Norm, epsilon: f64) {
    match norm {
        Norm::L2 => project_l2(delta, epsilon),
        Norm::Linf => project_linf(delta, epsilon),
    }
}

/// Rounding slack tolerated before [`finalize_sample`] nudges a sample back
/// inside the ball; a tenth of [`CONTAINMENT_TOLERANCE`].
const REPAIR_SLACK: f64 = 1e-6;

/// Project `candidate` into the ε-ball around `orig` and the pixel box, then
/// repair any f32 rounding that would leave it outside the ball.
fn finalize_sample(orig: &[f32], candidate: &mut [f32], norm: Norm, epsilon: f64) {
    let limit = epsilon * (1.0 + REPAIR_SLACK);
    let mut delta: Vec<f32> = candidate.iter().zip(orig).map(|(c, o)| c - o).collect();
    project(&mut delta, norm, epsilon);
    for ((c, o), d) in candidate.iter_mut().zip(orig).zip(&delta) {
        *c = (o + d).clamp(0.0, 1.0);
    }
    match norm {
        Norm::Linf => {
            for (c, &o) in candidate.iter_mut().zip(orig) {
                while (*c as f64 - o as f64).abs() > limit {
                    *c = step_toward(*c, o);
                }
            }
        }
        Norm::L2 => {
            let mut shrink = 1.0 - 1e-7;
            for _ in 0..8 {
                let n = Norm::L2.measure(candidate.iter().zip(orig).map(|(&c, &o)| c as f64 - o as f64));
                if n <= limit {
                    break;
                }
                let s = epsilon / n * shrink;
                for (c, &o) in candidate.iter_mut().zip(orig) {
                    *c = (o as f64 + (*c as f64 - o as f64) * s).clamp(0.0, 1.0) as f32;
                }
                shrink *= 1.0 - 1e-6;
            }
            if Norm::L2.measure(candidate.iter().zip(orig).map(|(&c, &o)| c as f64 - o as f64)) > limit {
                candidate.copy_from_slice(orig);
            }
        }
    }
}

fn step_toward(x: f32, target: f32) -> f32 {
    if x == target {
        return x;
    }
    let bits = x.to_bits();
    let up = (target > x) == (x >= 0.0);
    let next = if x == 0.0 {
        f32::from_bits(1).copysign(target - x)
    } else if up {
        f32::from_bits(bits + 1)
    } else {
        f32::from_bits(bits - 1)
    };
    next
}

/// Random start inside the ε-ball: uniform per pixel for l∞, uniform in the
/// ball for l2 (direction on the sphere, radius `ε·u^(1/d)`), then clamped
/// to `[0, 1]`.
pub fn random_init<R: Rng + ?Sized>(x: &Tensor, epsilon: f64, norm: Norm, rng: &mut R) -> Result<Tensor> {
    let (n, d) = per_sample(x)?;
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for i in 0..n {
        let orig = &x.data()[i * d..(i + 1) * d];
        let cand = &mut data[i * d..(i + 1) * d];
        match norm {
            Norm::Linf => {
                for (c, &o) in cand.iter_mut().zip(orig) {
                    let u: f64 = rng.random();
                    *c = (o as f64 + epsilon * (2.0 * u - 1.0)) as f32;
                }
            }
            Norm::L2 => {
                let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let len = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                let u: f64 = rng.random();
                let r = epsilon * u.powf(1.0 / d as f64);
                for ((c, &o), v) in cand.iter_mut().zip(orig).zip(&dir) {
                    *c = (o as f64 + r * v / len) as f32;
                }
            }
        }
        finalize_sample(orig, cand, norm, epsilon);
    }
    Ok(out)
}

/// One ascent step followed by projection and clamping.
pub fn pgd_step(x_k: &Tensor, grad: &Tensor, alpha: f64, norm: Norm, x_orig: &Tensor, epsilon: f64) -> Result<Tensor> {
    if grad.shape() != x_k.shape() || x_orig.shape() != x_k.shape() {
        return Err(Error::ShapeMismatch {
            op: "pgd_step",
            lhs: x_k.shape().to_vec(),
            rhs: if grad.shape() != x_k.shape() { grad.shape() } else { x_orig.shape() }.to_vec(),
        });
    }
    let (n, d) = per_sample(x_k)?;
    let mut out = x_k.clone();
    let data = out.data_mut();
    for i in 0..n {
        let g = &grad.data()[i * d..(i + 1) * d];
        let cand = &mut data[i * d..(i + 1) * d];
        match norm {
            Norm::Linf => {
                let a = alpha as f32;
                for (c, &gi) in cand.iter_mut().zip(g) {
                    let s = if gi > 0.0 {
                        1.0
                    } else if gi < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *c += a * s;
                }
            }
            Norm::L2 => {
                let gn = Norm::L2.measure(g.iter().map(|&v| v as f64));
                if gn > 0.0 && gn.is_finite() {
                    let s = alpha / gn;
                    for (c, &gi) in cand.iter_mut().zip(g) {
                        *c = (*c as f64 + s * gi as f64) as f32;
                    }
                }
            }
        }
        finalize_sample(&x_orig.data()[i * d..(i + 1) * d], cand, norm, epsilon);
    }
    Ok(out)
}

/// Check `‖x_adv − x‖ ≤ ε·(1 + tolerance)` per sample and pixel range.
pub fn verify_containment(x_orig: &Tensor, x_adv: &Tensor, norm: Norm, epsilon: f64) -> Result<()> {
    if x_orig.shape() != x_adv.shape() {
        return Err(Error::ShapeMismatch {
            op: "containment",
            lhs: x_orig.shape().to_vec(),
            rhs: x_adv.shape().to_vec(),
        });
    }
    let (n, d) = per_sample(x_orig)?;
    let bound = epsilon * (1.0 + CONTAINMENT_TOLERANCE);
    for i in 0..n {
        let a = &x_adv.data()[i * d..(i + 1) * d];
        let o = &x_orig.data()[i * d..(i + 1) * d];
        if let Some(&v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange { sample: i, value: v });
        }
        let m = norm.measure(a.iter().zip(o).map(|(&x, &y)| x as f64 - y as f64));
        if m > bound {
            return Err(Error::Containment {
                sample: i,
                norm: m,
                epsilon,
            });
        }
    }
    Ok(())
}

/// `sup + lambda2·ss` when the self-supervised term is enabled.
pub fn combine_attack_loss(sup: f32, ss: Option<f32>, lambda2: f64, use_ss: bool) -> Result<f32> {
    if !use_ss {
        return Ok(sup);
    }
    let ss = ss.ok_or_else(|| Error::config("use_ss_loss is set but no self-supervised batch was given"))?;
    Ok((sup as f64 + lambda2 * ss as f64) as f32)
}

struct Objective {
    loss: Var,
    primary: Var,
    secondary: Option<Var>,
    primary_logits: Var,
}

#[allow(clippy::too_many_arguments)]
fn build_objective<N: Network + ?Sized>(
    g: &mut Graph,
    model: &N,
    params: &Bound,
    x: &Tensor,
    labels: &[usize],
    head: Head,
    ss: Option<(&Tensor, &[usize], bool)>,
    use_ss: bool,
    lambda2: f64,
    track: bool,
) -> Result<Objective> {
    let mut stats = StatsRecord::default();
    let xv = g.leaf(x.clone(), track)?;
    let logits = model.logits(g, params, xv, head, Mode::Eval, &mut stats)?;
    let mut loss = g.cross_entropy_mean(logits, labels)?;
    let mut secondary = None;
    match (ss, use_ss) {
        (Some((xs, ys, perturb)), true) => {
            let sv = g.leaf(xs.clone(), track && perturb)?;
            let sl = model.logits(g, params, sv, Head::Ss, Mode::Eval, &mut stats)?;
            let ce = g.cross_entropy_mean(sl, ys)?;
            let weighted = g.scale(ce, lambda2 as f32)?;
            loss = g.add(loss, weighted)?;
            secondary = Some(sv);
        }
        (None, true) => {
            return Err(Error::config("use_ss_loss is set but no self-supervised batch was given"));
        }
        _ => {}
    }
    Ok(Objective {
        loss,
        primary: xv,
        secondary,
        primary_logits: logits,
    })
}

/// Value of the attack objective at the given iterate, using running
/// normalization statistics.
pub fn attack_loss<N: Network + ?Sized>(
    model: &N,
    x: &Tensor,
    labels: &[usize],
    ss: Option<(&Tensor, &[usize])>,
    lambda2: f64,
    use_ss: bool,
) -> Result<f32> {
    let mut g = Graph::no_grad();
    let p = model.bind(&mut g, false)?;
    let obj = build_objective(&mut g, model, &p, x, labels, Head::Sup, ss.map(|(a, b)| (a, b, false)), use_ss, lambda2, false)?;
    Ok(g.value(obj.loss).item())
}

/// PGD on the supervised head, optionally carrying a self-supervised batch.
///
/// The attack loss is `L_sup(F(X^k), y)` plus `λ2·L_SS(F_SS(X_SS^k), y_SS)`
/// when `cfg.use_ss_loss`. When the SS batch is marked for perturbation it
/// gets its own random start and is stepped on its own gradient of that
/// single loss and projected around its own original. Without the SS term
/// that gradient is zero, so the SS batch only moves by its random start.
pub fn pgd_attack<N: Network + ?Sized, R: Rng + ?Sized>(
    model: &N,
    x: &Tensor,
    labels: &[usize],
    ss: Option<SsBatch<'_>>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    run_attack(model, x, labels, Head::Sup, ss, cfg, rng)
}

/// PGD against a single chosen head with no auxiliary batch; used to attack
/// transformed images through the self-supervision head during pretraining.
pub fn pgd_attack_head<N: Network + ?Sized, R: Rng + ?Sized>(
    model: &N,
    x: &Tensor,
    labels: &[usize],
    head: Head,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    let cfg = AttackConfig {
        use_ss_loss: false,
        ..cfg.clone()
    };
    run_attack(model, x, labels, head, None, &cfg, rng)
}

fn run_attack<N: Network + ?Sized, R: Rng + ?Sized>(
    model: &N,
    x: &Tensor,
    labels: &[usize],
    head: Head,
    ss: Option<SsBatch<'_>>,
    cfg: &AttackConfig,
    rng: &mut R,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if cfg.use_ss_loss && ss.is_none() {
        return Err(Error::config("use_ss_loss is set but no self-supervised batch was given"));
    }
    let perturb_ss = ss.is_some_and(|s| s.perturb);
    let mut xk = if cfg.random_start {
        random_init(x, cfg.epsilon, cfg.norm, rng)?
    } else {
        x.clone()
    };
    let mut sk = match ss {
        Some(s) if s.perturb && cfg.random_start => Some(random_init(s.x, cfg.epsilon, cfg.norm, rng)?),
        Some(s) => Some(s.x.clone()),
        None => None,
    };
    let ss_labels = ss.map(|s| s.labels);

    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let p = model.bind(&mut g, false)?;
        let obj = build_objective(
            &mut g,
            model,
            &p,
            &xk,
            labels,
            head,
            sk.as_ref().zip(ss_labels).map(|(a, b)| (a, b, perturb_ss)),
            cfg.use_ss_loss,
            cfg.lambda2,
            true,
        )?;
        g.backward(obj.loss)?;
        let gx = g.grad(obj.primary).unwrap_or_else(|| Tensor::zeros(xk.shape().to_vec()));
        let next_x = pgd_step(&xk, &gx, cfg.alpha, cfg.norm, x, cfg.epsilon)?;
        if perturb_ss {
            let (orig, cur) = (ss.expect("perturb implies batch").x, sk.as_ref().expect("ss iterate"));
            let gs = obj
                .secondary
                .and_then(|v| g.grad(v))
                .unwrap_or_else(|| Tensor::zeros(cur.shape().to_vec()));
            sk = Some(pgd_step(cur, &gs, cfg.alpha, cfg.norm, orig, cfg.epsilon)?);
        }
        xk = next_x;
    }

    verify_containment(x, &xk, cfg.norm, cfg.epsilon)?;
    if let (Some(s), Some(cur)) = (ss, sk.as_ref()) {
        verify_containment(s.x, cur, cfg.norm, if s.perturb { cfg.epsilon } else { 0.0 })?;
    }

    let mut g = Graph::no_grad();
    let p = model.bind(&mut g, false)?;
    let obj = build_objective(&mut g, model, &p, &xk, labels, head, None, false, 0.0, false)?;
    let losses = cross_entropy_per_sample(g.value(obj.primary_logits), labels)?;
    Ok(AdvBatch {
        x_adv: xk,
        x_ss_adv: if perturb_ss { sk } else { None },
        losses,
    })
}
