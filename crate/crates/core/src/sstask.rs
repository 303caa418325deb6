//! Pretext transforms: rotation prediction and jigsaw.
//!
//! Rotation turns an image counter-clockwise by a multiple of 90°: a
//! quarter turn maps `out[i][j] = in[j][W-1-i]`, so `[[a,b],[c,d]]` becomes
//! `[[b,d],[a,c]]`. Jigsaw splits an image into an `n×n` grid of tiles
//! (row-major tile indices) and writes input tile `p[i]` into output tile
//! `i`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict_ss, Head, Network};
use crate::tensor::{cross_entropy_per_sample, Tensor};

pub const ROTATION_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsTaskKind {
    Rotation,
    Jigsaw,
}

impl SsTaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rotation" => Ok(Self::Rotation),
            "jigsaw" => Ok(Self::Jigsaw),
            other => Err(Error::config(format!(
                "unknown task {other:?}; expected \"rotation\" or \"jigsaw\""
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SsTask {
    kind: SsTaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    permutations: Vec<Vec<usize>>,
}

impl SsTask {
    pub fn rotation() -> Self {
        Self {
            kind: SsTaskKind::Rotation,
            grid: None,
            permutations: Vec::new(),
        }
    }

    /// Jigsaw over an `grid×grid` tiling with `count` permutations chosen by
    /// [`make_permutation_set`].
    pub fn jigsaw(grid: usize, count: usize, seed: u64) -> Result<Self> {
        Self::jigsaw_from(grid, make_permutation_set(grid, count, seed)?)
    }

    /// Jigsaw with an explicit permutation set, e.g. one read back from a
    /// checkpoint.
    pub fn jigsaw_from(grid: usize, permutations: Vec<Vec<usize>>) -> Result<Self> {
        validate_permutation_set(grid, &permutations)?;
        Ok(Self {
            kind: SsTaskKind::Jigsaw,
            grid: Some(grid),
            permutations,
        })
    }

    pub fn kind(&self) -> SsTaskKind {
        self.kind
    }

    pub fn grid(&self) -> Option<usize> {
        self.grid
    }

    pub fn permutations(&self) -> &[Vec<usize>] {
        &self.permutations
    }

    pub fn class_count(&self) -> usize {
        match self.kind {
            SsTaskKind::Rotation => ROTATION_CLASSES,
            SsTaskKind::Jigsaw => self.permutations.len(),
        }
    }

    /// Draw one label per image uniformly and transform the batch.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        self.check_input(x)?;
        let n = x.shape()[0];
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.class_count())).collect();
        let out = self.apply_labels(x, &labels)?;
        Ok((out, labels))
    }

    /// Transform each image according to a given label.
    pub fn apply_labels(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        self.check_input(x)?;
        if labels.len() != x.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "ss transform labels",
                lhs: x.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        for &l in labels {
            if l >= self.class_count() {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.class_count(),
                });
            }
        }
        let [_, c, h, w] = dims4(x);
        let plane = c * h * w;
        let mut out = vec![0.0f32; x.numel()];
        for (i, &l) in labels.iter().enumerate() {
            let src = &x.data()[i * plane..(i + 1) * plane];
            let dst = &mut out[i * plane..(i + 1) * plane];
            match self.kind {
                SsTaskKind::Rotation => rotate_image(src, dst, c, h, l),
                SsTaskKind::Jigsaw => permute_tiles(src, dst, c, h, w, self.grid.unwrap_or(1), &self.permutations[l]),
            }
        }
        Tensor::new(x.shape().to_vec(), out)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 4 {
            return Err(Error::InvalidShape {
                op: "ss transform",
                shape: x.shape().to_vec(),
                reason: "expected an N×C×H×W batch".into(),
            });
        }
        let [_, _, h, w] = dims4(x);
        match self.kind {
            SsTaskKind::Rotation if h != w => Err(Error::InvalidShape {
                op: "rotate_batch",
                shape: x.shape().to_vec(),
                reason: "rotation needs square images".into(),
            }),
            SsTaskKind::Jigsaw => {
                let n = self.grid.unwrap_or(1);
                if h % n != 0 || w % n != 0 {
                    Err(Error::InvalidShape {
                        op: "jigsaw_batch",
                        shape: x.shape().to_vec(),
                        reason: format!("spatial size not divisible by grid {n}"),
                    })
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

fn dims4(x: &Tensor) -> [usize; 4] {
    let s = x.shape();
    [s[0], s[1], s[2], s[3]]
}

/// Rotate a `C×S×S` image by `quarter_turns·90°` counter-clockwise.
fn rotate_image(src: &[f32], dst: &mut [f32], channels: usize, size: usize, quarter_turns: usize) {
    let s = size;
    for ch in 0..channels {
        let base = ch * s * s;
        for i in 0..s {
            for j in 0..s {
                let (si, sj) = match quarter_turns % 4 {
                    0 => (i, j),
                    1 => (j, s - 1 - i),
                    2 => (s - 1 - i, s - 1 - j),
                    _ => (s - 1 - j, i),
                };
                dst[base + i * s + j] = src[base + si * s + sj];
            }
        }
    }
}

fn permute_tiles(src: &[f32], dst: &mut [f32], channels: usize, h: usize, w: usize, grid: usize, perm: &[usize]) {
    let (th, tw) = (h / grid, w / grid);
    for ch in 0..channels {
        let base = ch * h * w;
        for (out_tile, &in_tile) in perm.iter().enumerate() {
            let (or, oc) = (out_tile / grid, out_tile % grid);
            let (ir, ic) = (in_tile / grid, in_tile % grid);
            for r in 0..th {
                let d = base + (or * th + r) * w + oc * tw;
                let s = base + (ir * th + r) * w + ic * tw;
                dst[d..d + tw].copy_from_slice(&src[s..s + tw]);
            }
        }
    }
}

/// Rotate each image by a uniformly drawn multiple of 90°.
pub fn rotate_batch<R: Rng + ?Sized>(x: &Tensor, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    SsTask::rotation().apply(x, rng)
}

/// Scramble each image with a permutation drawn uniformly from the task's set.
pub fn jigsaw_batch<R: Rng + ?Sized>(x: &Tensor, task: &SsTask, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if task.kind() != SsTaskKind::Jigsaw {
        return Err(Error::config("jigsaw_batch needs a jigsaw task"));
    }
    task.apply(x, rng)
}

/// Apply one tile permutation to every image of a batch.
pub fn scramble(x: &Tensor, grid: usize, perm: &[usize]) -> Result<Tensor> {
    SsTask::jigsaw_from(grid, vec![(0..grid * grid).collect()])?.check_input(x)?;
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..grid * grid).collect::<Vec<_>>() {
        return Err(Error::config(format!("{perm:?} is not a permutation of {} cells", grid * grid)));
    }
    let [n, c, h, w] = dims4(x);
    let plane = c * h * w;
    let mut out = vec![0.0f32; x.numel()];
    for i in 0..n {
        permute_tiles(&x.data()[i * plane..(i + 1) * plane], &mut out[i * plane..(i + 1) * plane], c, h, w, grid, perm);
    }
    Tensor::new(x.shape().to_vec(), out)
}

pub fn inverse_permutation(p: &[usize]) -> Vec<usize> {
    let mut q = vec![0; p.len()];
    for (i, &pi) in p.iter().enumerate() {
        q[pi] = i;
    }
    q
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn factorial_at_least(n: usize, bound: usize) -> bool {
    let mut f: usize = 1;
    for k in 2..=n {
        f = match f.checked_mul(k) {
            Some(v) => v,
            None => return true,
        };
        if f >= bound {
            return true;
        }
    }
    f >= bound
}

fn all_permutations(n: usize) -> Vec<Vec<usize>> {
    // Heap's algorithm, iterative
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    let mut out = vec![a.clone()];
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            out.push(a.clone());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    out
}

/// Choose `count` permutations of the `grid²` cells.
///
/// Starts from the identity and repeatedly adds the candidate whose minimum
/// Hamming distance to the chosen set is largest. Candidates are all
/// permutations for `grid ≤ 3` and a seeded random sample otherwise; ties go
/// to the earliest candidate in a seeded shuffle.
pub fn make_permutation_set(grid: usize, count: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if grid == 0 || count == 0 {
        return Err(Error::config("jigsaw grid and permutation count must be positive"));
    }
    let cells = grid * grid;
    if !factorial_at_least(cells, count) {
        return Err(Error::config(format!(
            "cannot choose {count} distinct permutations of {cells} cells"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..cells).collect();
    let mut candidates: Vec<Vec<usize>> = if grid <= 3 {
        all_permutations(cells).into_iter().filter(|p| *p != identity).collect()
    } else {
        let pool = (count * 20).max(2000);
        let mut seen = std::collections::HashSet::new();
        let mut v = Vec::with_capacity(pool);
        while v.len() < pool {
            let mut p = identity.clone();
            p.shuffle(&mut rng);
            if p != identity && seen.insert(p.clone()) {
                v.push(p);
            }
        }
        v
    };
    candidates.shuffle(&mut rng);

    let mut chosen = vec![identity.clone()];
    let mut min_dist: Vec<usize> = candidates.iter().map(|c| hamming(c, &identity)).collect();
    let mut taken = vec![false; candidates.len()];
    while chosen.len() < count {
        let mut best: Option<usize> = None;
        for (i, &d) in min_dist.iter().enumerate() {
            if !taken[i] && best.is_none_or(|b| d > min_dist[b]) {
                best = Some(i);
            }
        }
        let b = best.expect("enough candidates");
        taken[b] = true;
        let pick = candidates[b].clone();
        for (i, c) in candidates.iter().enumerate() {
            if !taken[i] {
                min_dist[i] = min_dist[i].min(hamming(c, &pick));
            }
        }
        chosen.push(pick);
    }
    Ok(chosen)
}

fn validate_permutation_set(grid: usize, perms: &[Vec<usize>]) -> Result<()> {
    let cells = grid * grid;
    if perms.is_empty() {
        return Err(Error::config("empty permutation set"));
    }
    let identity: Vec<usize> = (0..cells).collect();
    if perms[0] != identity {
        return Err(Error::config("permutation set must start with the identity"));
    }
    let mut seen = std::collections::HashSet::new();
    for p in perms {
        let mut sorted = p.clone();
        sorted.sort_unstable();
        if sorted != identity {
            return Err(Error::config(format!("{p:?} is not a permutation of {cells} cells")));
        }
        if !seen.insert(p.clone()) {
            return Err(Error::config(format!("duplicate permutation {p:?}")));
        }
    }
    Ok(())
}

/// Fail unless the model's self-supervision head matches the task.
pub fn check_head<N: Network + ?Sized>(model: &N, task: &SsTask) -> Result<()> {
    match model.classes(Head::Ss) {
        Some(c) if c == task.class_count() => Ok(()),
        Some(c) => Err(Error::config(format!(
            "self-supervision head has {c} outputs but the task has {} classes",
            task.class_count()
        ))),
        None => Err(Error::config("model has no self-supervision head")),
    }
}

/// Mean cross entropy of the self-supervision head on a transformed batch,
/// evaluated in the model's current mode.
pub fn ss_loss<N: Network + ?Sized>(model: &N, task: &SsTask, x_ss: &Tensor, y_ss: &[usize]) -> Result<f32> {
    check_head(model, task)?;
    let logits = predict_ss(model, x_ss)?;
    let per = cross_entropy_per_sample(&logits, y_ss)?;
    Ok((per.iter().map(|&v| v as f64).sum::<f64>() / per.len() as f64) as f32)
}
