use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// Result of an op none of whose inputs require gradients.
    Constant,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Matmul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
    },
    AvgPool(Var, usize),
    Relu(Var),
    Reshape(Var),
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        inv_std: Vec<f32>,
        batch_stats: bool,
    },
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

/// Per-channel batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
    /// Number of values reduced per channel.
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BackwardReport {
    /// Nodes whose adjoint was propagated.
    pub visited: usize,
}

/// Append-only tape. Nodes are stored in creation order, which is a valid
/// topological order, so backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
    strict_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            strict_finite: false,
        }
    }

    /// A graph that records no ops; every result is a constant.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn set_strict_finite(&mut self, on: bool) {
        self.strict_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if self.strict_finite && !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let requires_grad = requires_grad && self.grad_enabled;
        Ok(self.push_node(value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.push_node(value, op, requires_grad)
    }

    fn check_finite(&self, op: &'static str, inputs: &[Var]) -> Result<()> {
        if self.strict_finite && inputs.iter().any(|v| !self.value(*v).all_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("add", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// `x[..., j] + bias[j]` where `bias` has shape `[N]` and `x` ends in `N`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check_finite("add_bias", &[x, bias])?;
        let n = match (self.shape(x).last(), self.shape(bias)) {
            (Some(&n), [m]) if n == *m => n,
            _ => return Err(self.mismatch("add_bias", x, bias)),
        };
        let b = self.value(bias).data();
        let data: Vec<f32> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::AddBias(x, bias), &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("mul", &[a, b])?;
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.check_finite("scale", &[x])?;
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Scale(x, s), &[x]))
    }

    /// `[m, k] × [k, n] → [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_finite("matmul", &[a, b])?;
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(self.mismatch("matmul", a, b)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let value = Tensor::new([m, n], out)?;
        Ok(self.push(value, Op::Matmul(a, b), &[a, b]))
    }

    /// 2-D convolution (cross-correlation) of `x: [B, C, H, W]` with square
    /// kernels `w: [O, C, k, k]`, symmetric zero padding, optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.check_finite("conv2d", &inputs)?;
        let (batch, geom, oc) = match (self.shape(x), self.shape(w)) {
            ([bsz, c, h, wd], [o, c2, k, k2]) if c == c2 && k == k2 && *k > 0 && h + 2 * pad >= *k && wd + 2 * pad >= *k => (
                *bsz,
                ConvGeom {
                    channels: *c,
                    height: *h,
                    width: *wd,
                    kernel: *k,
                    stride,
                    pad,
                },
                *o,
            ),
            _ => return Err(self.mismatch("conv2d", x, w)),
        };
        if stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: self.shape(x).to_vec(),
                reason: "stride must be positive".into(),
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [oc] {
                return Err(self.mismatch("conv2d bias", w, b));
            }
        }
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let in_sz = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; batch * oc * cols_n];
        let mut cols = vec![0.0; rows * cols_n];
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        for s in 0..batch {
            kernels::im2col(&xd[s * in_sz..(s + 1) * in_sz], &geom, &mut cols);
            kernels::gemm(oc, rows, cols_n, wd, false, &cols, false, &mut out[s * oc * cols_n..(s + 1) * oc * cols_n], false);
        }
        if let Some(b) = b {
            let bd = self.value(b).data();
            for (i, chunk) in out.chunks_mut(cols_n).enumerate() {
                let bias = bd[i % oc];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let value = Tensor::new([batch, oc, geom.out_h(), geom.out_w()], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: oc,
            },
            &inputs,
        ))
    }

    /// Non-overlapping `k × k` average pooling on `[B, C, H, W]`; H and W must
    /// be divisible by `k`.
    pub fn avgpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        self.check_finite("avgpool2d", &[x])?;
        let (b, c, h, w) = match self.shape(x) {
            [b, c, h, w] if k > 0 && h % k == 0 && w % k == 0 => (*b, *c, *h, *w),
            s => {
                return Err(Error::InvalidShape {
                    op: "avgpool2d",
                    shape: s.to_vec(),
                    reason: format!("spatial extent not divisible by kernel {k}"),
                })
            }
        };
        let out = kernels::avgpool_forward(self.value(x).data(), b * c, h, w, k);
        let value = Tensor::new([b, c, h / k, w / k], out)?;
        Ok(self.push(value, Op::AvgPool(x, k), &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_finite("relu", &[x])?;
        let data = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(value, Op::Relu(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.check_finite("reshape", &[x])?;
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_finite("sum", &[x])?;
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        Ok(self.push(Tensor::scalar(s as f32), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_finite("mean", &[x])?;
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        Ok(self.push(Tensor::scalar((s / n as f64) as f32), Op::Mean(x), &[x]))
    }

    /// Per-channel normalization using the statistics of this batch. The
    /// channel axis is 1; all other axes are reduced.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, ChannelStats)> {
        self.check_finite("batch_norm", &[x, gamma, beta])?;
        let (c, inner, count) = self.norm_layout(x, gamma, beta)?;
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for (i, &v) in xd.iter().enumerate() {
            mean[(i / inner) % c] += v as f64;
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for (i, &v) in xd.iter().enumerate() {
            let d = v as f64 - mean[(i / inner) % c];
            var[(i / inner) % c] += d * d;
        }
        var.iter_mut().for_each(|s| *s /= count as f64);
        let mean: Vec<f32> = mean.into_iter().map(|m| m as f32).collect();
        let var: Vec<f32> = var.into_iter().map(|s| s as f32).collect();
        let out = self.normalize_with(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, ChannelStats { mean, var, count }))
    }

    /// Per-channel affine normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f32], var: &[f32], eps: f32) -> Result<Var> {
        self.check_finite("batch_norm", &[x, gamma, beta])?;
        let (c, _, _) = self.norm_layout(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mean.len()],
            });
        }
        self.normalize_with(x, gamma, beta, mean, var, eps, false)
    }

    fn norm_layout(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::InvalidShape {
                op: "batch_norm",
                shape: shape.to_vec(),
                reason: "need at least [B, C]".into(),
            });
        }
        let c = shape[1];
        if self.shape(gamma) != [c] {
            return Err(self.mismatch("batch_norm", x, gamma));
        }
        if self.shape(beta) != [c] {
            return Err(self.mismatch("batch_norm", x, beta));
        }
        let inner: usize = shape[2..].iter().product();
        let count = shape[0] * inner;
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        Ok((c, inner, count))
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_with(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
        eps: f32,
        batch_stats: bool,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = shape[1];
        let inner: usize = shape[2..].iter().product();
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / inner) % c;
                (v - mean[ch]) * inv_std[ch] * g[ch] + bt[ch]
            })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Normalize {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean-reduced softmax cross entropy of `logits: [B, C]` against class
    /// indices.
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check_finite("cross_entropy_mean", &[logits])?;
        let (per_sample, probs) = softmax_cross_entropy(self.value(logits), labels)?;
        let mean = per_sample.iter().map(|&v| v as f64).sum::<f64>() / per_sample.len() as f64;
        Ok(self.push(
            Tensor::scalar(mean as f32),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<BackwardReport> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(BackwardReport { visited: 0 });
        }
        let mut adj: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            visited += 1;
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaf_grads.push((i, dy));
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(BackwardReport { visited })
    }

    fn propagate(&self, i: usize, dy: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        match &nodes[i].op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = slot(nodes, adj, v) {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(g) = slot(nodes, adj, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = slot(nodes, adj, *b) {
                    let n = g.len();
                    for (j, d) in dy.iter().enumerate() {
                        g[j % n] += d;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(g) = slot(nodes, adj, *a) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if let Some(g) = slot(nodes, adj, *b) {
                    for ((g, d), o) in g.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = slot(nodes, adj, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += s * d);
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(g) = slot(nodes, adj, *a) {
                    kernels::gemm(m, n, k, dy, false, bv, true, g, true);
                }
                if let Some(g) = slot(nodes, adj, *b) {
                    kernels::gemm(k, m, n, av, true, dy, false, g, true);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
            } => {
                let oc = *out_channels;
                let batch = nodes[x.0].value.shape()[0];
                let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let xd = nodes[x.0].value.data();
                let wd = nodes[w.0].value.data();
                if let Some(b) = b {
                    if let Some(g) = slot(nodes, adj, *b) {
                        for (j, chunk) in dy.chunks(cols_n).enumerate() {
                            g[j % oc] += chunk.iter().sum::<f32>();
                        }
                    }
                }
                let mut cols = vec![0.0; rows * cols_n];
                if let Some(g) = slot(nodes, adj, *w) {
                    for s in 0..batch {
                        kernels::im2col(&xd[s * in_sz..(s + 1) * in_sz], geom, &mut cols);
                        let d = &dy[s * oc * cols_n..(s + 1) * oc * cols_n];
                        kernels::gemm(oc, cols_n, rows, d, false, &cols, true, g, true);
                    }
                }
                if let Some(g) = slot(nodes, adj, *x) {
                    for s in 0..batch {
                        let d = &dy[s * oc * cols_n..(s + 1) * oc * cols_n];
                        kernels::gemm(rows, oc, cols_n, wd, true, d, false, &mut cols, false);
                        kernels::col2im(&cols, geom, &mut g[s * in_sz..(s + 1) * in_sz]);
                    }
                }
            }
            Op::AvgPool(x, k) => {
                let s = nodes[x.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                if let Some(g) = slot(nodes, adj, *x) {
                    kernels::avgpool_backward(dy, g, planes, h, w, *k);
                }
            }
            Op::Relu(x) => {
                let y = nodes[i].value.data();
                if let Some(g) = slot(nodes, adj, *x) {
                    for ((g, d), y) in g.iter_mut().zip(dy).zip(y) {
                        if *y > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(g) = slot(nodes, adj, *x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Sum(x) => {
                if let Some(g) = slot(nodes, adj, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(g) = slot(nodes, adj, *x) {
                    let s = dy[0] / g.len() as f32;
                    g.iter_mut().for_each(|g| *g += s);
                }
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let shape = nodes[x.0].value.shape();
                let c = shape[1];
                let inner: usize = shape[2..].iter().product();
                let count = (shape[0] * inner) as f64;
                let xd = nodes[x.0].value.data();
                let gd = nodes[gamma.0].value.data();
                let xhat = |idx: usize| {
                    let ch = (idx / inner) % c;
                    (xd[idx] - mean[ch]) * inv_std[ch]
                };
                let mut sum_dy = vec![0.0f64; c];
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (idx, d) in dy.iter().enumerate() {
                    let ch = (idx / inner) % c;
                    sum_dy[ch] += *d as f64;
                    sum_dy_xhat[ch] += (*d * xhat(idx)) as f64;
                }
                if let Some(g) = slot(nodes, adj, *gamma) {
                    g.iter_mut().zip(&sum_dy_xhat).for_each(|(g, s)| *g += *s as f32);
                }
                if let Some(g) = slot(nodes, adj, *beta) {
                    g.iter_mut().zip(&sum_dy).for_each(|(g, s)| *g += *s as f32);
                }
                if let Some(g) = slot(nodes, adj, *x) {
                    for (idx, d) in dy.iter().enumerate() {
                        let ch = (idx / inner) % c;
                        let scale = gd[ch] * inv_std[ch];
                        if *batch_stats {
                            let corr = (sum_dy[ch] + xhat(idx) as f64 * sum_dy_xhat[ch]) / count;
                            g[idx] += scale * (*d - corr as f32);
                        } else {
                            g[idx] += scale * d;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(g) = slot(nodes, adj, *logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let s = dy[0] / b as f32;
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            g[r * c + j] += s * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f32>>], v: Var) -> Option<&'a mut Vec<f32>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

/// Per-row cross entropy and softmax probabilities for `logits: [B, C]`.
pub(crate) fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(Vec<f32>, Vec<f32>)> {
    let (b, c) = match logits.shape() {
        [b, c] => (*b, *c),
        s => {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                shape: s.to_vec(),
                reason: "logits must be [B, C]".into(),
            })
        }
    };
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != b {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::LabelOutOfRange { label: bad, classes: c });
    }
    let mut losses = Vec::with_capacity(b);
    let mut probs = vec![0.0; b * c];
    for (r, row) in logits.data().chunks(c).enumerate() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let denom: f64 = row.iter().map(|&z| ((z - max) as f64).exp()).sum();
        let lse = denom.ln() + max as f64;
        losses.push((lse - row[labels[r]] as f64) as f32);
        for (j, &z) in row.iter().enumerate() {
            probs[r * c + j] = (((z - max) as f64).exp() / denom) as f32;
        }
    }
    Ok((losses, probs))
}

/// Per-sample cross entropy without building a graph.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &[usize]) -> Result<Vec<f32>> {
    softmax_cross_entropy(logits, labels).map(|(l, _)| l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.5])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.5]);
    }

    #[test]
    fn matmul_identity_left() {
        let mut g = Graph::new();
        let eye = g
            .constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]))
            .unwrap();
        let a_data: Vec<f32> = (0..12).map(|i| i as f32 * 0.5 - 2.0).collect();
        let a = g.constant(t(&[3, 4], &a_data)).unwrap();
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data(), a_data.as_slice());
    }

    #[test]
    fn conv_of_ones_counts_taps() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full([1, 1, 4, 4], 1.0)).unwrap();
        let w = g.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let v = g.value(y).data();
        #[rustfmt::skip]
        let want = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(v, &want);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([4, 5])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn strict_finite_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[1.0, f32::NAN])).unwrap();
        assert!(g.relu(x).is_ok());
        g.set_strict_finite(true);
        assert!(matches!(g.relu(x), Err(Error::NonFinite { .. })));
        assert!(g.leaf(t(&[1], &[f32::INFINITY]), true).is_err());
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
        // accumulation without reset
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros([2]), true).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn backward_visits_each_node_once() {
        // diamond: x -> a, x -> b, (a, b) -> c -> sum
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full([4], 0.5), true).unwrap();
        let a = g.scale(x, 2.0).unwrap();
        let b = g.relu(x).unwrap();
        let c = g.mul(a, b).unwrap();
        let s = g.sum(c).unwrap();
        let rep = g.backward(s).unwrap();
        assert_eq!(rep.visited, g.len());
        // d/dx (2x * x) = 4x
        assert_eq!(g.grad(x).unwrap().data(), &[2.0; 4]);
    }

    #[test]
    fn no_grad_graph_records_constants() {
        let mut g = Graph::no_grad();
        let x = g.leaf(Tensor::scalar(2.0), true).unwrap();
        let y = g.mul(x, x).unwrap();
        assert!(!g.requires_grad(y));
        assert_eq!(g.backward(y).unwrap().visited, 0);
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([3, 10])).unwrap();
        let l = g.cross_entropy_mean(z, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f32.ln()).abs() < 1e-6);

        let mut big = vec![0.0; 10];
        big[3] = 1e4;
        let z = g.constant(t(&[1, 10], &big)).unwrap();
        let l = g.cross_entropy_mean(z, &[3]).unwrap();
        assert!(g.value(l).item().abs() < 1e-6);

        let z = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let l = g.cross_entropy_mean(z, &[2]).unwrap();
        // -ln(e^3 / (e + e^2 + e^3)) = ln(1 + e^-1 + e^-2)
        let want = (1.0f64 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
        assert!((g.value(l).item() as f64 - want).abs() < 1e-6);
        assert!((want - 0.40761).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_errors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros([2, 3])).unwrap();
        assert!(matches!(
            g.cross_entropy_mean(z, &[0, 3]),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
        let z = g.constant(Tensor::zeros([0, 3])).unwrap();
        assert!(matches!(g.cross_entropy_mean(z, &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let logits = [0.3f32, -1.2, 2.0, 0.5, 0.5, -0.7];
        let labels = [2usize, 0];
        let mut g = Graph::new();
        let z = g.leaf(t(&[2, 3], &logits), true).unwrap();
        let l = g.cross_entropy_mean(z, &labels).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(z).unwrap();
        for (r, row) in logits.chunks(3).enumerate() {
            let denom: f32 = row.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let p = row[j].exp() / denom;
                let want = (p - if j == labels[r] { 1.0 } else { 0.0 }) / 2.0;
                assert!((grad.data()[r * 3 + j] - want).abs() < 1e-6);
            }
        }
    }
}
