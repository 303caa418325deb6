use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Bound, Head, Mode, Network, Param, ParamSet, StatsRecord};
use crate::error::{Error, Result};
use crate::tensor::{Container, Graph, Tensor, Var};

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "tiny-cnn")]
    TinyCnn,
    #[serde(rename = "resnet-18")]
    ResNet18,
    #[serde(rename = "resnet-34")]
    ResNet34,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tiny-cnn" => Ok(Preset::TinyCnn),
            "resnet-18" => Ok(Preset::ResNet18),
            "resnet-34" => Ok(Preset::ResNet34),
            other => Err(Error::config(format!(
                "unknown arch preset {other:?} (expected tiny-cnn, resnet-18 or resnet-34)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::TinyCnn => "tiny-cnn",
            Preset::ResNet18 => "resnet-18",
            Preset::ResNet34 => "resnet-34",
        }
    }

    /// Product of all spatial strides in the trunk.
    pub fn downsampling(self) -> usize {
        match self {
            Preset::TinyCnn => 4,
            Preset::ResNet18 | Preset::ResNet34 => 8,
        }
    }

    /// Residual blocks per stage, for the ResNet presets.
    pub fn stage_blocks(self) -> Option<[usize; 4]> {
        match self {
            Preset::TinyCnn => None,
            Preset::ResNet18 => Some([2, 2, 2, 2]),
            Preset::ResNet34 => Some([3, 4, 6, 3]),
        }
    }
}

/// Self-describing architecture record stored with checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub preset: Preset,
    pub width: f32,
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub sup_classes: usize,
    pub ss_classes: usize,
}

impl ArchConfig {
    pub fn new(preset: Preset, input: [usize; 3], sup_classes: usize, ss_classes: usize) -> Self {
        Self {
            preset,
            width: 1.0,
            input,
            sup_classes,
            ss_classes,
        }
    }

    pub fn with_width(mut self, width: f32) -> Self {
        self.width = width;
        self
    }

    pub fn channels(&self, base: usize) -> usize {
        ((base as f64 * self.width as f64).ceil() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        if h != w {
            return Err(Error::config(format!("input must be square, got {h}x{w}")));
        }
        let f = self.preset.downsampling();
        if h % f != 0 {
            return Err(Error::config(format!(
                "input size {h} not divisible by the {} downsampling factor {f}",
                self.preset.name()
            )));
        }
        if !(self.width > 0.0) || !self.width.is_finite() {
            return Err(Error::config(format!("width multiplier must be positive, got {}", self.width)));
        }
        if self.sup_classes == 0 || self.ss_classes == 0 {
            return Err(Error::config("class counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    state: usize,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
enum Block {
    ConvNormRelu(Conv, Norm),
    Pool(usize),
    Residual {
        c1: Conv,
        n1: Norm,
        c2: Conv,
        n2: Norm,
        shortcut: Option<(Conv, Norm)>,
    },
}

#[derive(Clone, Debug, PartialEq)]
struct RunningStats {
    name: String,
    mean: Vec<f32>,
    var: Vec<f32>,
}

#[derive(Clone, Debug)]
pub struct TwoHeadModel {
    arch: ArchConfig,
    params: ParamSet,
    stats: Vec<RunningStats>,
    blocks: Vec<Block>,
    feat_dim: usize,
    sup_head: Linear,
    ss_head: Linear,
    mode: Mode,
}

struct Builder {
    params: ParamSet,
    stats: Vec<RunningStats>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f32;
        let normal = Normal::new(0.0f32, (2.0 / fan_in).sqrt()).expect("valid std");
        let data = (0..cout * cin * k * k).map(|_| normal.sample(&mut self.rng)).collect();
        let w = self.params.push(Param::new(
            format!("{name}.weight"),
            Tensor::new([cout, cin, k, k], data).expect("conv shape"),
            true,
        ));
        Conv { w, stride, pad: k / 2 }
    }

    fn norm(&mut self, name: &str, c: usize) -> Norm {
        let gamma = self
            .params
            .push(Param::new(format!("{name}.gamma"), Tensor::full([c], 1.0), false));
        let beta = self
            .params
            .push(Param::new(format!("{name}.beta"), Tensor::zeros([c]), false));
        self.stats.push(RunningStats {
            name: name.to_string(),
            mean: vec![0.0; c],
            var: vec![1.0; c],
        });
        Norm {
            gamma,
            beta,
            state: self.stats.len() - 1,
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, out: usize) -> Linear {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let data = (0..fan_in * out).map(|_| self.rng.random_range(-bound..bound)).collect();
        let w = self.params.push(Param::new(
            format!("{name}.weight"),
            Tensor::new([fan_in, out], data).expect("linear shape"),
            true,
        ));
        let b = self
            .params
            .push(Param::new(format!("{name}.bias"), Tensor::zeros([out]), false));
        Linear { w, b }
    }
}

/// Build a model with deterministic initialization: He-normal conv weights,
/// uniform `±1/√fan_in` head weights, zero biases, unit/zero norm affine.
pub fn build_model(cfg: &ArchConfig, seed: u64) -> Result<TwoHeadModel> {
    cfg.validate()?;
    let mut b = Builder {
        params: ParamSet::default(),
        stats: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let mut blocks = Vec::new();
    let cin = cfg.input[0];
    let feat_dim = match cfg.preset.stage_blocks() {
        None => {
            // conv-conv-pool ×2, conv-conv, global pool
            let widths = [32, 32, 64, 64, 128, 128].map(|c| cfg.channels(c));
            let mut prev = cin;
            for (i, &c) in widths.iter().enumerate() {
                let name = format!("trunk.conv{i}");
                let conv = b.conv(&name, prev, c, 3, 1);
                let norm = b.norm(&format!("trunk.bn{i}"), c);
                blocks.push(Block::ConvNormRelu(conv, norm));
                if i == 1 || i == 3 {
                    blocks.push(Block::Pool(2));
                }
                prev = c;
            }
            prev
        }
        Some(stages) => {
            let stem = cfg.channels(64);
            let conv = b.conv("trunk.stem", cin, stem, 3, 1);
            let norm = b.norm("trunk.stem_bn", stem);
            blocks.push(Block::ConvNormRelu(conv, norm));
            let mut prev = stem;
            for (s, &count) in stages.iter().enumerate() {
                let c = cfg.channels(64 << s);
                for j in 0..count {
                    let stride = if s > 0 && j == 0 { 2 } else { 1 };
                    let name = format!("trunk.layer{}.{j}", s + 1);
                    let c1 = b.conv(&format!("{name}.conv1"), prev, c, 3, stride);
                    let n1 = b.norm(&format!("{name}.bn1"), c);
                    let c2 = b.conv(&format!("{name}.conv2"), c, c, 3, 1);
                    let n2 = b.norm(&format!("{name}.bn2"), c);
                    let shortcut = (stride != 1 || prev != c).then(|| {
                        let sc = b.conv(&format!("{name}.shortcut"), prev, c, 1, stride);
                        let sn = b.norm(&format!("{name}.shortcut_bn"), c);
                        (sc, sn)
                    });
                    blocks.push(Block::Residual { c1, n1, c2, n2, shortcut });
                    prev = c;
                }
            }
            prev
        }
    };
    let sup_head = b.linear("sup_head", feat_dim, cfg.sup_classes);
    let ss_head = b.linear("ss_head", feat_dim, cfg.ss_classes);
    Ok(TwoHeadModel {
        arch: cfg.clone(),
        params: b.params,
        stats: b.stats,
        blocks,
        feat_dim,
        sup_head,
        ss_head,
        mode: Mode::Train,
    })
}

impl TwoHeadModel {
    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn feature_dim(&self) -> usize {
        self.feat_dim
    }

    /// Number of residual blocks per stage (empty for tiny-cnn).
    pub fn stage_layout(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        for blk in &self.blocks {
            if let Block::Residual { c1, .. } = blk {
                if c1.stride == 2 || counts.is_empty() {
                    counts.push(0);
                }
                *counts.last_mut().expect("pushed") += 1;
            }
        }
        counts
    }

    /// Kernel size of the first convolution.
    pub fn stem_kernel(&self) -> usize {
        let first = match &self.blocks[0] {
            Block::ConvNormRelu(c, _) => c.w,
            _ => unreachable!("trunk starts with a conv"),
        };
        self.params.get(first).value.shape()[2]
    }

    /// All normalization running statistics, flattened, for checksumming.
    pub fn running_stats_checksum(&self) -> u64 {
        crate::tensor::combine_checksums(self.stats.iter().flat_map(|s| {
            [
                Tensor::new([s.mean.len()], s.mean.clone()).expect("1-d").checksum(),
                Tensor::new([s.var.len()], s.var.clone()).expect("1-d").checksum(),
            ]
        }))
    }

    /// Zero both heads' weights and biases.
    pub fn zero_heads(&mut self) {
        for l in [self.sup_head, self.ss_head] {
            for i in [l.w, l.b] {
                let p = self.params.get_mut(i);
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
    }

    fn conv_fwd(&self, g: &mut Graph, p: &Bound, x: Var, c: Conv) -> Result<Var> {
        g.conv2d(x, p.var(c.w), None, c.stride, c.pad)
    }

    fn norm_fwd(&self, g: &mut Graph, p: &Bound, x: Var, n: Norm, mode: Mode, rec: &mut StatsRecord) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, st) = g.batch_norm_train(x, p.var(n.gamma), p.var(n.beta), BN_EPS)?;
                rec.entries.push((n.state, st));
                Ok(y)
            }
            Mode::Eval => {
                let s = &self.stats[n.state];
                g.batch_norm_eval(x, p.var(n.gamma), p.var(n.beta), &s.mean, &s.var, BN_EPS)
            }
        }
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.metadata.insert(
            "arch".into(),
            serde_json::to_value(&self.arch).expect("arch serializes"),
        );
        for p in self.params.iter() {
            c.push(p.name.clone(), p.value.clone());
        }
        for s in &self.stats {
            c.push(
                format!("{}.running_mean", s.name),
                Tensor::new([s.mean.len()], s.mean.clone()).expect("1-d"),
            );
            c.push(
                format!("{}.running_var", s.name),
                Tensor::new([s.var.len()], s.var.clone()).expect("1-d"),
            );
        }
        c
    }

    /// Rebuild a model from a self-describing checkpoint.
    pub fn from_container(c: &Container) -> Result<Self> {
        let arch: ArchConfig = c
            .metadata
            .get("arch")
            .cloned()
            .ok_or_else(|| Error::format("checkpoint", "missing arch descriptor"))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::format("checkpoint arch", e.to_string())))?;
        let mut m = build_model(&arch, 0)?;
        m.load_matching(c, |_| true, true)?;
        m.mode = Mode::Eval;
        Ok(m)
    }

    /// Copy trunk tensors from a checkpoint; heads are copied only when their
    /// shapes match, otherwise they keep their current initialization.
    /// Returns the names of heads that were re-initialized.
    pub fn load_trunk_from(&mut self, c: &Container) -> Result<Vec<String>> {
        self.load_matching(c, |name| name.starts_with("trunk."), true)?;
        let mut skipped = Vec::new();
        for head in ["sup_head", "ss_head"] {
            let names: Vec<String> = self
                .params
                .iter()
                .filter(|p| p.name.starts_with(&format!("{head}.")))
                .map(|p| p.name.clone())
                .collect();
            let fits = names.iter().all(|n| {
                let i = self.params.index_of(n).expect("own param");
                c.get(n).is_some_and(|t| t.shape() == self.params.get(i).value.shape())
            });
            if fits {
                for n in &names {
                    let i = self.params.index_of(n).expect("own param");
                    self.params.get_mut(i).value = c.get(n).expect("checked").clone();
                }
            } else {
                skipped.push(head.to_string());
            }
        }
        Ok(skipped)
    }

    fn load_matching(&mut self, c: &Container, select: impl Fn(&str) -> bool, strict: bool) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| select(&p.name)) {
            match c.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                Some(t) => {
                    return Err(Error::ShapeMismatch {
                        op: "load checkpoint",
                        lhs: p.value.shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    })
                }
                None if strict => return Err(Error::format("checkpoint", format!("missing tensor {}", p.name))),
                None => {}
            }
        }
        for s in self.stats.iter_mut().filter(|s| select(&s.name)) {
            for (suffix, dst) in [("running_mean", &mut s.mean), ("running_var", &mut s.var)] {
                let key = format!("{}.{suffix}", s.name);
                match c.get(&key) {
                    Some(t) if t.numel() == dst.len() => dst.copy_from_slice(t.data()),
                    Some(t) => {
                        return Err(Error::ShapeMismatch {
                            op: "load checkpoint",
                            lhs: vec![dst.len()],
                            rhs: t.shape().to_vec(),
                        })
                    }
                    None if strict => return Err(Error::format("checkpoint", format!("missing tensor {key}"))),
                    None => {}
                }
            }
        }
        Ok(())
    }
}

impl Network for TwoHeadModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn classes(&self, head: Head) -> Option<usize> {
        Some(match head {
            Head::Sup => self.arch.sup_classes,
            Head::Ss => self.arch.ss_classes,
        })
    }

    fn input_shape(&self) -> [usize; 3] {
        self.arch.input
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn features(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, rec: &mut StatsRecord) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.arch.input {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape,
                rhs: self.arch.input.to_vec(),
            });
        }
        let batch = shape[0];
        let mut h = x;
        for blk in &self.blocks {
            h = match *blk {
                Block::ConvNormRelu(c, n) => {
                    let y = self.conv_fwd(g, p, h, c)?;
                    let y = self.norm_fwd(g, p, y, n, mode, rec)?;
                    g.relu(y)?
                }
                Block::Pool(k) => g.avgpool2d(h, k)?,
                Block::Residual {
                    c1,
                    n1,
                    c2,
                    n2,
                    shortcut,
                } => {
                    let y = self.conv_fwd(g, p, h, c1)?;
                    let y = self.norm_fwd(g, p, y, n1, mode, rec)?;
                    let y = g.relu(y)?;
                    let y = self.conv_fwd(g, p, y, c2)?;
                    let y = self.norm_fwd(g, p, y, n2, mode, rec)?;
                    let skip = match shortcut {
                        Some((sc, sn)) => {
                            let s = self.conv_fwd(g, p, h, sc)?;
                            self.norm_fwd(g, p, s, sn, mode, rec)?
                        }
                        None => h,
                    };
                    let y = g.add(y, skip)?;
                    g.relu(y)?
                }
            };
        }
        let side = g.shape(h)[2];
        let pooled = g.avgpool2d(h, side)?;
        g.reshape(pooled, [batch, self.feat_dim])
    }

    fn head(&self, g: &mut Graph, p: &Bound, feats: Var, head: Head) -> Result<Var> {
        let l = match head {
            Head::Sup => self.sup_head,
            Head::Ss => self.ss_head,
        };
        let z = g.matmul(feats, p.var(l.w))?;
        g.add_bias(z, p.var(l.b))
    }

    fn commit_stats(&mut self, rec: &StatsRecord) {
        for (idx, st) in &rec.entries {
            let s = &mut self.stats[*idx];
            let unbias = if st.count > 1 {
                st.count as f32 / (st.count - 1) as f32
            } else {
                1.0
            };
            for c in 0..s.mean.len() {
                s.mean[c] = (1.0 - BN_MOMENTUM) * s.mean[c] + BN_MOMENTUM * st.mean[c];
                s.var[c] = (1.0 - BN_MOMENTUM) * s.var[c] + BN_MOMENTUM * st.var[c] * unbias;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{predict_both, predict_ss, predict_sup};

    fn tiny() -> ArchConfig {
        ArchConfig::new(Preset::TinyCnn, [3, 32, 32], 10, 4)
    }

    fn batch(n: usize, shape: [usize; 3]) -> Tensor {
        let numel = n * shape.iter().product::<usize>();
        Tensor::from_fn([n, shape[0], shape[1], shape[2]], |i| ((i * 7919) % numel) as f32 / numel as f32)
    }

    #[test]
    fn deterministic_build() {
        let a = build_model(&tiny(), 7).unwrap();
        let b = build_model(&tiny(), 7).unwrap();
        let c = build_model(&tiny(), 8).unwrap();
        assert_eq!(a.params().checksum(), b.params().checksum());
        assert_ne!(a.params().checksum(), c.params().checksum());
    }

    #[test]
    fn tiny_cnn_size() {
        let m = build_model(&tiny(), 0).unwrap();
        let n = m.params().numel();
        assert!((250_000..350_000).contains(&n), "{n}");
        let convs = m.params().iter().filter(|p| p.value.ndim() == 4).count();
        assert_eq!(convs, 6);
    }

    #[test]
    fn resnet18_layout() {
        let m = build_model(&ArchConfig::new(Preset::ResNet18, [3, 32, 32], 10, 4), 0).unwrap();
        assert_eq!(m.stage_layout(), vec![2, 2, 2, 2]);
        assert_eq!(m.stem_kernel(), 3);
        let n = m.params().numel() as f64;
        assert!((n / 11.2e6 - 1.0).abs() < 0.01, "{n}");
        let m34 = build_model(&ArchConfig::new(Preset::ResNet34, [3, 32, 32], 10, 4), 0).unwrap();
        assert_eq!(m34.stage_layout(), vec![3, 4, 6, 3]);
    }

    #[test]
    fn width_multiplier_rounds_up() {
        let half = ArchConfig::new(Preset::TinyCnn, [3, 32, 32], 10, 4).with_width(0.5);
        assert_eq!(half.channels(32), 16);
        assert_eq!(half.channels(3), 2);
        let m = build_model(&half, 0).unwrap();
        let full = build_model(&tiny(), 0).unwrap();
        for (a, b) in m.params().iter().zip(full.params().iter()) {
            if a.value.ndim() == 4 {
                assert_eq!(a.value.shape()[0], b.value.shape()[0].div_ceil(2));
            }
        }
        let odd = ArchConfig::new(Preset::TinyCnn, [3, 8, 8], 10, 4).with_width(0.3);
        assert_eq!(odd.channels(32), 10);
    }

    #[test]
    fn rejects_indivisible_input() {
        let bad = ArchConfig::new(Preset::TinyCnn, [3, 30, 30], 10, 4);
        assert!(build_model(&bad, 0).is_err());
        let bad = ArchConfig::new(Preset::ResNet18, [3, 36, 36], 10, 4);
        assert!(build_model(&bad, 0).is_err());
    }

    #[test]
    fn zero_heads_give_zero_logits() {
        let mut m = build_model(&tiny().clone(), 1).unwrap();
        m.zero_heads();
        m.set_mode(Mode::Eval);
        let x = batch(2, [3, 32, 32]);
        assert!(predict_sup(&m, &x).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(predict_ss(&m, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_shared() {
        let mut m = build_model(&ArchConfig::new(Preset::TinyCnn, [3, 16, 16], 10, 4).with_width(0.25), 3).unwrap();
        m.set_mode(Mode::Eval);
        let x = batch(3, [3, 16, 16]);
        let a = predict_sup(&m, &x).unwrap();
        let b = predict_sup(&m, &x).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let (f, sup, ss) = predict_both(&m, &x).unwrap();
        assert_eq!(sup.checksum(), a.checksum());
        assert_eq!(ss.checksum(), predict_ss(&m, &x).unwrap().checksum());
        // both heads are affine maps of the same feature vector
        let fd = m.feature_dim();
        let w = &m.params().get(m.params().index_of("ss_head.weight").unwrap()).value;
        for r in 0..3 {
            for j in 0..4 {
                let z: f32 = (0..fd).map(|k| f.data()[r * fd + k] * w.data()[k * 4 + j]).sum();
                assert!((z - ss.data()[r * 4 + j]).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn input_shape_checked() {
        let m = build_model(&tiny(), 0).unwrap();
        let x = batch(1, [3, 16, 16]);
        let err = predict_sup(&m, &x).unwrap_err().to_string();
        assert!(err.contains("[1, 3, 16, 16]"), "{err}");
    }

    #[test]
    fn container_round_trip_and_trunk_reuse() {
        let cfg = ArchConfig::new(Preset::TinyCnn, [3, 8, 8], 10, 4).with_width(0.25);
        let mut m = build_model(&cfg, 5).unwrap();
        let mut rec = StatsRecord::default();
        let mut g = Graph::new();
        let p = m.bind(&mut g, false).unwrap();
        let x = g.constant(batch(4, [3, 8, 8])).unwrap();
        m.features(&mut g, &p, x, Mode::Train, &mut rec).unwrap();
        m.commit_stats(&rec);
        let c = m.to_container();
        let back = TwoHeadModel::from_container(&Container::from_bytes(&c.to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params().checksum(), m.params().checksum());
        assert_eq!(back.running_stats_checksum(), m.running_stats_checksum());

        // different sup head width: trunk restored, sup head kept fresh
        let cfg2 = ArchConfig {
            sup_classes: 5,
            ..cfg.clone()
        };
        let mut other = build_model(&cfg2, 99).unwrap();
        let skipped = other.load_trunk_from(&c).unwrap();
        assert_eq!(skipped, vec!["sup_head".to_string()]);
        for p in other.params().iter().filter(|p| p.name.starts_with("trunk.")) {
            assert_eq!(p.value.checksum(), c.get(&p.name).unwrap().checksum());
        }
        assert_eq!(other.running_stats_checksum(), m.running_stats_checksum());
    }
}
