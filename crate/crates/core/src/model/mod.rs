//! Two-headed classifiers: a shared trunk feeding a supervised head and a
//! self-supervision head.

mod arch;
mod linear;

pub use arch::{build_model, ArchConfig, Preset, TwoHeadModel};
pub use linear::LinearModel;

use crate::error::Result;
use crate::tensor::{combine_checksums, ChannelStats, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies.
    pub decay: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor, decay: bool) -> Self {
        Self {
            name: name.into(),
            value,
            decay,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(params: Vec<Param>) -> Self {
        Self { params }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub(crate) fn push(&mut self, p: Param) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        combine_checksums(self.params.iter().map(|p| p.value.checksum()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Sup,
    Ss,
}

/// Graph leaves for every parameter, in [`ParamSet`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    /// Gradients of all parameters after a backward pass.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Batch statistics gathered by training-mode normalization layers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsRecord {
    pub entries: Vec<(usize, ChannelStats)>,
}

pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;

    /// Output width of a head, or `None` when the head does not exist.
    fn classes(&self, head: Head) -> Option<usize>;

    /// Expected per-sample input shape `[C, H, W]`.
    fn input_shape(&self) -> [usize; 3];

    fn mode(&self) -> Mode {
        Mode::Eval
    }

    fn set_mode(&mut self, _mode: Mode) {}

    /// Shared feature vector `[B, F]` consumed by both heads.
    fn features(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, stats: &mut StatsRecord) -> Result<Var>;

    fn head(&self, g: &mut Graph, p: &Bound, feats: Var, head: Head) -> Result<Var>;

    /// Fold training-mode batch statistics into the running estimates.
    fn commit_stats(&mut self, _stats: &StatsRecord) {}

    fn bind(&self, g: &mut Graph, track: bool) -> Result<Bound> {
        let vars = self
            .params()
            .iter()
            .map(|p| g.leaf(p.value.clone(), track))
            .collect::<Result<_>>()?;
        Ok(Bound { vars })
    }

    fn logits(&self, g: &mut Graph, p: &Bound, x: Var, head: Head, mode: Mode, stats: &mut StatsRecord) -> Result<Var> {
        let f = self.features(g, p, x, mode, stats)?;
        self.head(g, p, f, head)
    }
}

/// Logits of one head in the network's current mode.
pub fn predict<N: Network + ?Sized>(net: &N, x: &Tensor, head: Head) -> Result<Tensor> {
    let mut g = Graph::no_grad();
    let p = net.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let y = net.logits(&mut g, &p, xv, head, net.mode(), &mut StatsRecord::default())?;
    Ok(g.value(y).clone())
}

pub fn predict_sup<N: Network + ?Sized>(net: &N, x: &Tensor) -> Result<Tensor> {
    predict(net, x, Head::Sup)
}

pub fn predict_ss<N: Network + ?Sized>(net: &N, x: &Tensor) -> Result<Tensor> {
    predict(net, x, Head::Ss)
}

/// Both heads from a single trunk pass: `(features, sup_logits, ss_logits)`.
pub fn predict_both<N: Network + ?Sized>(net: &N, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let mut g = Graph::no_grad();
    let p = net.bind(&mut g, false)?;
    let xv = g.constant(x.clone())?;
    let f = net.features(&mut g, &p, xv, net.mode(), &mut StatsRecord::default())?;
    let sup = net.head(&mut g, &p, f, Head::Sup)?;
    let ss = net.head(&mut g, &p, f, Head::Ss)?;
    Ok((g.value(f).clone(), g.value(sup).clone(), g.value(ss).clone()))
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().last().copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_to_lowest() {
        let t = Tensor::new([2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
