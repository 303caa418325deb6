use super::{Bound, Head, Mode, Network, Param, ParamSet, StatsRecord};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Affine classifier on flattened pixels: `logits = x·W + b`. Its worst-case
/// perturbations have closed forms, which makes it the reference model for
/// attack oracles.
#[derive(Clone, Debug)]
pub struct LinearModel {
    input: [usize; 3],
    params: ParamSet,
    has_ss: bool,
}

impl LinearModel {
    /// `weight: [D, C]` with `D = C·H·W` of `input`, `bias: [C]`.
    pub fn new(input: [usize; 3], weight: Tensor, bias: Tensor) -> Result<Self> {
        let d: usize = input.iter().product();
        match (weight.shape(), bias.shape()) {
            ([wd, c], [bc]) if *wd == d && c == bc => {}
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "linear model",
                    lhs: weight.shape().to_vec(),
                    rhs: bias.shape().to_vec(),
                })
            }
        }
        Ok(Self {
            input,
            params: ParamSet::new(vec![
                Param::new("sup_head.weight", weight, true),
                Param::new("sup_head.bias", bias, false),
            ]),
            has_ss: false,
        })
    }

    /// Add a second affine head on the same flattened input.
    pub fn with_ss_head(mut self, weight: Tensor, bias: Tensor) -> Result<Self> {
        let d: usize = self.input.iter().product();
        if weight.shape().first() != Some(&d) || weight.shape().get(1) != bias.shape().first() {
            return Err(Error::ShapeMismatch {
                op: "linear model ss head",
                lhs: weight.shape().to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        self.params.push(Param::new("ss_head.weight", weight, true));
        self.params.push(Param::new("ss_head.bias", bias, false));
        self.has_ss = true;
        Ok(self)
    }

    pub fn weight(&self) -> &Tensor {
        &self.params.get(0).value
    }

    pub fn bias(&self) -> &Tensor {
        &self.params.get(1).value
    }
}

impl Network for LinearModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn classes(&self, head: Head) -> Option<usize> {
        match head {
            Head::Sup => Some(self.params.get(0).value.shape()[1]),
            Head::Ss if self.has_ss => Some(self.params.get(2).value.shape()[1]),
            Head::Ss => None,
        }
    }

    fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    fn features(&self, g: &mut Graph, _p: &Bound, x: Var, _mode: Mode, _stats: &mut StatsRecord) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(Error::ShapeMismatch {
                op: "model input",
                lhs: shape,
                rhs: self.input.to_vec(),
            });
        }
        let d = self.input.iter().product::<usize>();
        g.reshape(x, [shape[0], d])
    }

    fn head(&self, g: &mut Graph, p: &Bound, feats: Var, head: Head) -> Result<Var> {
        let (w, b) = match head {
            Head::Sup => (0, 1),
            Head::Ss if self.has_ss => (2, 3),
            Head::Ss => return Err(Error::config("linear model has no self-supervision head")),
        };
        let z = g.matmul(feats, p.var(w))?;
        g.add_bias(z, p.var(b))
    }
}
