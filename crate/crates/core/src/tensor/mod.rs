//! Dense f32 tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is an immutable row-major array. Values that take part in
//! differentiation live inside a [`Graph`] and are addressed through [`Var`]
//! handles; their gradient buffers are owned by the graph.

mod container;
mod graph;
pub(crate) mod kernels;

use std::sync::Arc;

pub use container::{read_container, write_container, Container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use graph::{cross_entropy_per_sample, BackwardReport, ChannelStats, Graph, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("expected {numel} values, got {}", data.len()),
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Copy-on-write access to the values.
    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape,
            });
        }
        Ok(Self {
            shape,
            data: Arc::clone(&self.data),
        })
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the shape and the raw bit patterns of the values.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::default();
        for &d in &self.shape {
            h.write(&(d as u64).to_le_bytes());
        }
        for v in self.data.iter() {
            h.write(&v.to_bits().to_le_bytes());
        }
        h.finish()
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_outer(&self, start: usize, end: usize) -> Result<Self> {
        let outer = *self.shape.first().ok_or_else(|| Error::InvalidShape {
            op: "slice_outer",
            shape: self.shape.clone(),
            reason: "scalar has no leading axis".into(),
        })?;
        if start > end || end > outer {
            return Err(Error::InvalidShape {
                op: "slice_outer",
                shape: self.shape.clone(),
                reason: format!("range {start}..{end} out of bounds"),
            });
        }
        let inner = self.numel() / outer.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * inner..end * inner].to_vec())
    }

    /// Gather rows along the leading axis.
    pub fn gather_outer(&self, indices: &[usize]) -> Result<Self> {
        let outer = self.shape.first().copied().unwrap_or(0);
        let inner = if outer == 0 { 0 } else { self.numel() / outer };
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= outer {
                return Err(Error::InvalidShape {
                    op: "gather_outer",
                    shape: self.shape.clone(),
                    reason: format!("index {i} out of bounds"),
                });
            }
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data)
    }

    /// Concatenate along the leading axis.
    pub fn concat_outer(parts: &[&Tensor]) -> Result<Self> {
        let first = parts.first().ok_or(Error::EmptyBatch)?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut outer = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch {
                    op: "concat_outer",
                    lhs: first.shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
            outer += p.shape[0];
            data.extend_from_slice(p.data());
        }
        let mut shape = first.shape.clone();
        shape[0] = outer;
        Tensor::new(shape, data)
    }
}

#[derive(Clone, Copy)]
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(self) -> u64 {
        self.0
    }
}

/// Combine checksums order-sensitively.
pub fn combine_checksums(parts: impl IntoIterator<Item = u64>) -> u64 {
    let mut h = Fnv::default();
    for p in parts {
        h.write(&p.to_le_bytes());
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new([2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new([2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn checksum_sensitive_to_bits() {
        let a = Tensor::new([2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new([2], vec![-0.0, 1.0]).unwrap();
        assert_ne!(a.checksum(), b.checksum());
        assert_eq!(a.checksum(), a.clone().checksum());
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::from_fn([3, 2], |i| i as f32);
        let g = t.gather_outer(&[2, 0]).unwrap();
        assert_eq!(g.data(), &[4.0, 5.0, 0.0, 1.0]);
        let s = t.slice_outer(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.data(), &[2.0, 3.0, 4.0, 5.0]);
        let c = Tensor::concat_outer(&[&s, &g]).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
    }
}
