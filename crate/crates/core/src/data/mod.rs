//! Image datasets: ingestion, splits, augmentation, corruptions and
//! synthetic fixtures.

mod augment;
mod cifar;
mod corrupt;
mod npy;
mod synthetic;

use std::path::Path;

use rand::seq::SliceRandom;

pub use augment::{augment, crop_flip, AugmentParams, PAD};
pub use cifar::{load_cifar10_dir, load_cifar10_file, parse_cifar10_batch, Cifar10, CIFAR10_RECORD_BYTES};
pub use corrupt::{
    corrupt_with_param, generate_corruptions, Corruption, CorruptionSet, ALL_CORRUPTIONS,
};
pub use npy::{encode_npy, load_cifar10c, load_cifar10c_set, load_npy_dataset, load_npy_images, load_npy_labels, parse_npy, NpyArray, NpyData};
pub use synthetic::{striped_classes, synthetic_dataset, two_gaussians, SyntheticKind};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{read_container, write_container, Container, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    name: String,
    images: Tensor,
    labels: Vec<usize>,
    classes: usize,
}

impl ImageDataset {
    /// `images: [N, C, H, W]` with pixels in `[0, 1]`, labels below `classes`.
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.ndim() != 4 {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: images.shape().to_vec(),
                reason: "expected N×C×H×W images".into(),
            });
        }
        let n = images.shape()[0];
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset labels",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        let per = images.numel() / n;
        if let Some(i) = images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::PixelRange {
                sample: i / per,
                value: images.data()[i],
            });
        }
        Ok(Self {
            name: name.into(),
            images,
            labels,
            classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.gather_outer(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let (x, y) = self.batch(indices)?;
        Self::new(self.name.clone(), x, y, self.classes)
    }

    /// The first `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.classes != other.classes {
            return Err(Error::config(format!(
                "cannot concatenate datasets with {} and {} classes",
                self.classes, other.classes
            )));
        }
        let x = Tensor::concat_outer(&[&self.images, &other.images])?;
        let mut y = self.labels.clone();
        y.extend_from_slice(&other.labels);
        Self::new(self.name.clone(), x, y, self.classes)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.metadata.insert("kind".into(), "dataset".into());
        c.metadata.insert("name".into(), self.name.clone().into());
        c.metadata.insert("classes".into(), self.classes.into());
        c.push("images", self.images.clone());
        c.push(
            "labels",
            Tensor::new([self.len()], self.labels.iter().map(|&l| l as f32).collect()).expect("label count"),
        );
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let ctx = "dataset container";
        let images = c.get("images").ok_or_else(|| Error::format(ctx, "missing \"images\" array"))?;
        let labels = c.get("labels").ok_or_else(|| Error::format(ctx, "missing \"labels\" array"))?;
        let classes = c
            .metadata
            .get("classes")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(ctx, "missing \"classes\" metadata"))? as usize;
        let name = c.metadata.get("name").and_then(|v| v.as_str()).unwrap_or("dataset");
        let labels = labels
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::format(ctx, format!("label {v} is not a class index")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(name, images.clone(), labels, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_container(path, &self.to_container())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&read_container(path)?)
    }
}

/// Seeded disjoint split of `0..n` into `(train, val)` index sets; the
/// validation set holds `round(n·val_fraction)` indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, 0));
    let n_val = (n as f64 * val_fraction).round() as usize;
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

pub fn split_train_val(ds: &ImageDataset, val_fraction: f64, seed: u64) -> Result<(ImageDataset, ImageDataset)> {
    let (tr, va) = split_indices(ds.len(), val_fraction, seed)?;
    if tr.is_empty() || va.is_empty() {
        return Err(Error::config(format!(
            "split of {} samples at {val_fraction} leaves an empty side",
            ds.len()
        )));
    }
    Ok((ds.subset(&tr)?, ds.subset(&va)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifteen_percent_split_sizes() {
        let (tr, va) = split_indices(50_000, 0.15, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (42_500, 7_500));
        let (tr2, va2) = split_indices(50_000, 0.15, 1).unwrap();
        assert_eq!((tr.clone(), va.clone()), (tr2, va2));
        let mut all: Vec<usize> = tr.into_iter().chain(va).collect();
        all.sort_unstable();
        assert_eq!(all, (0..50_000).collect::<Vec<_>>());
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_indices(10, 0.0, 0).is_err());
        assert!(split_indices(10, 1.0, 0).is_err());
    }

    #[test]
    fn construction_checks() {
        let x = Tensor::full([2, 1, 2, 2], 0.5);
        assert!(ImageDataset::new("a", x.clone(), vec![0, 1], 2).is_ok());
        assert!(ImageDataset::new("a", x.clone(), vec![0, 2], 2).is_err());
        assert!(ImageDataset::new("a", x, vec![0], 2).is_err());
        let bad = Tensor::full([1, 1, 1, 1], 1.5);
        assert!(matches!(ImageDataset::new("a", bad, vec![0], 2), Err(Error::PixelRange { .. })));
    }

    #[test]
    fn container_round_trip_is_bitwise() {
        let ds = two_gaussians(12, [3, 4, 4], 6.0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.bin");
        ds.save(&p).unwrap();
        let back = ImageDataset::load(&p).unwrap();
        assert_eq!(back.images().checksum(), ds.images().checksum());
        assert_eq!(back, ds);
    }
}
