//! CIFAR-10 binary batches: 3073-byte records of one label byte followed by
//! the red, green and blue 32×32 planes, each row-major.

use std::path::{Path, PathBuf};

use super::ImageDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD_BYTES: usize = 3073;
const SIDE: usize = 32;
const CLASSES: usize = 10;

pub const TRAIN_FILES: [&str; 5] = [
    "data_batch_1.bin",
    "data_batch_2.bin",
    "data_batch_3.bin",
    "data_batch_4.bin",
    "data_batch_5.bin",
];
pub const TEST_FILE: &str = "test_batch.bin";

#[derive(Clone, Debug)]
pub struct Cifar10 {
    pub train: ImageDataset,
    pub test: ImageDataset,
}

pub fn parse_cifar10_batch(bytes: &[u8], context: &str) -> Result<ImageDataset> {
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(Error::format(
            context,
            format!("size {} is not a positive multiple of {CIFAR10_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR10_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD_BYTES).enumerate() {
        let label = rec[0] as usize;
        if label >= CLASSES {
            return Err(Error::format(
                context,
                format!("record {i} (offset {}) has label byte {label} > 9", i * CIFAR10_RECORD_BYTES),
            ));
        }
        labels.push(label);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new([n, 3, SIDE, SIDE], pixels)?;
    ImageDataset::new(context, images, labels, CLASSES)
}

pub fn load_cifar10_file(path: &Path) -> Result<ImageDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_batch(&bytes, &path.display().to_string())
}

fn resolve_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("cifar-10-batches-bin");
    if !dir.join(TEST_FILE).exists() && nested.join(TEST_FILE).exists() {
        nested
    } else {
        dir.to_path_buf()
    }
}

/// Load the five training batches and the test batch from `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10_dir(dir: &Path) -> Result<Cifar10> {
    let dir = resolve_dir(dir);
    let mut train: Option<ImageDataset> = None;
    for f in TRAIN_FILES {
        let part = load_cifar10_file(&dir.join(f))?;
        train = Some(match train {
            None => part,
            Some(t) => t.concat(&part)?,
        });
    }
    let train = train.expect("five files").with_name("cifar10-train");
    let test = load_cifar10_file(&dir.join(TEST_FILE))?.with_name("cifar10-test");
    Ok(Cifar10 { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(label: u8, fill: impl Fn(usize) -> u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..3072).map(fill));
        r
    }

    #[test]
    fn parses_two_records() {
        let mut bytes = record(7, |i| (i % 256) as u8);
        bytes.extend(record(0, |_| 255));
        let ds = parse_cifar10_batch(&bytes, "fixture").unwrap();
        assert_eq!(ds.labels(), &[7, 0]);
        assert_eq!(ds.images().shape(), &[2, 3, 32, 32]);
        // red plane first, then green: byte 1024 is the first green pixel
        assert_eq!(ds.images().data()[1024], (1024 % 256) as f32 / 255.0);
        assert_eq!(ds.images().data()[3072], 1.0);
    }

    #[test]
    fn rejects_bad_size_and_label() {
        let e = parse_cifar10_batch(&[0u8; 3072], "f").unwrap_err();
        assert!(e.to_string().contains("3073"));
        let e = parse_cifar10_batch(&record(10, |_| 0), "f").unwrap_err();
        assert!(e.to_string().contains("label byte 10"));
    }

    #[test]
    fn missing_file_names_path() {
        let e = load_cifar10_dir(Path::new("/nonexistent/cifar")).unwrap_err();
        assert!(e.to_string().contains("/nonexistent/cifar"));
    }
}
