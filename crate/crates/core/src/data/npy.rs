//! NPY arrays (format versions 1–3), little-endian, C order only.

use std::path::Path;

use super::{CorruptionSet, ImageDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Debug, PartialEq)]
pub enum NpyData {
    U8(Vec<u8>),
    I8(Vec<i8>),
    I32(Vec<i32>),
    I64(Vec<i64>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpyArray {
    pub shape: Vec<usize>,
    pub data: NpyData,
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat_a = format!("'{key}'");
    let pat_b = format!("\"{key}\"");
    let start = header.find(&pat_a).map(|i| i + pat_a.len()).or_else(|| header.find(&pat_b).map(|i| i + pat_b.len()))?;
    let rest = header[start..].trim_start().strip_prefix(':')?.trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')')? + 1
    } else if rest.starts_with('\'') || rest.starts_with('"') {
        rest[1..].find(&rest[..1])? + 2
    } else {
        rest.find([',', '}']).unwrap_or(rest.len())
    };
    Some(rest[..end].trim())
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    let inner = s.strip_prefix('(')?.strip_suffix(')')?;
    inner
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.trim_end_matches('L').parse().ok())
        .collect()
}

pub fn parse_npy(bytes: &[u8], context: &str) -> Result<NpyArray> {
    let fail = |reason: String| Error::format(context, reason);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        let bad = bytes.iter().zip(MAGIC).position(|(a, b)| a != b).unwrap_or(bytes.len().min(MAGIC.len()));
        return Err(fail(format!("bad NPY magic at offset {bad}")));
    }
    if bytes.len() < 10 {
        return Err(fail(format!("truncated NPY preamble at offset {}", bytes.len())));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(fail(format!("truncated NPY preamble at offset {}", bytes.len())));
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(fail(format!("unsupported NPY version {v} at offset 6"))),
    };
    let data_start = header_start + header_len;
    if bytes.len() < data_start {
        return Err(fail(format!("header runs past end of file at offset {}", bytes.len())));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| fail(format!("header at offset {header_start} is not text")))?;
    let echo = header.trim();
    let descr = header_value(header, "descr")
        .map(|d| d.trim_matches(['\'', '"']))
        .ok_or_else(|| fail(format!("header lacks 'descr': {echo}")))?;
    let fortran = header_value(header, "fortran_order").ok_or_else(|| fail(format!("header lacks 'fortran_order': {echo}")))?;
    if fortran != "False" {
        return Err(fail(format!("fortran_order arrays are not supported: {echo}")));
    }
    let shape = header_value(header, "shape")
        .and_then(parse_shape)
        .ok_or_else(|| fail(format!("unreadable 'shape': {echo}")))?;
    let count: usize = shape.iter().product();
    let body = &bytes[data_start..];
    let need = |width: usize| -> Result<&[u8]> {
        if body.len() != count * width {
            Err(Error::format(
                context,
                format!("expected {} data bytes after offset {data_start}, found {}", count * width, body.len()),
            ))
        } else {
            Ok(body)
        }
    };
    let data = match descr {
        "|u1" | "<u1" | "u1" => NpyData::U8(need(1)?.to_vec()),
        "|i1" | "<i1" | "i1" => NpyData::I8(need(1)?.iter().map(|&b| b as i8).collect()),
        "<i4" => NpyData::I32(need(4)?.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4"))).collect()),
        "<i8" => NpyData::I64(need(8)?.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8"))).collect()),
        "<f4" => NpyData::F32(need(4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect()),
        _ => return Err(fail(format!("unsupported dtype {descr:?}: {echo}"))),
    };
    Ok(NpyArray { shape, data })
}

/// Serialize a version-1 NPY file.
pub fn encode_npy(shape: &[usize], data: &NpyData) -> Vec<u8> {
    let (descr, payload): (&str, Vec<u8>) = match data {
        NpyData::U8(v) => ("|u1", v.clone()),
        NpyData::I8(v) => ("|i1", v.iter().map(|&b| b as u8).collect()),
        NpyData::I32(v) => ("<i4", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        NpyData::I64(v) => ("<i8", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
        NpyData::F32(v) => ("<f4", v.iter().flat_map(|x| x.to_le_bytes()).collect()),
    };
    let dims = match shape.len() {
        1 => format!("({},)", shape[0]),
        _ => format!("({})", shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")),
    };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': False, 'shape': {dims}, }}");
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&payload);
    out
}

fn read(path: &Path) -> Result<NpyArray> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_npy(&bytes, &path.display().to_string())
}

/// NHWC images (`uint8` or `float32`) as an NCHW tensor in `[0, 1]`. Bytes
/// are divided by 255; floats must already lie in `[0, 1]`.
pub fn npy_to_images(arr: &NpyArray, context: &str) -> Result<Tensor> {
    let &[n, h, w, c] = arr.shape.as_slice() else {
        return Err(Error::format(context, format!("expected N×H×W×C images, got shape {:?}", arr.shape)));
    };
    let value = |i: usize| -> Result<f32> {
        match &arr.data {
            NpyData::U8(v) => Ok(v[i] as f32 / 255.0),
            NpyData::F32(v) if (0.0..=1.0).contains(&v[i]) => Ok(v[i]),
            NpyData::F32(v) => Err(Error::format(context, format!("float pixel {} outside [0, 1]", v[i]))),
            _ => Err(Error::format(context, "images must be uint8 or float32")),
        }
    };
    let mut out = vec![0.0f32; n * c * h * w];
    for b in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[((b * c + ch) * h + y) * w + x] = value(((b * h + y) * w + x) * c + ch)?;
                }
            }
        }
    }
    Tensor::new([n, c, h, w], out)
}

pub fn npy_to_labels(arr: &NpyArray, context: &str) -> Result<Vec<usize>> {
    if arr.shape.len() != 1 {
        return Err(Error::format(context, format!("labels must be 1-D, got shape {:?}", arr.shape)));
    }
    let signed: Vec<i64> = match &arr.data {
        NpyData::U8(v) => v.iter().map(|&x| x as i64).collect(),
        NpyData::I8(v) => v.iter().map(|&x| x as i64).collect(),
        NpyData::I32(v) => v.iter().map(|&x| x as i64).collect(),
        NpyData::I64(v) => v.clone(),
        NpyData::F32(_) => return Err(Error::format(context, "labels must be integers")),
    };
    signed
        .into_iter()
        .map(|v| usize::try_from(v).map_err(|_| Error::format(context, format!("negative label {v}"))))
        .collect()
}

pub fn load_npy_images(path: &Path) -> Result<Tensor> {
    npy_to_images(&read(path)?, &path.display().to_string())
}

pub fn load_npy_labels(path: &Path) -> Result<Vec<usize>> {
    npy_to_labels(&read(path)?, &path.display().to_string())
}

pub fn load_npy_dataset(images: &Path, labels: &Path, classes: usize, name: &str) -> Result<ImageDataset> {
    ImageDataset::new(name, load_npy_images(images)?, load_npy_labels(labels)?, classes)
}

/// One severity slice of a CIFAR-10-C style directory: `<corruption>.npy`
/// holds all five severities stacked (severity 1 first) and `labels.npy`
/// the matching labels.
pub fn load_cifar10c(dir: &Path, corruption: &str, severity: usize) -> Result<ImageDataset> {
    if !(1..=5).contains(&severity) {
        return Err(Error::config(format!("severity must be 1..=5, got {severity}")));
    }
    let images = load_npy_images(&dir.join(format!("{corruption}.npy")))?;
    let labels = load_npy_labels(&dir.join("labels.npy"))?;
    let n = images.shape()[0];
    if n % 5 != 0 || labels.len() != n {
        return Err(Error::format(
            dir.display().to_string(),
            format!("{n} images and {} labels do not form five severities", labels.len()),
        ));
    }
    let per = n / 5;
    let (a, b) = ((severity - 1) * per, severity * per);
    ImageDataset::new(
        format!("{corruption}-{severity}"),
        images.slice_outer(a, b)?,
        labels[a..b].to_vec(),
        10,
    )
}

/// [`load_cifar10c`] wrapped as an evaluation set.
pub fn load_cifar10c_set(dir: &Path, corruption: &str, severity: usize) -> Result<CorruptionSet> {
    Ok(CorruptionSet {
        name: corruption.to_string(),
        severity,
        dataset: load_cifar10c(dir, corruption, severity)?,
    })
}
