//! Labelled image datasets: IDX and CIFAR-binary ingestion, per-channel
//! standardization and seeded subsets.

use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tbnet_tensor::Tensor;

use crate::error::{io_err, Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// How a dataset was drawn from its parent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsetDescriptor {
    pub seed: u64,
    pub size: usize,
}

/// Per-channel standardization applied after scaling bytes to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn mnist() -> Self {
        Self {
            mean: vec![0.1307],
            std: vec![0.3081],
        }
    }

    pub fn cifar10() -> Self {
        Self {
            mean: vec![0.4914, 0.4822, 0.4465],
            std: vec![0.2470, 0.2435, 0.2616],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    fn check(&self, channels: usize) -> Result<()> {
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::Data(format!(
                "normalization has {}/{} entries for {channels} channels",
                self.mean.len(),
                self.std.len()
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data("normalization std must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&self, channel: usize, byte: u8) -> f32 {
        (byte as f32 / 255.0 - self.mean[channel]) / self.std[channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N x C x H x W`, standardized.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
    pub subset: Option<SubsetDescriptor>,
}

impl Dataset {
    /// Builds a dataset from raw bytes laid out `N x C x H x W`.
    pub fn from_bytes(
        pixels: &[u8],
        shape: [usize; 4],
        labels: Vec<usize>,
        classes: usize,
        norm: &Normalization,
        split: Split,
    ) -> Result<Self> {
        let [n, c, h, w] = shape;
        norm.check(c)?;
        if pixels.len() != n * c * h * w {
            return Err(Error::Data(format!("{} pixel bytes for shape {shape:?}", pixels.len())));
        }
        let plane = h * w;
        let data = pixels
            .iter()
            .enumerate()
            .map(|(i, &b)| norm.apply((i / plane) % c, b))
            .collect();
        let ds = Self {
            images: Tensor::new(&shape, data)?,
            labels,
            classes,
            split,
            subset: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.dim(0) != self.labels.len() {
            return Err(Error::Data(format!(
                "{} images but {} labels",
                self.images.dim(0),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", self.classes)));
        }
        Ok(())
    }

    /// Stacks datasets of equal sample shape and class count.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let shape = first.sample_shape();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.sample_shape() != shape || p.classes != first.classes {
                return Err(Error::Data(format!(
                    "cannot stack {:?} samples of {} classes onto {shape:?} of {}",
                    p.sample_shape(),
                    p.classes,
                    first.classes
                )));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
        }
        let ds = Dataset {
            images: Tensor::new(&[labels.len(), shape[0], shape[1], shape[2]], data)?,
            labels,
            classes: first.classes,
            split: first.split,
            subset: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let x = self.images.gather_rows(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Seeded uniform sample of `size` elements without replacement.
    pub fn subset(&self, size: usize, seed: u64) -> Result<Dataset> {
        if size == 0 || size > self.len() {
            return Err(Error::Data(format!("subset size {size} not in 1..={}", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let idx = sample(&mut rng, self.len(), size).into_vec();
        let (images, labels) = self.batch(&idx)?;
        Ok(Dataset {
            images,
            labels,
            classes: self.classes,
            split: self.split,
            subset: Some(SubsetDescriptor { seed, size }),
        })
    }

    /// Subset holding `fraction` of the samples (rounded, at least one
    /// requested). Errors when the fraction yields no sample.
    pub fn fraction(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::Data(format!("fraction {fraction} not in (0, 1]")));
        }
        let size = (fraction * self.len() as f64).round() as usize;
        if size == 0 {
            return Err(Error::Data(format!("fraction {fraction} of {} samples is empty", self.len())));
        }
        self.subset(size, seed)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

fn format_err(path: &Path, offset: u64, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        detail: detail.into(),
    }
}

/// Parsed IDX payload: dimension sizes and raw bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxData {
    pub dims: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Parses an unsigned-byte IDX file with the expected big-endian magic.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<IdxData> {
    let read_u32 = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| format_err(path, off as u64, "truncated header"))
    };
    let magic = read_u32(0)?;
    if magic != expected_magic {
        return Err(format_err(
            path,
            0,
            format!("magic 0x{magic:08x}, expected 0x{expected_magic:08x}"),
        ));
    }
    let ndims = (magic & 0xff) as usize;
    let dims: Vec<usize> = (0..ndims).map(|d| read_u32(4 + 4 * d).map(|v| v as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * ndims;
    let len: usize = dims.iter().product();
    let available = bytes.len() - start.min(bytes.len());
    if available < len {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated payload: {len} bytes declared, {available} present"),
        ));
    }
    if available > len {
        return Err(format_err(path, (start + len) as u64, "trailing bytes after payload"));
    }
    Ok(IdxData {
        dims,
        bytes: bytes[start..].to_vec(),
    })
}

pub fn encode_idx(magic: u32, dims: &[usize], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 4 * dims.len() + payload.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(payload);
    out
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(io_err(path))
}

/// Writes an `N x rows x cols` image file and its label file.
pub fn write_idx(images_path: &Path, labels_path: &Path, pixels: &[u8], dims: [usize; 3], labels: &[u8]) -> Result<()> {
    if pixels.len() != dims.iter().product::<usize>() || labels.len() != dims[0] {
        return Err(Error::Data("pixel or label count does not match dims".into()));
    }
    std::fs::write(images_path, encode_idx(IDX_IMAGES_MAGIC, &dims, pixels)).map_err(io_err(images_path))?;
    std::fs::write(labels_path, encode_idx(IDX_LABELS_MAGIC, &[labels.len()], labels)).map_err(io_err(labels_path))?;
    Ok(())
}

/// Loads a single-channel IDX image/label pair.
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize, norm: &Normalization, split: Split) -> Result<Dataset> {
    let images = parse_idx(&read_file(images_path)?, IDX_IMAGES_MAGIC, images_path)?;
    let labels = parse_idx(&read_file(labels_path)?, IDX_LABELS_MAGIC, labels_path)?;
    let [n, h, w] = images.dims[..] else {
        return Err(format_err(images_path, 3, "image file must have three dimensions"));
    };
    if labels.dims != [n] {
        return Err(format_err(
            labels_path,
            4,
            format!("{} labels for {n} images", labels.dims.first().copied().unwrap_or(0)),
        ));
    }
    let labels = labels.bytes.iter().map(|&b| b as usize).collect();
    Dataset::from_bytes(&images.bytes, [n, 1, h, w], labels, classes, norm, split)
}

/// Loads CIFAR binary records: one label byte then 3072 channel-major pixels.
pub fn load_cifar_binary(path: &Path, classes: usize, norm: &Normalization, split: Split) -> Result<Dataset> {
    let bytes = read_file(path)?;
    parse_cifar_binary(&bytes, path, classes, norm, split)
}

pub fn parse_cifar_binary(bytes: &[u8], path: &Path, classes: usize, norm: &Normalization, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        let off = bytes.len() - bytes.len() % CIFAR_RECORD_BYTES;
        return Err(format_err(
            path,
            off as u64,
            format!("length {} is not a positive multiple of {CIFAR_RECORD_BYTES}", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD_BYTES).enumerate() {
        if rec[0] as usize >= classes {
            return Err(format_err(
                path,
                (i * CIFAR_RECORD_BYTES) as u64,
                format!("label {} outside {classes} classes", rec[0]),
            ));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Dataset::from_bytes(&pixels, [n, 3, 32, 32], labels, classes, norm, split)
}

/// Paths of an IDX train/test set in one directory, using the MNIST file
/// names.
pub fn idx_paths(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ]
}
