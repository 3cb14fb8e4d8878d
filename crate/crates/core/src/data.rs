//! MNIST (IDX) and CIFAR-10 (binary version) loaders.
//!
//! Pixels are kept as bytes and normalized when a batch is assembled, so a
//! sample is normalized exactly once per batch it appears in.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{FloatTensor, Shape};

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "DYBNN_DATA";

pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

const IDX_IMAGES_MAGIC: u32 = 2051;
const IDX_LABELS_MAGIC: u32 = 2049;
pub const CIFAR_RECORD: usize = 3073;
const CIFAR_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mnist" => Some(DatasetKind::Mnist),
            "cifar10" | "cifar-10" => Some(DatasetKind::Cifar10),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: FloatTensor,
    pub labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
    labels: Vec<usize>,
    classes: usize,
    mean: Vec<f64>,
    std: Vec<f64>,
    /// Pad-and-crop plus horizontal flip when building training batches.
    augment: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    /// Builds a dataset from raw `(c, h, w)` byte images.
    #[allow(clippy::too_many_arguments)]
    pub fn from_bytes(
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<u8>,
        labels: Vec<usize>,
        classes: usize,
        mean: Vec<f64>,
        std: Vec<f64>,
        augment: bool,
    ) -> Result<Self> {
        let per = channels * height * width;
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::LengthMismatch {
                images: if per == 0 { 0 } else { pixels.len() / per },
                labels: labels.len(),
            });
        }
        if mean.len() != channels || std.len() != channels {
            return Err(Error::shape("Dataset statistics", channels, mean.len().min(std.len())));
        }
        Ok(Dataset {
            channels,
            height,
            width,
            pixels,
            labels,
            classes,
            mean,
            std,
            augment,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn augments(&self) -> bool {
        self.augment
    }

    pub fn with_augmentation(mut self, on: bool) -> Self {
        self.augment = on;
        self
    }

    /// The first `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.channels * self.height * self.width;
        Dataset {
            pixels: self.pixels[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            mean: self.mean.clone(),
            std: self.std.clone(),
            ..*self
        }
    }

    fn raw(&self, i: usize) -> &[u8] {
        let per = self.channels * self.height * self.width;
        &self.pixels[i * per..(i + 1) * per]
    }

    /// Normalized sample `i`, optionally shifted by `(dy, dx)` with zero-pixel
    /// fill and mirrored horizontally.
    fn write_sample(&self, i: usize, dy: isize, dx: isize, flip: bool, out: &mut Vec<f64>) {
        let raw = self.raw(i);
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            for y in 0..h {
                for x in 0..w {
                    let sx = if flip { w - 1 - x } else { x };
                    let (yy, xx) = (y + dy, sx + dx);
                    let byte = if (0..h).contains(&yy) && (0..w).contains(&xx) {
                        raw[(c * self.height + yy as usize) * self.width + xx as usize]
                    } else {
                        0
                    };
                    out.push((byte as f64 / 255.0 - m) / s);
                }
            }
        }
    }

    /// Deterministic batch of the given sample indices, no augmentation.
    pub fn batch(&self, indices: &[usize]) -> LabeledBatch {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.height * self.width);
        for &i in indices {
            self.write_sample(i, 0, 0, false, &mut data);
        }
        self.finish(indices, data)
    }

    fn finish(&self, indices: &[usize], data: Vec<f64>) -> LabeledBatch {
        let shape = Shape::new(indices.len(), self.channels, self.height, self.width);
        LabeledBatch {
            images: FloatTensor::from_vec(shape, data).expect("normalized bytes are finite"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Batches in file order without augmentation.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<LabeledBatch> {
        let idx: Vec<usize> = (0..self.len()).collect();
        idx.chunks(batch_size.max(1)).map(|c| self.batch(c)).collect()
    }

    /// One epoch of shuffled training batches. The order and augmentation
    /// depend only on `(seed, epoch)`; the final partial batch is kept.
    pub fn train_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<LabeledBatch> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng);
        let pad = CIFAR_PAD as isize;
        idx.chunks(batch_size.max(1))
            .map(|chunk| {
                if !self.augment {
                    return self.batch(chunk);
                }
                let mut data = Vec::with_capacity(chunk.len() * self.channels * self.height * self.width);
                for &i in chunk {
                    let dy = rng.gen_range(-pad..=pad);
                    let dx = rng.gen_range(-pad..=pad);
                    let flip = rng.gen_bool(0.5);
                    self.write_sample(i, dy, dx, flip, &mut data);
                }
                self.finish(chunk, data)
            })
            .collect()
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, file: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Malformed {
            file: file.to_path_buf(),
            message: "truncated header".into(),
        })
}

/// Parses an IDX3 image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::MagicMismatch {
            file: path.to_path_buf(),
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let rows = be_u32(&bytes, 8, path)? as usize;
    let cols = be_u32(&bytes, 12, path)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Malformed {
            file: path.to_path_buf(),
            message: format!("header declares {n}x{rows}x{cols} pixels, file holds {}", body.len()),
        });
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::MagicMismatch {
            file: path.to_path_buf(),
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Malformed {
            file: path.to_path_buf(),
            message: format!("header declares {n} labels, file holds {}", body.len()),
        });
    }
    Ok(body.to_vec())
}

fn mnist_split(dir: &Path, prefix: &str) -> Result<Dataset> {
    let (n, rows, cols, pixels) = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if labels.len() != n {
        return Err(Error::LengthMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::Malformed {
            file: dir.join(format!("{prefix}-labels-idx1-ubyte")),
            message: format!("label {bad} outside 0..10"),
        });
    }
    Dataset::from_bytes(
        (1, rows, cols),
        pixels,
        labels.into_iter().map(usize::from).collect(),
        10,
        vec![MNIST_MEAN],
        vec![MNIST_STD],
        false,
    )
}

/// Reads `train-*` and `t10k-*` IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<Splits> {
    Ok(Splits {
        train: mnist_split(dir, "train")?,
        test: mnist_split(dir, "t10k")?,
    })
}

fn read_cifar_files(files: &[PathBuf]) -> Result<(Vec<u8>, Vec<usize>)> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for file in files {
        let bytes = read(file)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::RecordSizeMismatch {
                file: file.clone(),
                size: bytes.len() as u64,
                record: CIFAR_RECORD,
            });
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            if rec[0] > 9 {
                return Err(Error::Malformed {
                    file: file.clone(),
                    message: format!("label {} outside 0..10", rec[0]),
                });
            }
            labels.push(rec[0] as usize);
            pixels.extend_from_slice(&rec[1..]);
        }
    }
    Ok((pixels, labels))
}

/// Parses CIFAR-10 binary batch files. Training batches get crop/flip
/// augmentation; the test split never does.
pub fn load_cifar10_files(train: &[PathBuf], test: &[PathBuf]) -> Result<Splits> {
    let build = |files: &[PathBuf], augment: bool| -> Result<Dataset> {
        let (pixels, labels) = read_cifar_files(files)?;
        Dataset::from_bytes(
            (3, 32, 32),
            pixels,
            labels,
            10,
            CIFAR_MEAN.to_vec(),
            CIFAR_STD.to_vec(),
            augment,
        )
    };
    Ok(Splits {
        train: build(train, true)?,
        test: build(test, false)?,
    })
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir` (or its
/// `cifar-10-batches-bin` subdirectory).
pub fn load_cifar10(dir: &Path) -> Result<Splits> {
    let nested = dir.join("cifar-10-batches-bin");
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    let train: Vec<PathBuf> = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    load_cifar10_files(&train, &[dir.join("test_batch.bin")])
}

pub fn load(kind: DatasetKind, dir: &Path) -> Result<Splits> {
    match kind {
        DatasetKind::Mnist => load_mnist(dir),
        DatasetKind::Cifar10 => load_cifar10(dir),
    }
}
