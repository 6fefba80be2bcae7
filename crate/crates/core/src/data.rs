//! Deterministic toy datasets, the IDX loader, and pruning-set selection.

use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};
use std::f64::consts::PI;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[N, ..example_shape]`
    pub x: Tensor,
    pub y: Vec<usize>,
    pub num_classes: usize,
}

/// A mini-batch of examples with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.shape().first() != Some(&y.len()) {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: x.shape().to_vec(),
                rhs: vec![y.len()],
            });
        }
        if let Some(&label) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel {
                label,
                classes: num_classes,
            });
        }
        Ok(Self { x, y, num_classes })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn example_shape(&self) -> &[usize] {
        &self.x.shape()[1..]
    }

    fn example_len(&self) -> usize {
        self.example_shape().iter().product()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let d = self.example_len();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&self.x.data()[i * d..(i + 1) * d]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.example_shape());
        Ok(Batch {
            x: Tensor::new(shape, data)?,
            y: indices.iter().map(|&i| self.y[i]).collect(),
        })
    }

    pub fn as_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            y: self.y.clone(),
        }
    }

    /// Same examples viewed with a different per-example shape (e.g. `[C, H, W]`).
    pub fn reshape_examples(&self, shape: &[usize]) -> Result<Self> {
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        Ok(Self {
            x: self.x.reshape(&full)?,
            ..self.clone()
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }
}

/// `k` Gaussian clusters with std `spread` around random unit-norm centers, class-major order.
pub fn gen_blobs(seed: u64, n_per_class: usize, k: usize, d: usize, spread: f64) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("blobs need at least 2 classes, got {k}")));
    }
    if n_per_class == 0 || d == 0 || !(spread >= 0.0) {
        return Err(Error::InvalidArgument("blobs need n_per_class > 0, d > 0 and spread >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|a| a / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(k * n_per_class * d);
    let mut y = Vec::with_capacity(k * n_per_class);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            data.extend(center.iter().map(|c| c + spread * rng.standard_normal()));
            y.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![k * n_per_class, d], data)?, y, k)
}

/// Two interleaved 2-D spirals. Angles are evenly spaced over `[0, 3π]`,
/// radius `angle / 3π` plus `N(0, noise²)`, the second arm rotated by `π`.
pub fn gen_spirals(seed: u64, n_per_class: usize, noise: f64) -> Result<Dataset> {
    if n_per_class == 0 || !(noise >= 0.0) {
        return Err(Error::InvalidArgument("spirals need n_per_class > 0 and noise >= 0".into()));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(4 * n_per_class);
    let mut y = Vec::with_capacity(2 * n_per_class);
    for class in 0..2 {
        for i in 0..n_per_class {
            let angle = spiral_angle(i, n_per_class);
            let r = angle / (3.0 * PI) + noise * rng.standard_normal();
            let phase = angle + class as f64 * PI;
            data.push(r * phase.cos());
            data.push(r * phase.sin());
            y.push(class);
        }
    }
    Dataset::new(Tensor::new(vec![2 * n_per_class, 2], data)?, y, 2)
}

pub fn spiral_angle(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        3.0 * PI * i as f64 / (n - 1) as f64
    }
}

fn read_u32(bytes: &[u8], at: usize, file: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated(file.to_string()))
}

/// Parses an IDX image file (`0x00000803`, N, rows, cols, then N·rows·cols bytes).
pub fn parse_idx_images(bytes: &[u8], name: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::WrongMagic {
            file: name.to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, name)? as usize;
    let rows = read_u32(bytes, 8, name)? as usize;
    let cols = read_u32(bytes, 12, name)? as usize;
    let len = n * rows * cols;
    let payload = bytes.get(16..16 + len).ok_or_else(|| Error::Truncated(name.to_string()))?;
    Ok((n, rows, cols, payload.to_vec()))
}

/// Parses an IDX label file (`0x00000801`, N, then N bytes).
pub fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::WrongMagic {
            file: name.to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n = read_u32(bytes, 4, name)? as usize;
    let payload = bytes.get(8..8 + n).ok_or_else(|| Error::Truncated(name.to_string()))?;
    Ok(payload.to_vec())
}

/// Loads an IDX image/label pair as `[N, 1, rows, cols]` with pixels scaled to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path)?;
    let labels = std::fs::read(labels_path)?;
    let (n, rows, cols, pixels) = parse_idx_images(&images, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&labels, &labels_path.display().to_string())?;
    if labels.len() != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    let y: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let num_classes = y.iter().max().map_or(1, |m| m + 1);
    let x = Tensor::new(
        vec![n.max(1), 1, rows.max(1), cols.max(1)],
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    );
    match x {
        Ok(x) if n > 0 => Dataset::new(x, y, num_classes),
        _ => Err(Error::InvalidArgument(format!("IDX file {} holds no images", images_path.display()))),
    }
}

pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() / (rows * cols);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Number of pruning batches `⌈|D|·K / b⌉`.
pub fn pruning_batch_count(examples_per_class: usize, classes: usize, batch_size: usize) -> usize {
    (examples_per_class * classes).div_ceil(batch_size)
}

/// First `examples_per_class` examples of every class, label-then-index order, cut into batches of `batch_size`.
pub fn pruning_subset(ds: &Dataset, examples_per_class: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if examples_per_class == 0 || batch_size == 0 {
        return Err(Error::InvalidArgument("pruning set needs |D| >= 1 and b >= 1".into()));
    }
    let mut picked = Vec::with_capacity(examples_per_class * ds.num_classes);
    for class in 0..ds.num_classes {
        let members: Vec<usize> = (0..ds.len()).filter(|&i| ds.y[i] == class).take(examples_per_class).collect();
        if members.len() < examples_per_class {
            return Err(Error::ClassTooSmall {
                class,
                available: members.len(),
                requested: examples_per_class,
            });
        }
        picked.extend(members);
    }
    picked.chunks(batch_size).map(|chunk| ds.batch(chunk)).collect()
}
