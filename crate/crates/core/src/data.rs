//! Dataset ingestion: the IDX image/label format and a synthetic
//! linearly-separable substitute for fast tests.
//!
//! The synthetic generator places one Gaussian-blob center per class inside
//! `[0.35, 0.65]` per pixel, re-drawing centers until every pair is at least
//! `2R + 2` apart in Euclidean distance (`R = 0.5`). Every sample then stays
//! within an `R`-ball of its center (offsets are norm-clamped), so any two
//! classes are separated by a margin of at least 1 by construction, and the
//! per-pixel clamp at `0.3` keeps all values inside `[0, 1]`.

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::path::Path;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// An in-memory split: images scaled to `[0, 1]` plus integer labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Row-major `[n, c, h, w]` pixel data.
    images: Vec<f32>,
    labels: Vec<u8>,
    /// Channels, height, width of one image.
    shape: (usize, usize, usize),
    split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u8>,
        shape: (usize, usize, usize),
        split: &str,
    ) -> Result<Self> {
        let per = shape.0 * shape.1 * shape.2;
        if labels.len() * per != images.len() {
            return Err(Error::DataLength {
                dims: vec![labels.len(), shape.0, shape.1, shape.2],
                expected: labels.len() * per,
                got: images.len(),
            });
        }
        Ok(Dataset { images, labels, shape, split: split.to_string() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.shape.0 * self.shape.1 * self.shape.2;
        &self.images[i * per..(i + 1) * per]
    }

    /// Gather the given sample indices into a `[b, c, h, w]` batch tensor
    /// plus the label vector the loss op expects.
    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<u32>) {
        let (c, h, w) = self.shape;
        let per = c * h * w;
        let mut data = Vec::with_capacity(idx.len() * per);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as u32);
        }
        let t = Tensor::new(vec![idx.len(), c, h, w], data).expect("batch gather size");
        (t, labels)
    }

    /// A new dataset holding only the first `n` samples (used for
    /// reduced-scale runs); `n = 0` or `n >= len` keeps everything.
    pub fn truncated(&self, n: usize) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let per = self.shape.0 * self.shape.1 * self.shape.2;
        Dataset {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            split: self.split.clone(),
        }
    }

    /// Split off the first `k` samples as one dataset and the rest as
    /// another (used to carve a held-out split from one generated set).
    pub fn split_at(&self, k: usize) -> (Dataset, Dataset) {
        assert!(k <= self.len(), "split point beyond dataset");
        let per = self.shape.0 * self.shape.1 * self.shape.2;
        let head = Dataset {
            images: self.images[..k * per].to_vec(),
            labels: self.labels[..k].to_vec(),
            shape: self.shape,
            split: self.split.clone(),
        };
        let tail = Dataset {
            images: self.images[k * per..].to_vec(),
            labels: self.labels[k..].to_vec(),
            shape: self.shape,
            split: self.split.clone(),
        };
        (head, tail)
    }
}

fn read_u32_be(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(Error::DataFormat {
            path: path.to_path_buf(),
            reason: format!("file truncated inside {what}"),
        });
    }
    Ok(u32::from_be_bytes([bytes[offset], bytes[offset + 1], bytes[offset + 2], bytes[offset + 3]]))
}

/// Load one split from a pair of IDX files (big-endian headers, magic
/// `0x00000803` for images and `0x00000801` for labels). Pixels are scaled
/// by `1/255`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let magic = read_u32_be(&img_bytes, 0, images_path, "header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::DataFormat {
            path: images_path.to_path_buf(),
            reason: format!("bad magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let n = read_u32_be(&img_bytes, 4, images_path, "header")? as usize;
    let h = read_u32_be(&img_bytes, 8, images_path, "header")? as usize;
    let w = read_u32_be(&img_bytes, 12, images_path, "header")? as usize;
    let expected = 16 + n * h * w;
    if img_bytes.len() != expected {
        return Err(Error::DataFormat {
            path: images_path.to_path_buf(),
            reason: format!(
                "payload holds {} bytes, header promises {} ({} {}x{} images)",
                img_bytes.len() - 16,
                expected - 16,
                n,
                h,
                w
            ),
        });
    }

    let lab_bytes = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    let magic = read_u32_be(&lab_bytes, 0, labels_path, "header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::DataFormat {
            path: labels_path.to_path_buf(),
            reason: format!("bad magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let n_labels = read_u32_be(&lab_bytes, 4, labels_path, "header")? as usize;
    if n_labels != n {
        return Err(Error::DataFormat {
            path: labels_path.to_path_buf(),
            reason: format!("{n_labels} labels for {n} images"),
        });
    }
    if lab_bytes.len() != 8 + n {
        return Err(Error::DataFormat {
            path: labels_path.to_path_buf(),
            reason: format!("payload holds {} bytes, header promises {}", lab_bytes.len() - 8, n),
        });
    }
    let labels = lab_bytes[8..].to_vec();
    if let Some(&bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::DataFormat {
            path: labels_path.to_path_buf(),
            reason: format!("label {bad} out of range for a 10-class dataset"),
        });
    }

    let images: Vec<f32> = img_bytes[16..].iter().map(|&p| p as f32 / 255.0).collect();
    let split = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".to_string());
    Dataset::new(images, labels, (1, h, w), &split)
}

/// Load the conventionally named train or test pair from a directory.
pub fn load_mnist_split(dir: &Path, train: bool) -> Result<Dataset> {
    let (images, labels) = if train {
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
    } else {
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
    };
    load_mnist_idx(&dir.join(images), &dir.join(labels))
}

/// Center coordinates live in `[0.35, 0.65]`; offsets are clamped to the
/// `SYNTH_RADIUS` ball (and `0.3` per pixel), and centers are re-drawn until
/// every pair is `2 * SYNTH_RADIUS + 2 * SYNTH_MARGIN` apart.
pub const SYNTH_RADIUS: f64 = 0.5;
pub const SYNTH_MARGIN: f64 = 1.0;

/// Deterministic Gaussian-blob classification data shaped like 28x28
/// single-channel images, stratified over `classes` labels round-robin,
/// linearly separable with margin at least [`SYNTH_MARGIN`].
pub fn synthetic_classification(n: usize, classes: usize, seed: u64) -> Dataset {
    assert!(classes >= 1 && n >= classes, "need at least one sample per class");
    let dim = 28 * 28;
    let rng = RngState::new(seed);
    let mut center_rng = rng.stream(0);
    let min_dist = 2.0 * SYNTH_RADIUS + 2.0 * SYNTH_MARGIN;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centers.len() < classes {
        let cand: Vec<f64> = (0..dim).map(|_| center_rng.uniform(0.35, 0.65)).collect();
        let ok = centers.iter().all(|c| {
            let d2: f64 = c.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= min_dist * min_dist
        });
        if ok {
            centers.push(cand);
        }
    }

    let mut offset_rng = rng.stream(1);
    let sigma = SYNTH_RADIUS / (2.0 * (dim as f64).sqrt());
    let mut images = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        let mut offset: Vec<f64> = (0..dim)
            .map(|_| (offset_rng.next_normal() * sigma).clamp(-0.3, 0.3))
            .collect();
        let norm = offset.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > SYNTH_RADIUS {
            let s = SYNTH_RADIUS / norm;
            for v in &mut offset {
                *v *= s;
            }
        }
        for (c, o) in centers[k].iter().zip(&offset) {
            images.push((c + o) as f32);
        }
        labels.push(k as u8);
    }
    Dataset::new(images, labels, (1, 28, 28), "synthetic").expect("synthetic sizes agree")
}
