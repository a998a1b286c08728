//! Dataset ingestion: IDX image/label files and verification-pair
//! generation.
//!
//! IDX is the standard MNIST container: a big-endian 32-bit magic
//! (0x00000803 for images, 0x00000801 for labels), big-endian 32-bit
//! extents, then raw unsigned bytes. Pixels are scaled to `[0, 1]` on load;
//! no mean subtraction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::verify::{PairList, PairRecord};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled image set with pixels in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// `N x 1 x H x W`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, split: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "labeled_dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            images,
            labels,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copy the given sample indices into a contiguous batch.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let sample: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * sample);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * sample..(i + 1) * sample]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(&shape, data).expect("gather shape"), labels)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::DataFormat {
            path: path.display().to_string(),
            detail: "header truncated".into(),
        })
}

/// Load an IDX image file as an `N x 1 x H x W` tensor scaled by 1/255.
pub fn load_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("wrong magic {magic:#010x}, expected {IMAGE_MAGIC:#010x} (images)"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let expect = 16 + n * h * w;
    if bytes.len() != expect {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("expected {expect} bytes for {n}x{h}x{w}, got {}", bytes.len()),
        });
    }
    let data: Vec<f64> = bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[n, 1, h, w], data)
}

/// Load an IDX label file.
pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("wrong magic {magic:#010x}, expected {LABEL_MAGIC:#010x} (labels)"),
        });
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let expect = 8 + n;
    if bytes.len() != expect {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("expected {expect} bytes for {n} labels, got {}", bytes.len()),
        });
    }
    Ok(bytes[8..].iter().map(|&b| b as usize).collect())
}

/// Load a matching image/label pair into a dataset.
pub fn load_dataset(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    split: &str,
) -> Result<LabeledDataset> {
    let images = load_idx_images(&images_path)?;
    let labels = load_idx_labels(&labels_path)?;
    if images.shape()[0] != labels.len() {
        return Err(Error::DataFormat {
            path: images_path.as_ref().display().to_string(),
            detail: format!(
                "{} images but {} labels in {}",
                images.shape()[0],
                labels.len(),
                labels_path.as_ref().display()
            ),
        });
    }
    LabeledDataset::new(images, labels, split)
}

/// Write raw `u8` pixels as an IDX image file.
pub fn write_idx_images(
    path: impl AsRef<Path>,
    pixels: &[u8],
    n: usize,
    h: usize,
    w: usize,
) -> Result<()> {
    let path = path.as_ref();
    if pixels.len() != n * h * w {
        return Err(Error::DataFormat {
            path: path.display().to_string(),
            detail: format!("{} pixels cannot form {n}x{h}x{w}", pixels.len()),
        });
    }
    let mut bytes = Vec::with_capacity(16 + pixels.len());
    bytes.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Write labels as an IDX label file.
pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Sample genuine and impostor pairs, uniformly and without replacement
/// within each category. Deterministic in `seed`; duplicates across the two
/// categories cannot occur (they have disjoint label relations).
pub fn generate_pairs(
    labels: &[usize],
    n_genuine: usize,
    n_impostor: usize,
    seed: u64,
) -> Result<PairList> {
    if n_genuine == 0 || n_impostor == 0 {
        return Err(Error::InsufficientData {
            detail: format!(
                "need at least one genuine and one impostor pair, got {n_genuine}/{n_impostor}"
            ),
        });
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    for (class, members) in &by_class {
        if members.len() < 2 {
            return Err(Error::InsufficientData {
                detail: format!("class {class} has {} sample(s), need >= 2", members.len()),
            });
        }
    }
    let classes: Vec<&Vec<usize>> = by_class.values().collect();
    let max_genuine: usize = classes.iter().map(|m| m.len() * (m.len() - 1) / 2).sum();
    if n_genuine > max_genuine {
        return Err(Error::InsufficientData {
            detail: format!("{n_genuine} genuine pairs requested, only {max_genuine} distinct exist"),
        });
    }

    let mut rng = Rng::new(seed);
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::with_capacity(n_genuine + n_impostor);

    while pairs.len() < n_genuine {
        let class = classes[rng.next_below(classes.len())];
        let a = class[rng.next_below(class.len())];
        let b = class[rng.next_below(class.len())];
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            pairs.push(PairRecord {
                a: key.0,
                b: key.1,
                same: true,
            });
        }
    }

    seen.clear();
    let mut impostors = 0usize;
    while impostors < n_impostor {
        let a = rng.next_below(labels.len());
        let b = rng.next_below(labels.len());
        if labels[a] == labels[b] {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            pairs.push(PairRecord {
                a: key.0,
                b: key.1,
                same: false,
            });
            impostors += 1;
        }
    }

    Ok(PairList { pairs })
}
