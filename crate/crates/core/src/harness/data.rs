//! Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches and
//! seeded synthetic sets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Purpose, Stream};
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;

/// Samples stored flat in f32, with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(
        sample_shape: Vec<usize>,
        features: Vec<f32>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let d: usize = sample_shape.iter().product();
        if d == 0 || features.len() != d * labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} features for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidInput(format!("label {l} >= {classes} classes")));
        }
        Ok(Dataset {
            sample_shape,
            features,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let d = self.sample_len();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        let d = self.sample_len();
        let mut features = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            features.extend_from_slice(self.sample(i));
        }
        Dataset {
            sample_shape: self.sample_shape.clone(),
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// Stacks the samples at `indices` into a batch of shape `[n, ..input_shape]`.
    pub fn batch<T: Real>(
        &self,
        indices: &[usize],
        input_shape: &[usize],
    ) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.sample_len();
        if input_shape.iter().product::<usize>() != d {
            return Err(Error::Dimension {
                layer: "input".into(),
                detail: format!(
                    "samples of shape {:?} for input {input_shape:?}",
                    self.sample_shape
                ),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend(self.sample(i).iter().map(|&x| T::from_f64(x as f64)));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(input_shape);
        Ok((
            Tensor::new(shape, data)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Seeded split into `(first, second)` where `second` holds
    /// `round(fraction * len)` samples (at least one of each when possible).
    pub fn split(&self, fraction: f64, mut rng: Stream) -> (Dataset, Dataset) {
        let n = self.len();
        let mut perm = rng.permutation(n);
        let k = ((fraction * n as f64).round() as usize)
            .min(n.saturating_sub(1))
            .max(usize::from(n > 1));
        let second = perm.split_off(n - k);
        (self.select(&perm), self.select(&second))
    }
}

fn dataset_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| dataset_err(path, e.to_string()))
}

/// Parses an IDX file with unsigned-byte payload, returning its dimensions
/// and payload.
pub fn parse_idx<'a>(bytes: &'a [u8], magic: u32, path: &Path) -> Result<(Vec<usize>, &'a [u8])> {
    if bytes.len() < 4 {
        return Err(dataset_err(path, "truncated header"));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(dataset_err(
            path,
            format!("bad magic {found:#010x}, expected {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(dataset_err(path, "truncated dimension list"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| dataset_err(path, "dimension product overflows"))?;
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(dataset_err(
            path,
            format!(
                "payload of {} bytes, dimensions {dims:?} need {expected}",
                payload.len()
            ),
        ));
    }
    Ok((dims, payload))
}

/// Seeded subset without replacement; the whole set (shuffled) when
/// `subset_size` is absent or not smaller than `n`.
fn subset_indices(n: usize, subset_size: Option<usize>, seed: u64) -> Vec<usize> {
    let mut perm = Stream::new(seed, Purpose::Subset, 0).permutation(n);
    if let Some(k) = subset_size {
        perm.truncate(k.min(n));
    }
    perm
}

/// Decodes MNIST-style IDX image and label bytes.
pub fn decode_mnist(
    image_bytes: &[u8],
    label_bytes: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(image_bytes, IDX_IMAGES_MAGIC, images_path)?;
    let (ldims, labels) = parse_idx(label_bytes, IDX_LABELS_MAGIC, labels_path)?;
    if idims[0] != ldims[0] {
        return Err(dataset_err(
            labels_path,
            format!("{} labels for {} images", ldims[0], idims[0]),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 9) {
        return Err(dataset_err(labels_path, format!("label {l} out of range")));
    }
    if idims[0] == 0 || idims[1] == 0 || idims[2] == 0 {
        return Err(dataset_err(images_path, "empty image set"));
    }
    Dataset::new(
        idims[1..].to_vec(),
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        labels.iter().map(|&l| l as usize).collect(),
        10,
    )
}

/// Loads an IDX image/label pair, scales pixels to `[0, 1]` and draws a
/// seeded subset.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
    subset_size: Option<usize>,
    seed: u64,
) -> Result<Dataset> {
    let full = decode_mnist(&read(images_path)?, &read(labels_path)?, images_path, labels_path)?;
    Ok(full.select(&subset_indices(full.len(), subset_size, seed)))
}

/// Decodes CIFAR-10 binary records: one label byte then 3x1024
/// channel-planar pixels.
pub fn decode_cifar10(bytes: &[u8], path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(dataset_err(
            path,
            format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let mut pixels = Vec::with_capacity(bytes.len() / CIFAR_RECORD * 3072);
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(dataset_err(path, format!("record {i}: label {}", rec[0])));
        }
        labels.push(rec[0] as usize);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((pixels, labels))
}

/// Loads CIFAR-10 binary batches with per-channel normalization.
pub fn load_cifar10_bin(
    paths: &[PathBuf],
    subset_size: Option<usize>,
    seed: u64,
    mean: [f64; 3],
    std: [f64; 3],
) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::Config("no CIFAR-10 files given".into()));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in paths {
        let (px, lb) = decode_cifar10(&read(p)?, p)?;
        pixels.extend(px);
        labels.extend(lb);
    }
    let keep = subset_indices(labels.len(), subset_size, seed);
    let mut features = Vec::with_capacity(keep.len() * 3072);
    for &i in &keep {
        for (c, plane) in pixels[i * 3072..(i + 1) * 3072].chunks(1024).enumerate() {
            features.extend(
                plane
                    .iter()
                    .map(|&p| ((p as f64 / 255.0 - mean[c]) / std[c]) as f32),
            );
        }
    }
    Dataset::new(
        vec![3, 32, 32],
        features,
        keep.iter().map(|&i| labels[i]).collect(),
        10,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthVariant {
    #[default]
    Blobs,
    Moons,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    #[serde(default)]
    pub variant: SynthVariant,
}

/// Seeded Gaussian blobs (unit variance, class centers `separation` apart)
/// or two interleaved half circles pushed apart by `separation`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 || spec.per_class < 1 || spec.dim < 1 {
        return Err(Error::Config(format!("degenerate synthetic spec {spec:?}")));
    }
    if !(spec.separation >= 0.0 && spec.separation.is_finite()) {
        return Err(Error::Config(format!("separation {}", spec.separation)));
    }
    let mut rng = Stream::new(seed, Purpose::Synthetic, 0);
    let n = spec.classes * spec.per_class;
    let mut features = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    match spec.variant {
        SynthVariant::Blobs => {
            let centers: Vec<Vec<f64>> = if spec.classes <= spec.dim {
                // Scaled unit vectors are pairwise `separation` apart.
                let s = spec.separation / std::f64::consts::SQRT_2;
                (0..spec.classes)
                    .map(|c| (0..spec.dim).map(|j| if j == c { s } else { 0.0 }).collect())
                    .collect()
            } else {
                let mut crng = Stream::new(seed, Purpose::Synthetic, 1);
                (0..spec.classes)
                    .map(|_| (0..spec.dim).map(|_| spec.separation * crng.normal()).collect())
                    .collect()
            };
            for i in 0..n {
                let c = i % spec.classes;
                features.extend(centers[c].iter().map(|&m| (m + rng.normal()) as f32));
                labels.push(c);
            }
        }
        SynthVariant::Moons => {
            if spec.classes != 2 || spec.dim < 2 {
                return Err(Error::Config(
                    "two moons need 2 classes and dim >= 2".into(),
                ));
            }
            for i in 0..n {
                let c = i % 2;
                let t = std::f64::consts::PI * rng.uniform();
                let (x, y) = if c == 0 {
                    (t.cos(), t.sin() + 0.5 * spec.separation)
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin() - 0.5 * spec.separation)
                };
                features.push((x + 0.1 * rng.normal()) as f32);
                features.push((y + 0.1 * rng.normal()) as f32);
                for _ in 2..spec.dim {
                    features.push((0.1 * rng.normal()) as f32);
                }
                labels.push(c);
            }
        }
    }
    Dataset::new(vec![spec.dim], features, labels, spec.classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut out = magic.to_be_bytes().to_vec();
        for d in dims {
            out.extend(d.to_be_bytes());
        }
        out.extend_from_slice(payload);
        out
    }

    #[test]
    fn mnist_header_and_scaling() {
        let mut px = vec![0u8; 3 * 4];
        px[0] = 255;
        let images = idx(IDX_IMAGES_MAGIC, &[3, 2, 2], &px);
        let labels = idx(IDX_LABELS_MAGIC, &[3], &[7, 0, 9]);
        let p = Path::new("x");
        let d = decode_mnist(&images, &labels, p, p).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.sample_shape, vec![2, 2]);
        assert_eq!(d.features[0], 1.0);
        assert_eq!(d.labels, vec![7, 0, 9]);

        let bad = idx(IDX_LABELS_MAGIC, &[3], &[7, 0, 10]);
        assert!(decode_mnist(&images, &bad, p, p).is_err());
        let swapped = idx(IDX_LABELS_MAGIC, &[3, 2, 2], &px);
        assert!(decode_mnist(&swapped, &labels, p, p).is_err());
        for cut in 0..images.len() {
            assert!(decode_mnist(&images[..cut], &labels, p, p).is_err());
        }
    }

    #[test]
    fn cifar_records() {
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(i);
            bytes.extend(std::iter::repeat(i).take(3072));
        }
        let (px, labels) = decode_cifar10(&bytes, Path::new("c")).unwrap();
        assert_eq!(labels.len(), 10);
        assert_eq!(labels[7], 7);
        assert_eq!(px.len(), 10 * 3072);
        assert!(decode_cifar10(&bytes[..bytes.len() - 1], Path::new("c")).is_err());
        bytes[0] = 10;
        assert!(decode_cifar10(&bytes, Path::new("c")).is_err());
    }

    #[test]
    fn synthetic_is_seeded() {
        let spec = SynthSpec {
            classes: 3,
            per_class: 20,
            dim: 4,
            separation: 2.0,
            variant: SynthVariant::Blobs,
        };
        assert_eq!(synth_dataset(&spec, 4).unwrap(), synth_dataset(&spec, 4).unwrap());
        assert_ne!(synth_dataset(&spec, 4).unwrap(), synth_dataset(&spec, 5).unwrap());
    }

    #[test]
    fn split_sizes() {
        let spec = SynthSpec {
            classes: 2,
            per_class: 50,
            dim: 2,
            separation: 1.0,
            variant: SynthVariant::Moons,
        };
        let d = synth_dataset(&spec, 0).unwrap();
        let (a, b) = d.split(0.1, Stream::new(3, Purpose::Split, 0));
        assert_eq!((a.len(), b.len()), (90, 10));
    }
}
