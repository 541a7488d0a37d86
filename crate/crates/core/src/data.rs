//! Labeled image datasets, their binary file format, and the synthetic
//! depth-selective task.
//!
//! File layout:
//!
//! ```text
//! magic        8 bytes  "GVPTDSET"
//! version      u32 LE
//! n, h, w, c   u64 LE each
//! classes      u64 LE
//! split_len    u32 LE, then split_len bytes of UTF-8 split tag
//! payload_len  u64 LE   number of image values (must equal n·h·w·c)
//! images       payload_len f64 LE, row-major [n, h, w, c]
//! labels       n u32 LE
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, FormatError, Result};
use crate::tensor::{gemm, Tensor};
use crate::util::{derive_rng, push_f64s, read_f64s, sha256_hex, ByteReader};
use crate::vit::check_magic;

pub const DATASET_MAGIC: [u8; 8] = *b"GVPTDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[n, H, W, C]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: impl Into<String>) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Config(format!(
                "dataset images must be [n, H, W, C], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::Config(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Config("a dataset needs at least two classes".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_len(&self) -> usize {
        let (h, w, c) = self.image_dims();
        h * w * c
    }

    /// Images `[k, H, W, C]` and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::OutOfBounds {
                    what: "dataset sample",
                    index: i,
                    len: self.len(),
                });
            }
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
            labels.push(self.labels[i]);
        }
        let (h, w, c) = self.image_dims();
        Ok((Tensor::new([indices.len(), h, w, c], data)?, labels))
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Result<Self> {
        let (images, labels) = self.batch(indices)?;
        Self::new(images, labels, self.num_classes, split)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = self.images.shape();
        let mut out = Vec::with_capacity(64 + self.images.len() * 8 + self.len() * 4);
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for d in [s[0], s[1], s[2], s[3], self.num_classes] {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.split.len() as u32).to_le_bytes());
        out.extend_from_slice(self.split.as_bytes());
        out.extend_from_slice(&(self.images.len() as u64).to_le_bytes());
        push_f64s(&mut out, self.images.data());
        for &y in &self.labels {
            out.extend_from_slice(&(y as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        check_magic(bytes, &DATASET_MAGIC)?;
        let mut r = ByteReader::new(bytes);
        r.take(8)?;
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.u64()? as usize;
        }
        let [n, h, w, c, classes] = dims;
        let split_len = r.u32()? as usize;
        let split = std::str::from_utf8(r.take(split_len)?)
            .map_err(|e| FormatError::Corrupt(format!("split tag: {e}")))?
            .to_string();
        let payload_len = r.u64()? as usize;
        let expected = n
            .checked_mul(h)
            .and_then(|v| v.checked_mul(w))
            .and_then(|v| v.checked_mul(c))
            .ok_or_else(|| FormatError::Corrupt("dimension product overflows".into()))?;
        if payload_len != expected {
            return Err(FormatError::ShapeMismatch {
                name: "images".into(),
                expected: vec![payload_len],
                found: vec![n, h, w, c],
            });
        }
        let images = read_f64s(r.take(payload_len * 8)?);
        let label_bytes = r.take(n * 4)?;
        if r.remaining() != 0 {
            return Err(FormatError::Corrupt(format!(
                "{} trailing bytes after labels",
                r.remaining()
            )));
        }
        let labels = label_bytes
            .chunks_exact(4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .collect();
        let images = Tensor::new([n, h, w, c], images).map_err(|e| FormatError::Corrupt(e.to_string()))?;
        Self::new(images, labels, classes, split).map_err(|e| FormatError::Corrupt(e.to_string()))
    }

    /// Hash of the serialized dataset.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &LabeledDataset) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    LabeledDataset::from_bytes(&bytes).map_err(|e| Error::format(path, e))
}

/// Settings of the synthetic depth-selective task.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthSelectiveSpec {
    pub n: usize,
    pub classes: usize,
    /// Number of mixing levels applied on top of the class templates.
    pub depth: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Standard deviation of the per-sample noise; templates have unit variance.
    pub noise: f64,
}

impl DepthSelectiveSpec {
    /// 32x32x3 images cut into 8x8 patches, matching the toy backbone.
    pub fn toy(n: usize, classes: usize, depth: usize) -> Self {
        Self {
            n,
            classes,
            depth,
            image_size: 32,
            channels: 3,
            patch_size: 8,
            noise: 0.5,
        }
    }
}

/// Class templates plus noise, pushed through `depth` fixed mixing levels.
///
/// Each image is viewed as a `[N × P²C]` patch matrix `X`; one level maps
/// `X ↦ tanh(A·X·B)` with a token-mixing matrix `A` (`N × N`) and a
/// feature-mixing matrix `B` (`P²C × P²C`), both drawn once per level from
/// the seed. Labels cycle through the classes, so the histogram is exactly
/// balanced whenever `classes` divides `n`.
pub fn generate_depth_selective(seed: u64, spec: &DepthSelectiveSpec) -> Result<LabeledDataset> {
    let DepthSelectiveSpec {
        n,
        classes,
        depth,
        image_size,
        channels,
        patch_size,
        noise,
    } = *spec;
    if classes < 2 {
        return Err(Error::Config("depth-selective task needs at least two classes".into()));
    }
    if n == 0 || image_size == 0 || channels == 0 || patch_size == 0 {
        return Err(Error::Config("depth-selective task dimensions must be positive".into()));
    }
    if image_size % patch_size != 0 {
        return Err(Error::Config(format!(
            "image size {image_size} is not a multiple of patch size {patch_size}"
        )));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config("noise must be finite and non-negative".into()));
    }
    let grid = image_size / patch_size;
    let tokens = grid * grid;
    let feat = patch_size * patch_size * channels;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut rng = derive_rng(seed, "templates");
    let templates: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..tokens * feat).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    // Scaled so that each level roughly preserves activation variance.
    let levels: Vec<(Vec<f64>, Vec<f64>)> = (0..depth)
        .map(|lvl| {
            let mut rng = derive_rng(seed, &format!("mixing.{lvl}"));
            let a = (0..tokens * tokens)
                .map(|_| std_normal.sample(&mut rng) / (tokens as f64).sqrt())
                .collect();
            let b = (0..feat * feat)
                .map(|_| std_normal.sample(&mut rng) * 1.5 / (feat as f64).sqrt())
                .collect();
            (a, b)
        })
        .collect();

    let mut rng = derive_rng(seed, "noise");
    let mut patches = vec![0.0; tokens * feat];
    let mut tmp = vec![0.0; tokens * feat];
    let mut images = Vec::with_capacity(n * tokens * feat);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % classes;
        for (p, t) in patches.iter_mut().zip(&templates[y]) {
            *p = t + noise * std_normal.sample(&mut rng);
        }
        for (a, b) in &levels {
            gemm(tokens, tokens, feat, a, (tokens, 1), &patches, (feat, 1), &mut tmp, false);
            gemm(tokens, feat, feat, &tmp, (feat, 1), b, (feat, 1), &mut patches, false);
            patches.iter_mut().for_each(|v| *v = v.tanh());
        }
        images.extend(patches_to_image(&patches, image_size, channels, patch_size));
        labels.push(y);
    }
    let images = Tensor::new([n, image_size, image_size, channels], images)?;
    LabeledDataset::new(images, labels, classes, format!("depth{depth}"))
}

/// Inverse of patch extraction: `[N × P²C]` (patches row-major over the grid,
/// features ordered `(py, px, c)`) back to an `[H, W, C]` image.
fn patches_to_image(patches: &[f64], size: usize, channels: usize, p: usize) -> Vec<f64> {
    let grid = size / p;
    let feat = p * p * channels;
    let mut img = vec![0.0; size * size * channels];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &patches[(gy * grid + gx) * feat..][..feat];
            for py in 0..p {
                for px in 0..p {
                    let dst = ((gy * p + py) * size + gx * p + px) * channels;
                    let src = (py * p + px) * channels;
                    img[dst..dst + channels].copy_from_slice(&row[src..src + channels]);
                }
            }
        }
    }
    img
}

/// Class-stratified split. The first part receives `round(n·fraction)`
/// samples; per class the share is within one sample of `fraction`.
pub fn split(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {fraction} outside (0, 1)")));
    }
    let n = ds.len();
    let target = (n as f64 * fraction).round() as usize;
    if target == 0 || target == n {
        return Err(Error::Config(format!(
            "split of {n} samples at {fraction} leaves one side empty"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    // Largest-remainder apportionment of the target across classes.
    let mut quota: Vec<usize> = by_class
        .iter()
        .map(|v| (v.len() as f64 * fraction).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..ds.num_classes).collect();
    let remainder = |k: usize| by_class[k].len() as f64 * fraction - quota[k] as f64;
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)).then(a.cmp(&b)));
    let mut missing = target.saturating_sub(quota.iter().sum());
    for &k in &order {
        if missing == 0 {
            break;
        }
        if quota[k] < by_class[k].len() {
            quota[k] += 1;
            missing -= 1;
        }
    }
    let mut rng = derive_rng(seed, "split");
    let mut first = Vec::with_capacity(target);
    let mut second = Vec::with_capacity(n - target);
    for (k, idx) in by_class.iter_mut().enumerate() {
        idx.shuffle(&mut rng);
        first.extend_from_slice(&idx[..quota[k]]);
        second.extend_from_slice(&idx[quota[k]..]);
    }
    first.sort_unstable();
    second.sort_unstable();
    Ok((ds.subset(&first, "train")?, ds.subset(&second, "val")?))
}
