//! In-memory labelled image sets and the IDX / CIFAR-10 binary / synthetic loaders.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    /// `[N×C×H×W]`.
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Element> Dataset<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("images {:?} vs {} labels", images.shape(), labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        Ok(Dataset { images, labels, classes })
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

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Gathers the samples at `indices`, in order.
    pub fn batch(&self, indices: &[usize]) -> Batch<T> {
        let n = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * n..(i + 1) * n]);
        }
        let [c, h, w] = self.sample_shape();
        Batch {
            images: Tensor::new(vec![indices.len(), c, h, w], data).expect("gathered sizes agree"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<T> {
        let b = self.batch(indices);
        Dataset {
            images: b.images,
            labels: b.labels,
            classes: self.classes,
        }
    }

    /// Contiguous batches of at most `batch_size` samples.
    pub fn batches(&self, batch_size: usize) -> impl Iterator<Item = Batch<T>> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }
}

/// Subtracts each channel's mean and divides by its standard deviation,
/// both taken over the whole set. Constant channels are only centred.
pub fn standardize_per_channel(values: &mut [f64], n: usize, c: usize) {
    let plane = values.len() / (n * c).max(1);
    for ch in 0..c {
        let idx = |i: usize, k: usize| (i * c + ch) * plane + k;
        let count = (n * plane) as f64;
        let mut mean = 0.0;
        for i in 0..n {
            for k in 0..plane {
                mean += values[idx(i, k)];
            }
        }
        mean /= count;
        let mut var = 0.0;
        for i in 0..n {
            for k in 0..plane {
                var += (values[idx(i, k)] - mean).powi(2);
            }
        }
        let std = (var / count).sqrt();
        let scale = if std > 0.0 { 1.0 / std } else { 1.0 };
        for i in 0..n {
            for k in 0..plane {
                let v = &mut values[idx(i, k)];
                *v = (*v - mean) * scale;
            }
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, "truncated header"))
}

/// Reads an IDX image file (`[N, H, W]` unsigned bytes) and its label file.
/// Pixels are scaled to `[0, 1]`, then standardized.
pub fn load_idx<T: Element>(image_path: &Path, label_path: &Path, classes: usize) -> Result<Dataset<T>> {
    let img = read_file(image_path)?;
    let lbl = read_file(label_path)?;
    let magic = be_u32(&img, 0, image_path)?;
    if magic != IDX_IMAGES {
        return Err(Error::format(image_path, format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let magic = be_u32(&lbl, 0, label_path)?;
    if magic != IDX_LABELS {
        return Err(Error::format(label_path, format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let n = be_u32(&img, 4, image_path)? as usize;
    let h = be_u32(&img, 8, image_path)? as usize;
    let w = be_u32(&img, 12, image_path)? as usize;
    let nl = be_u32(&lbl, 4, label_path)? as usize;
    if n != nl {
        return Err(Error::format(label_path, format!("{nl} labels for {n} images")));
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::format(image_path, "empty image set"));
    }
    let pixels = &img[16..];
    if pixels.len() < n * h * w {
        return Err(Error::format(image_path, format!("truncated: {} of {} pixel bytes", pixels.len(), n * h * w)));
    }
    let labels = &lbl[8..];
    if labels.len() < n {
        return Err(Error::format(label_path, format!("truncated: {} of {n} labels", labels.len())));
    }
    let labels: Vec<usize> = labels[..n].iter().map(|&b| b as usize).collect();
    let mut values: Vec<f64> = pixels[..n * h * w].iter().map(|&b| b as f64 / 255.0).collect();
    standardize_per_channel(&mut values, n, 1);
    let images = Tensor::from_f64(vec![n, 1, h, w], &values)?;
    Dataset::new(images, labels, classes)
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// First `size` indices of a seeded permutation of `0..n`, in ascending order.
/// `size == 0` or `size ≥ n` selects everything.
pub fn subsample_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if size == 0 || size >= n {
        return idx;
    }
    idx.shuffle(&mut crate::seed::substream(seed, "subsample", 0));
    idx.truncate(size);
    idx.sort_unstable();
    idx
}

/// Concatenates CIFAR-10 binary batch files (label byte + 3072 channel-planar pixels).
pub fn load_cifar10_bin<T: Element>(paths: &[PathBuf], subset_size: usize, seed: u64) -> Result<Dataset<T>> {
    let mut bytes = Vec::new();
    for path in paths {
        let b = read_file(path)?;
        if b.is_empty() || b.len() % CIFAR_RECORD != 0 {
            return Err(Error::format(
                path,
                format!("length {} is not a positive multiple of {CIFAR_RECORD}", b.len()),
            ));
        }
        bytes.extend(b);
    }
    if bytes.is_empty() {
        return Err(Error::validation("dataset.paths", "no CIFAR-10 files given"));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let keep = subsample_indices(n, subset_size, seed);
    let mut labels = Vec::with_capacity(keep.len());
    let mut values = Vec::with_capacity(keep.len() * (CIFAR_RECORD - 1));
    for &i in &keep {
        let rec = &bytes[i * CIFAR_RECORD..(i + 1) * CIFAR_RECORD];
        labels.push(rec[0] as usize);
        values.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    standardize_per_channel(&mut values, keep.len(), 3);
    let images = Tensor::from_f64(vec![keep.len(), 3, 32, 32], &values)?;
    Dataset::new(images, labels, 10)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    /// `[C, H, W]`.
    pub shape: [usize; 3],
    /// Standard deviation of the per-pixel noise around each class pattern.
    pub noise: f64,
    /// Weight of a pattern shared by all classes, making them harder to tell apart.
    #[serde(default)]
    pub shared: f64,
}

/// Class-conditional Gaussian blobs: each class has a fixed random spatial
/// pattern; samples add isotropic noise. Returns a stratified 80/20
/// train/test split, both standardized with the training statistics.
pub fn synth_dataset<T: Element>(spec: &SynthSpec, seed: u64) -> Result<(Dataset<T>, Dataset<T>)> {
    if spec.classes < 2 {
        return Err(Error::validation("dataset.classes", "need at least 2 classes"));
    }
    if spec.per_class < 2 {
        return Err(Error::validation("dataset.per_class", "need at least 2 samples per class"));
    }
    let d: usize = spec.shape.iter().product();
    if d == 0 {
        return Err(Error::validation("dataset.shape", "dimensions must be positive"));
    }
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut shared_rng = crate::seed::substream(seed, "synth/shared", 0);
    let shared: Vec<f64> = (0..d).map(|_| normal(&mut shared_rng)).collect();
    let patterns: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let mut rng = crate::seed::substream(seed, "synth/pattern", c as u64);
            (0..d).map(|i| normal(&mut rng) + spec.shared * shared[i]).collect()
        })
        .collect();
    let n_test = (spec.per_class / 5).max(1);
    let n_train = spec.per_class - n_test;
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    let mut noise_rng = crate::seed::substream(seed, "synth/noise", 0);
    // interleave classes so contiguous batches are balanced
    for i in 0..spec.per_class {
        for (c, pattern) in patterns.iter().enumerate() {
            let dst = if i < n_train { &mut train } else { &mut test };
            dst.0.extend(pattern.iter().map(|&m| m + spec.noise * normal(&mut noise_rng)));
            dst.1.push(c);
        }
    }
    let [c, h, w] = spec.shape;
    let n_tr = train.1.len();
    let (mean, std) = channel_stats(&train.0, n_tr, c);
    let to_set = |(mut values, labels): (Vec<f64>, Vec<usize>)| -> Result<Dataset<T>> {
        let n = labels.len();
        apply_channel_stats(&mut values, n, c, &mean, &std);
        Dataset::new(Tensor::from_f64(vec![n, c, h, w], &values)?, labels, spec.classes)
    };
    Ok((to_set(train)?, to_set(test)?))
}

fn channel_stats(values: &[f64], n: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = values.len() / (n * c);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for (i, chunk) in values.chunks(plane).enumerate() {
        mean[i % c] += chunk.iter().sum::<f64>();
    }
    mean.iter_mut().for_each(|m| *m /= (n * plane) as f64);
    for (i, chunk) in values.chunks(plane).enumerate() {
        var[i % c] += chunk.iter().map(|v| (v - mean[i % c]).powi(2)).sum::<f64>();
    }
    let std = var.iter().map(|v| (v / (n * plane) as f64).sqrt()).collect();
    (mean, std)
}

fn apply_channel_stats(values: &mut [f64], n: usize, c: usize, mean: &[f64], std: &[f64]) {
    let plane = values.len() / (n * c).max(1);
    for (i, chunk) in values.chunks_mut(plane).enumerate() {
        let ch = i % c;
        let scale = if std[ch] > 0.0 { 1.0 / std[ch] } else { 1.0 };
        chunk.iter_mut().for_each(|v| *v = (*v - mean[ch]) * scale);
    }
}

/// How to bring a dataset to the spatial size a network expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resize {
    /// Shapes must already match.
    None,
    /// Nearest-neighbour sampling; any size.
    Nearest,
    /// Box average over integer downscale factors.
    Area,
}

impl FromStr for Resize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Resize::None),
            "nearest" => Ok(Resize::Nearest),
            "area" => Ok(Resize::Area),
            other => Err(Error::validation("resize", format!("unknown policy `{other}`"))),
        }
    }
}

/// Resamples every image to `[h, w]`. Channel counts must agree.
pub fn resize<T: Element>(data: &Dataset<T>, target: [usize; 3], policy: Resize) -> Result<Dataset<T>> {
    let [c, h, w] = data.sample_shape();
    let [tc, th, tw] = target;
    if c != tc {
        return Err(Error::validation("resize", format!("dataset has {c} channels, network expects {tc}")));
    }
    if (h, w) == (th, tw) {
        return Ok(data.clone());
    }
    let n = data.len();
    let src = data.images.data();
    let mut out = Vec::with_capacity(n * c * th * tw);
    match policy {
        Resize::None => {
            return Err(Error::validation(
                "resize",
                format!("dataset images are {h}×{w} but the network expects {th}×{tw}; choose a resize policy"),
            ))
        }
        Resize::Nearest => {
            for plane in src.chunks(h * w) {
                for y in 0..th {
                    let sy = y * h / th;
                    for x in 0..tw {
                        out.push(plane[sy * w + x * w / tw]);
                    }
                }
            }
        }
        Resize::Area => {
            if h % th != 0 || w % tw != 0 {
                return Err(Error::validation(
                    "resize",
                    format!("area resize needs integer factors, {h}×{w} → {th}×{tw}"),
                ));
            }
            let (fy, fx) = (h / th, w / tw);
            let inv = T::one() / T::from_usize(fy * fx).unwrap();
            for plane in src.chunks(h * w) {
                for y in 0..th {
                    for x in 0..tw {
                        let mut acc = T::zero();
                        for dy in 0..fy {
                            for dx in 0..fx {
                                acc += plane[(y * fy + dy) * w + x * fx + dx];
                            }
                        }
                        out.push(acc * inv);
                    }
                }
            }
        }
    }
    Dataset::new(Tensor::new(vec![n, c, th, tw], out)?, data.labels.clone(), data.classes)
}
