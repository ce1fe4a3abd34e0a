//! Dataset loading, augmentation, subsets and the noise dataset.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

pub const NOISE_MEAN: f64 = 0.5;
pub const NOISE_STD: f64 = 0.25;
pub const MAX_SHIFT: i64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    /// `[N, C, H, W]`, raw pixel values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidShape {
                shape: images.shape().to_vec(),
                reason: "dataset images must be [N, C, H, W]".into(),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: class_count,
            });
        }
        Ok(LabeledDataset {
            name: name.into(),
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Copies the listed samples into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape();
        let images = Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty gather");
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (images, labels)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        let (images, labels) = self.gather(indices);
        Ok(LabeledDataset {
            name: self.name.clone(),
            images,
            labels,
            class_count: self.class_count,
        })
    }

    /// Equal per-class counts chosen by `seed`; sample order interleaves
    /// classes so any prefix stays roughly balanced.
    pub fn stratified_subset(&self, per_class: usize, seed: u64) -> Result<Self> {
        let mut by_class = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for (class, members) in by_class.iter_mut().enumerate() {
            if members.len() < per_class {
                return Err(Error::invalid(format!(
                    "class {class} has {} samples, {per_class} requested",
                    members.len()
                )));
            }
            let mut rng = stream(seed, Stream::Subset, &[class as u64]);
            members.shuffle(&mut rng);
            members.truncate(per_class);
            members.sort_unstable();
        }
        let indices: Vec<usize> = (0..per_class)
            .flat_map(|k| by_class.iter().map(move |m| m[k]))
            .collect();
        self.subset(&indices)
    }

    /// SHA-256 over shape, pixels and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for &d in self.images.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.images.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Reads an IDX image file (magic 0x803) into `[N, H, W]` bytes.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != 0x0000_0803 {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected 0x00000803"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    let h = be_u32(&bytes, 8, path)? as usize;
    let w = be_u32(&bytes, 12, path)? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {need} bytes expected"),
        ));
    }
    Ok((n, h, w, bytes[16..need].to_vec()))
}

/// Reads an IDX label file (magic 0x801).
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read_maybe_gz(path)?;
    let magic = be_u32(&bytes, 0, path)?;
    if magic != 0x0000_0801 {
        return Err(format_err(
            path,
            0,
            format!("bad magic {magic:#010x}, expected 0x00000801"),
        ));
    }
    let n = be_u32(&bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated: {} bytes expected", 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// MNIST from IDX files (plain or gzip), zero-padded from 28x28 to 32x32.
pub fn load_mnist_idx(images: &Path, labels: &Path) -> Result<LabeledDataset> {
    let (n, h, w, pixels) = read_idx_images(images)?;
    let labels = read_idx_labels(labels)?;
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "{n} images but {} labels",
            labels.len()
        )));
    }
    let (ph, pw) = ((32 - h.min(32)) / 2, (32 - w.min(32)) / 2);
    let (oh, ow) = (h.max(32), w.max(32));
    let mut data = vec![0.0; n * oh * ow];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                data[i * oh * ow + (y + ph) * ow + x + pw] =
                    pixels[i * h * w + y * w + x] as f64 / 255.0;
            }
        }
    }
    let images = Tensor::new(vec![n, 1, oh, ow], data)?;
    LabeledDataset::new(
        "mnist",
        images,
        labels.into_iter().map(usize::from).collect(),
        10,
    )
}

/// Standard MNIST file names inside `dir`.
pub fn load_mnist_dir(dir: &Path, train: bool) -> Result<LabeledDataset> {
    let prefix = if train { "train" } else { "t10k" };
    let find = |stem: &str| {
        let plain = dir.join(format!("{prefix}-{stem}"));
        let gz = dir.join(format!("{prefix}-{stem}.gz"));
        if plain.exists() {
            plain
        } else {
            gz
        }
    };
    load_mnist_idx(&find("images-idx3-ubyte"), &find("labels-idx1-ubyte"))
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches, concatenated in the given order.
pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(format_err(
                path,
                bytes.len() - bytes.len() % CIFAR_RECORD,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for rec in bytes.chunks_exact(CIFAR_RECORD) {
            labels.push(rec[0] as usize);
            data.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    if labels.is_empty() {
        return Err(Error::invalid("no CIFAR-10 batches given"));
    }
    let images = Tensor::new(vec![labels.len(), 3, 32, 32], data)?;
    LabeledDataset::new("cifar10", images, labels, 10)
}

/// Shift by `(dx, dy)` with zero fill, then optionally mirror columns.
pub fn translate_flip(image: &[f64], shape: [usize; 3], dx: i64, dy: i64, flip: bool) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = y as i64 - dy;
            if sy < 0 || sy >= h as i64 {
                continue;
            }
            for x in 0..w {
                let tx = if flip { w - 1 - x } else { x };
                let sx = tx as i64 - dx;
                if sx < 0 || sx >= w as i64 {
                    continue;
                }
                out[ch * h * w + y * w + x] = image[ch * h * w + sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Random translation up to four pixels each way and a coin-flip mirror.
pub fn augment<R: Rng + ?Sized>(image: &[f64], shape: [usize; 3], rng: &mut R) -> Vec<f64> {
    let dx = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let dy = rng.random_range(-MAX_SHIFT..=MAX_SHIFT);
    let flip = rng.random_bool(0.5);
    translate_flip(image, shape, dx, dy, flip)
}

/// Augments every image of a `[N, C, H, W]` batch in place. The stream is
/// keyed by `(seed, epoch, batch)`.
pub fn augment_batch(batch: &mut Tensor, seed: u64, epoch: usize, batch_index: usize) {
    let s = batch.shape().to_vec();
    let shape = [s[1], s[2], s[3]];
    let n = shape.iter().product::<usize>();
    let mut rng = stream(seed, Stream::Augment, &[epoch as u64, batch_index as u64]);
    for img in batch.data_mut().chunks_mut(n) {
        let out = augment(img, shape, &mut rng);
        img.copy_from_slice(&out);
    }
}

/// Gaussian pixels clamped to `[0, 1]` with labels frozen per `(seed, index)`.
pub fn make_noise_dataset(
    n: usize,
    shape: [usize; 3],
    class_count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 || class_count == 0 {
        return Err(Error::invalid("noise dataset needs n > 0 and classes > 0"));
    }
    let len: usize = shape.iter().product();
    let normal = Normal::new(NOISE_MEAN, NOISE_STD).expect("valid normal");
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, Stream::NoiseData, &[i as u64]);
        labels.push(rng.random_range(0..class_count));
        data.extend((0..len).map(|_| normal.sample(&mut rng).clamp(0.0, 1.0)));
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?;
    LabeledDataset::new("noise", images, labels, class_count)
}

/// Small learnable task for smoke runs: every class owns a fixed random
/// pixel pattern (fine-grained, so blur destroys most of it) and samples are
/// that pattern plus Gaussian noise. Sample `i` of a split is keyed by
/// `offset + i`, so train and test drawn with different offsets share the
/// class patterns but not the samples.
pub fn make_pattern_dataset(
    n: usize,
    offset: usize,
    shape: [usize; 3],
    class_count: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    if n == 0 || class_count == 0 {
        return Err(Error::invalid(
            "pattern dataset needs n > 0 and classes > 0",
        ));
    }
    let len: usize = shape.iter().product();
    let templates: Vec<Vec<f64>> = (0..class_count)
        .map(|c| {
            let mut rng = stream(seed, Stream::Synthetic, &[0, c as u64]);
            (0..len)
                .map(|_| if rng.random::<bool>() { 0.7 } else { 0.3 })
                .collect()
        })
        .collect();
    let normal = Normal::new(0.0, 0.2).expect("valid normal");
    let mut data = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = stream(seed, Stream::Synthetic, &[1, (offset + i) as u64]);
        let label = rng.random_range(0..class_count);
        labels.push(label);
        data.extend(
            templates[label]
                .iter()
                .map(|t| (t + normal.sample(&mut rng)).clamp(0.0, 1.0)),
        );
    }
    let images = Tensor::new(vec![n, shape[0], shape[1], shape[2]], data)?;
    LabeledDataset::new("pattern", images, labels, class_count)
}

/// Permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Stream::Shuffle, &[epoch as u64]));
    order
}

/// Per-channel standardization with statistics from a training set.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(data: &LabeledDataset) -> Self {
        let [c, h, w] = data.image_shape();
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in data.images.data().chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (data.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-8)
            })
            .collect();
        Normalizer { mean, std }
    }

    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn apply(&self, batch: &mut Tensor) {
        let s = batch.shape().to_vec();
        let plane = s[2] * s[3];
        for img in batch.data_mut().chunks_mut(s[1] * plane) {
            for (ch, px) in img.chunks_mut(plane).enumerate() {
                let (m, sd) = (self.mean[ch], self.std[ch]);
                px.iter_mut().for_each(|v| *v = (*v - m) / sd);
            }
        }
    }
}
