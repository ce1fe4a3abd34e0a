//! Input and label deficits and their epoch windows.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{make_noise_dataset, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Stream};
use crate::tensor::Tensor;

pub const BLUR_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeficitKind {
    #[default]
    None,
    Blur,
    Vflip,
    LabelPermute,
    NoiseReplace,
}

impl DeficitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DeficitKind::None => "none",
            DeficitKind::Blur => "blur",
            DeficitKind::Vflip => "vflip",
            DeficitKind::LabelPermute => "label_permute",
            DeficitKind::NoiseReplace => "noise_replace",
        }
    }
}

impl std::str::FromStr for DeficitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => DeficitKind::None,
            "blur" => DeficitKind::Blur,
            "vflip" => DeficitKind::Vflip,
            "label_permute" => DeficitKind::LabelPermute,
            "noise_replace" => DeficitKind::NoiseReplace,
            other => return Err(Error::invalid(format!("unknown deficit kind {other:?}"))),
        })
    }
}

/// A deficit active on the half-open epoch window `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct DeficitSchedule {
    pub kind: DeficitKind,
    pub start: usize,
    pub end: usize,
}

impl DeficitSchedule {
    pub fn new(kind: DeficitKind, start: usize, end: usize) -> Result<Self> {
        let s = DeficitSchedule { kind, start, end };
        s.validate()?;
        Ok(s)
    }

    pub fn none() -> Self {
        DeficitSchedule::default()
    }

    /// Deficit from the first epoch until `t0`.
    pub fn until(kind: DeficitKind, t0: usize) -> Self {
        let kind = if t0 == 0 { DeficitKind::None } else { kind };
        DeficitSchedule {
            kind,
            start: 0,
            end: if kind == DeficitKind::None { 0 } else { t0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.start > self.end {
            return Err(Error::invalid(format!(
                "deficit window start {} after end {}",
                self.start, self.end
            )));
        }
        if self.kind == DeficitKind::None && self.start != self.end {
            return Err(Error::invalid("kind none must have an empty window"));
        }
        Ok(())
    }

    pub fn active(&self, epoch: usize) -> bool {
        self.kind != DeficitKind::None && (self.start..self.end).contains(&epoch)
    }
}

/// 4x4 block average followed by bilinear upsampling (half-pixel centers,
/// edge clamped) back to the input size.
pub fn blur(image: &[f64], shape: [usize; 3]) -> Result<Vec<f64>> {
    let [c, h, w] = shape;
    if h % BLUR_FACTOR != 0 || w % BLUR_FACTOR != 0 || image.len() != c * h * w {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: format!("blur needs spatial size divisible by {BLUR_FACTOR}"),
        });
    }
    let (sh, sw) = (h / BLUR_FACTOR, w / BLUR_FACTOR);
    let taps_h = bilinear_taps(h, sh);
    let taps_w = bilinear_taps(w, sw);
    let area = (BLUR_FACTOR * BLUR_FACTOR) as f64;
    let mut out = vec![0.0; image.len()];
    let mut small = vec![0.0; sh * sw];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        small.iter_mut().for_each(|v| *v = 0.0);
        for y in 0..h {
            for x in 0..w {
                small[(y / BLUR_FACTOR) * sw + x / BLUR_FACTOR] += plane[y * w + x];
            }
        }
        small.iter_mut().for_each(|v| *v /= area);
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for (y, &(y0, y1, ly)) in taps_h.iter().enumerate() {
            for (x, &(x0, x1, lx)) in taps_w.iter().enumerate() {
                let top = small[y0 * sw + x0] * (1.0 - lx) + small[y0 * sw + x1] * lx;
                let bot = small[y1 * sw + x0] * (1.0 - lx) + small[y1 * sw + x1] * lx;
                dst[y * w + x] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    Ok(out)
}

fn bilinear_taps(out: usize, input: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Reverses row order in every channel.
pub fn vflip(image: &[f64], shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = Vec::with_capacity(image.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            let row = ch * h * w + y * w;
            out.extend_from_slice(&image[row..row + w]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPermutation(Vec<usize>);

impl LabelPermutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || std::mem::replace(&mut seen[m], true) {
                return Err(Error::invalid(format!(
                    "label map {map:?} is not a bijection"
                )));
            }
        }
        Ok(LabelPermutation(map))
    }

    pub fn identity(class_count: usize) -> Self {
        LabelPermutation((0..class_count).collect())
    }

    /// Drawn once per run. Derangements are not enforced.
    pub fn random(class_count: usize, seed: u64) -> Self {
        let mut map: Vec<usize> = (0..class_count).collect();
        map.shuffle(&mut stream(seed, Stream::LabelPermutation, &[]));
        LabelPermutation(map)
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &m) in self.0.iter().enumerate() {
            inv[m] = i;
        }
        LabelPermutation(inv)
    }

    pub fn map(&self) -> &[usize] {
        &self.0
    }
}

pub fn permute_labels(labels: &[usize], perm: &LabelPermutation) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            perm.0.get(l).copied().ok_or(Error::LabelOutOfRange {
                label: l,
                classes: perm.0.len(),
            })
        })
        .collect()
}

/// Fixed assignment of every training index to a noise sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePairing {
    pub noise: LabeledDataset,
    pub index_map: Vec<usize>,
}

impl NoisePairing {
    /// One noise sample per training index, shuffled once by `seed`.
    pub fn new(train_len: usize, shape: [usize; 3], class_count: usize, seed: u64) -> Result<Self> {
        let noise = make_noise_dataset(
            train_len,
            shape,
            class_count,
            derive_seed(seed, Stream::NoiseData, &[]),
        )?;
        let mut index_map: Vec<usize> = (0..train_len).collect();
        index_map.shuffle(&mut stream(seed, Stream::NoisePairing, &[]));
        Ok(NoisePairing { noise, index_map })
    }
}

/// Replaces images and labels of a batch drawn from training `indices`.
pub fn noise_replace(
    batch: &mut Tensor,
    labels: &mut [usize],
    indices: &[usize],
    pairing: &NoisePairing,
) {
    let n = pairing.noise.image_len();
    for (k, &i) in indices.iter().enumerate() {
        let j = pairing.index_map[i];
        batch.data_mut()[k * n..(k + 1) * n].copy_from_slice(pairing.noise.image(j));
        labels[k] = pairing.noise.labels[j];
    }
}

/// Schedule plus the per-run state some deficits need.
#[derive(Clone, Debug)]
pub struct DeficitPlan {
    pub schedule: DeficitSchedule,
    pub permutation: Option<LabelPermutation>,
    pub pairing: Option<NoisePairing>,
}

impl DeficitPlan {
    pub fn new(schedule: DeficitSchedule, train: &LabeledDataset, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let permutation = (schedule.kind == DeficitKind::LabelPermute)
            .then(|| LabelPermutation::random(train.class_count, seed));
        let pairing = match schedule.kind {
            DeficitKind::NoiseReplace => Some(NoisePairing::new(
                train.len(),
                train.image_shape(),
                train.class_count,
                seed,
            )?),
            _ => None,
        };
        Ok(DeficitPlan {
            schedule,
            permutation,
            pairing,
        })
    }

    /// Applies the deficit in place if `epoch` is inside the window.
    pub fn apply(
        &self,
        epoch: usize,
        batch: &mut Tensor,
        labels: &mut [usize],
        indices: &[usize],
    ) -> Result<()> {
        if !self.schedule.active(epoch) {
            return Ok(());
        }
        let s = batch.shape().to_vec();
        let shape = [s[1], s[2], s[3]];
        let n = shape.iter().product::<usize>();
        match self.schedule.kind {
            DeficitKind::None => {}
            DeficitKind::Blur => {
                for img in batch.data_mut().chunks_mut(n) {
                    let out = blur(img, shape)?;
                    img.copy_from_slice(&out);
                }
            }
            DeficitKind::Vflip => {
                for img in batch.data_mut().chunks_mut(n) {
                    let out = vflip(img, shape);
                    img.copy_from_slice(&out);
                }
            }
            DeficitKind::LabelPermute => {
                let perm = self.permutation.as_ref().expect("built with permutation");
                let mapped = permute_labels(labels, perm)?;
                labels.copy_from_slice(&mapped);
            }
            DeficitKind::NoiseReplace => {
                let pairing = self.pairing.as_ref().expect("built with pairing");
                noise_replace(batch, labels, indices, pairing);
            }
        }
        Ok(())
    }
}
