//! CIFAR binary ingestion, synthetic pattern datasets, normalization and
//! deterministic batching.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn label_bytes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 1,
            CifarVariant::Cifar100 => 2,
        }
    }

    pub fn record_size(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar10",
            CifarVariant::Cifar100 => "cifar100",
        }
    }

    /// Batch files of the standard distribution, relative to its directory.
    pub fn files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (CifarVariant::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarVariant::Cifar10, Split::Test) => vec!["test_batch.bin"],
            (CifarVariant::Cifar100, Split::Train) => vec!["train.bin"],
            (CifarVariant::Cifar100, Split::Test) => vec!["test.bin"],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel affine normalization `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    /// Population statistics of `images[N, C, H, W]`.
    pub fn fit(images: &Tensor<f32>) -> Result<Self> {
        let (n, c, h, w) = images.dims4()?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for (i, chunk) in images.data().chunks(plane).enumerate() {
            let ch = i % c;
            for &v in chunk {
                mean[ch] += v as f64;
                sq[ch] += (v as f64) * (v as f64);
            }
        }
        let mut std = vec![0.0f32; c];
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            // constant channels pass through centred but unscaled
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, images: &mut Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.mean.len() {
            return Err(Error::shape("normalize", images.shape(), &[self.mean.len()]));
        }
        for (i, chunk) in images.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(())
    }

    pub fn invert(&self, images: &mut Tensor<f32>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        for (i, chunk) in images.data_mut().chunks_mut(h * w).enumerate() {
            let ch = i % c;
            let (m, s) = (self.mean[ch], self.std[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * s + m);
        }
        Ok(())
    }
}

/// Normalized images with labels and stable ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<usize>,
    ids: Vec<u64>,
    num_classes: usize,
    norm: Normalization,
    /// Noise level each sample was generated with; zero for real data.
    noise: Vec<f64>,
}

impl Dataset {
    /// Normalizes `raw` (values in `[0, 1]`) with its own statistics.
    pub fn from_raw(raw: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let norm = Normalization::fit(&raw)?;
        Self::from_raw_with(raw, labels, num_classes, norm)
    }

    /// Normalizes `raw` with given constants, e.g. training-set statistics.
    pub fn from_raw_with(
        mut raw: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        norm: Normalization,
    ) -> Result<Self> {
        let (n, ..) = raw.dims4()?;
        if labels.len() != n {
            return Err(Error::Contract(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!("label {bad} >= {num_classes} classes")));
        }
        norm.apply(&mut raw)?;
        Ok(Self {
            images: raw,
            labels,
            ids: (0..n as u64).collect(),
            num_classes,
            norm,
            noise: vec![0.0; n],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn normalization(&self) -> &Normalization {
        &self.norm
    }

    pub fn noise_levels(&self) -> &[f64] {
        &self.noise
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Samples at `indices`, keeping their ids.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Ok(Self {
            images: self.images.select_outer(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
            norm: self.norm.clone(),
            noise: indices.iter().map(|&i| self.noise[i]).collect(),
        })
    }

    /// Images mapped back to `[0, 1]` pixel scale.
    pub fn raw_images(&self) -> Result<Tensor<f32>> {
        let mut raw = self.images.clone();
        self.norm.invert(&mut raw)?;
        Ok(raw)
    }

    /// Deterministic pass over the data. `shuffle_seed = None` keeps stored
    /// order; otherwise epoch `e` uses its own seeded permutation.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Batches<'_> {
        Batches {
            data: self,
            order: self.epoch_order(shuffle_seed, epoch),
            batch_size: batch_size.max(1),
            pos: 0,
        }
    }

    /// Re-expresses the images under `norm`, e.g. a validation set under the
    /// training statistics. Ids and noise levels are kept.
    pub fn with_normalization(self, norm: Normalization) -> Result<Self> {
        let raw = self.raw_images()?;
        let noise = self.noise;
        let ids = self.ids;
        let mut out = Self::from_raw_with(raw, self.labels, self.num_classes, norm)?;
        out.noise = noise;
        out.ids = ids;
        Ok(out)
    }

    /// Sample order of epoch `epoch`.
    pub fn epoch_order(&self, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        if let Some(seed) = shuffle_seed {
            order.shuffle(&mut epoch_rng(seed, epoch));
        }
        order
    }

    /// Batch `index` of epoch `epoch`, as [`Dataset::batches`] would yield it.
    pub fn batch_at(&self, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64, index: usize) -> Result<Batch> {
        let order = self.epoch_order(shuffle_seed, epoch);
        let bs = batch_size.max(1);
        let start = index * bs;
        if start >= order.len() {
            return Err(Error::Contract(format!("batch {index} past the end of the epoch")));
        }
        let idx = &order[start..(start + bs).min(order.len())];
        Ok(Batch {
            images: self.images.select_outer(idx)?,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.ids[i]).collect(),
        })
    }

    /// Number of batches one epoch yields.
    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len().div_ceil(batch_size.max(1))
    }

    /// Writes the CIFAR record layout (`label bytes + 3072 pixels`). Only
    /// 3×32×32 datasets qualify.
    pub fn export_cifar(&self, path: &Path, variant: CifarVariant) -> Result<()> {
        if self.sample_shape() != [3, CIFAR_SIDE, CIFAR_SIDE] {
            return Err(Error::Contract(format!(
                "CIFAR export needs 3x32x32 samples, have {:?}",
                self.sample_shape()
            )));
        }
        if self.num_classes > variant.num_classes() {
            return Err(Error::Contract(format!(
                "{} classes do not fit {}",
                self.num_classes,
                variant.name()
            )));
        }
        let raw = self.raw_images()?;
        let mut out = Vec::with_capacity(self.len() * variant.record_size());
        for (i, px) in raw.data().chunks(CIFAR_PIXELS).enumerate() {
            let label = self.labels[i] as u8;
            if variant == CifarVariant::Cifar100 {
                out.push(0);
            }
            out.push(label);
            out.extend(px.iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        fs::File::create(path)?.write_all(&out)?;
        Ok(())
    }
}

fn epoch_rng(seed: u64, epoch: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    rng
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub ids: Vec<u64>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let idx = &self.order[self.pos..end];
        self.pos = end;
        Some(Batch {
            images: self.data.images.select_outer(idx).expect("indices in range"),
            labels: idx.iter().map(|&i| self.data.labels[i]).collect(),
            ids: idx.iter().map(|&i| self.data.ids[i]).collect(),
        })
    }
}

/// Random horizontal flip and zero-padded random crop, in place.
pub fn augment<R: Rng>(images: &mut Tensor<f32>, pad: usize, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = images.dims4()?;
    let plane = h * w;
    let mut tmp = vec![0.0f32; c * plane];
    for s in 0..n {
        let flip = rng.random_bool(0.5);
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let sample = &mut images.data_mut()[s * c * plane..(s + 1) * c * plane];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as isize + dy;
                    let sx0 = x as isize + dx;
                    let v = if sy < 0 || sx0 < 0 || sy >= h as isize || sx0 >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx0 as usize } else { sx0 as usize };
                        sample[ch * plane + sy as usize * w + sx]
                    };
                    tmp[ch * plane + y * w + x] = v;
                }
            }
        }
        sample.copy_from_slice(&tmp);
    }
    Ok(())
}

/// Raw `[0, 1]` images and labels from one CIFAR batch file.
pub fn read_cifar_raw(path: &Path, variant: CifarVariant) -> Result<(Tensor<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| {
        std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
    })?;
    parse_cifar(&bytes, variant)
}

pub fn parse_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Tensor<f32>, Vec<usize>)> {
    let rec = variant.record_size();
    if bytes.len() % rec != 0 {
        let offset = (bytes.len() / rec * rec) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "{} bytes is not a whole number of {}-byte {} records; partial record starts here",
                bytes.len(),
                rec,
                variant.name()
            ),
        });
    }
    let n = bytes.len() / rec;
    let lb = variant.label_bytes();
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // the fine label is the last label byte in both layouts
        let label = r[lb - 1] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Format {
                offset: (i * rec + lb - 1) as u64,
                message: format!("label {label} out of range for {}", variant.name()),
            });
        }
        labels.push(label);
        data.extend(r[lb..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels))
}

/// Loads and normalizes one CIFAR batch file.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Dataset> {
    let (raw, labels) = read_cifar_raw(path, variant)?;
    Dataset::from_raw(raw, labels, variant.num_classes())
}

/// Loads one split of the standard directory layout. The test split is
/// normalized with training statistics when `train_norm` is given.
pub fn load_cifar_dir(
    dir: &Path,
    variant: CifarVariant,
    split: Split,
    train_norm: Option<Normalization>,
) -> Result<Dataset> {
    let paths: Vec<PathBuf> = variant.files(split).iter().map(|f| dir.join(f)).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for p in &paths {
        let (raw, l) = read_cifar_raw(p, variant)?;
        data.extend(raw.into_data());
        labels.extend(l);
    }
    let raw = Tensor::new(&[labels.len(), 3, CIFAR_SIDE, CIFAR_SIDE], data)?;
    match train_norm {
        Some(norm) => Dataset::from_raw_with(raw, labels, variant.num_classes(), norm),
        None => Dataset::from_raw(raw, labels, variant.num_classes()),
    }
}

/// How noise levels are assigned to synthetic samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NoiseSpec {
    /// Every sample gets the same level.
    Constant(f64),
    /// One level per class.
    PerClass(Vec<f64>),
    /// Within each class, every other sample (odd index) gets `level`, the
    /// rest are clean.
    Alternating(f64),
}

impl NoiseSpec {
    fn level(&self, class: usize, index: usize) -> f64 {
        match self {
            NoiseSpec::Constant(l) => *l,
            NoiseSpec::PerClass(v) => v[class],
            NoiseSpec::Alternating(l) => {
                if index % 2 == 1 {
                    *l
                } else {
                    0.0
                }
            }
        }
    }

    fn validate(&self, classes: usize) -> Result<()> {
        let levels: Vec<f64> = match self {
            NoiseSpec::Constant(l) | NoiseSpec::Alternating(l) => vec![*l],
            NoiseSpec::PerClass(v) => {
                if v.len() != classes {
                    return Err(Error::Config(format!(
                        "{} per-class noise levels for {classes} classes",
                        v.len()
                    )));
                }
                v.clone()
            }
        };
        if levels.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return Err(Error::Config("noise levels must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub channels: usize,
    pub samples_per_class: usize,
    pub noise: NoiseSpec,
    /// Amplitude scale of the class patterns; lower is harder under noise.
    pub contrast: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(num_classes: usize, image_size: usize, samples_per_class: usize) -> Self {
        Self {
            num_classes,
            image_size,
            channels: 3,
            samples_per_class,
            noise: NoiseSpec::Constant(0.0),
            contrast: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.image_size == 0 || self.channels == 0 || self.samples_per_class == 0 {
            return Err(Error::Config("synthetic dataset extents must be positive".into()));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return Err(Error::Config(format!("contrast must lie in (0, 1], got {}", self.contrast)));
        }
        self.noise.validate(self.num_classes)
    }
}

/// Clean pattern of class `k`: an oriented grating whose angle, frequency
/// and per-channel contrast depend on the class.
fn class_pattern(k: usize, classes: usize, channels: usize, size: usize, contrast: f64) -> Vec<f32> {
    let angle = std::f64::consts::PI * k as f64 / classes as f64;
    let freq = 1.0 + (k % 3) as f64;
    let (sin, cos) = angle.sin_cos();
    let mut out = Vec::with_capacity(channels * size * size);
    for c in 0..channels {
        let gain = contrast * if (k + c) % 2 == 0 { 0.45 } else { -0.3 };
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * cos + y as f64 * sin) / size as f64;
                let v = 0.5 + gain * (2.0 * std::f64::consts::PI * freq * u).sin();
                out.push(v as f32);
            }
        }
    }
    out
}

/// Class-conditional pattern images with additive uniform noise. Samples are
/// stored class-interleaved, so id `i` has class `i % num_classes`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes;
    let (c, s) = (spec.channels, spec.image_size);
    let patterns: Vec<Vec<f32>> = (0..k).map(|cls| class_pattern(cls, k, c, s, spec.contrast)).collect();
    let n = k * spec.samples_per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    for i in 0..n {
        let (cls, idx) = (i % k, i / k);
        let level = spec.noise.level(cls, idx);
        for &p in &patterns[cls] {
            let u: f64 = rng.random_range(-1.0..=1.0);
            data.push((p as f64 + level * u).clamp(0.0, 1.0) as f32);
        }
        labels.push(cls);
        noise.push(level);
    }
    let raw = Tensor::new(&[n, c, s, s], data)?;
    let mut ds = Dataset::from_raw(raw, labels, k)?;
    ds.noise = noise;
    Ok(ds)
}
