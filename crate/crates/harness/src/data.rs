//! Datasets: synthetic generators, IDX and CIFAR-10 binary loaders, the
//! meta/validation split, and an epoch sampler.

use std::f64::consts::PI;
use std::path::Path;

use mlhf::meta::BatchSource;
use mlhf::nn::{Batch, Targets};
use mlhf::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::{DataConfig, Split};
use crate::error::{HarnessError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3072;
const CIFAR_CLASSES: usize = 10;

/// Labelled samples stored row-major as `[n, sample_shape...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    pub sample_shape: Vec<usize>,
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Samples {
    pub fn new(sample_shape: Vec<usize>, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        let width: usize = sample_shape.iter().product();
        if features.len() != width * labels.len() {
            return Err(HarnessError::Data(format!(
                "{} feature values for {} samples of shape {sample_shape:?}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self { sample_shape, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.features[i * w..(i + 1) * w]
    }

    /// The samples at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        let mut x = Vec::with_capacity(idx.len() * self.width());
        for &i in idx {
            x.extend_from_slice(self.row(i));
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&self.sample_shape);
        Ok(Batch::new(Tensor::new(shape, x)?, Targets::Classes(idx.iter().map(|&i| self.labels[i]).collect()))?)
    }

    fn permute(&mut self, rng: &mut ChaCha8Rng) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        let w = self.width();
        let mut features = Vec::with_capacity(self.features.len());
        for &i in &order {
            features.extend_from_slice(&self.features[i * w..(i + 1) * w]);
        }
        self.labels = order.iter().map(|&i| self.labels[i]).collect();
        self.features = features;
    }

    fn channels(&self) -> usize {
        self.sample_shape.first().copied().unwrap_or(1)
    }

    /// Per-channel mean and standard deviation; the first sample axis is the channel.
    pub fn channel_moments(&self) -> Vec<(f64, f64)> {
        let c = self.channels();
        let per = self.width() / c.max(1);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            let vals = (0..self.len()).flat_map(|i| self.row(i)[ch * per..(ch + 1) * per].iter().copied());
            let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
            for v in vals {
                n += 1.0;
                let delta = v - mean;
                mean += delta / n;
                m2 += delta * (v - mean);
            }
            let sd = if n > 0.0 { (m2 / n).sqrt() } else { 1.0 };
            out.push((mean, if sd > 1e-12 { sd } else { 1.0 }));
        }
        out
    }

    pub fn standardize(&mut self, moments: &[(f64, f64)]) {
        let per = self.width() / moments.len().max(1);
        for (k, v) in self.features.iter_mut().enumerate() {
            let (m, s) = moments[(k / per) % moments.len()];
            *v = (*v - m) / s;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Samples,
    pub test: Option<Samples>,
    pub classes: usize,
}

impl Dataset {
    /// Index set of a split of the training samples.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        let n = self.train.len();
        let cut = n * 3 / 5;
        match split {
            Split::Full => (0..n).collect(),
            Split::Meta => (0..cut).collect(),
            Split::Validate => (cut..n).collect(),
        }
    }

    /// Standardizes every part with the training-set channel moments.
    fn normalize(&mut self) {
        let moments = self.train.channel_moments();
        self.train.standardize(&moments);
        if let Some(t) = &mut self.test {
            t.standardize(&moments);
        }
    }

    fn check(&self) -> Result<()> {
        for part in std::iter::once(&self.train).chain(&self.test) {
            if let Some(&bad) = part.labels.iter().find(|&&l| l >= self.classes) {
                return Err(HarnessError::Data(format!("label {bad} outside [0, {})", self.classes)));
            }
        }
        if self.train.is_empty() {
            return Err(HarnessError::Data("empty training set".into()));
        }
        Ok(())
    }
}

pub fn load_dataset(cfg: &DataConfig, seed: u64) -> Result<Dataset> {
    let mut ds = match cfg {
        DataConfig::Spirals { points_per_class, classes, noise, turns } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let train = spirals(*points_per_class, *classes, *noise, *turns, &mut rng)?;
            let test = spirals(*points_per_class, *classes, *noise, *turns, &mut rng)?;
            Dataset { train, test: Some(test), classes: *classes }
        }
        DataConfig::Blobs { points_per_class, classes, dim, spread } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let centers: Vec<f64> = (0..classes * dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let train = blobs(*points_per_class, *classes, *dim, *spread, &centers, &mut rng)?;
            let test = blobs(*points_per_class, *classes, *dim, *spread, &centers, &mut rng)?;
            Dataset { train, test: Some(test), classes: *classes }
        }
        DataConfig::Idx { images, labels, test_images, test_labels, limit } => {
            let train = read_idx(images, labels, *limit)?;
            let test = match (test_images, test_labels) {
                (Some(i), Some(l)) => Some(read_idx(i, l, None)?),
                (None, None) => None,
                _ => return Err(HarnessError::Config("test_images and test_labels go together".into())),
            };
            let classes = train.labels.iter().chain(test.iter().flat_map(|t| &t.labels)).max().map_or(0, |m| m + 1);
            Dataset { train, test, classes }
        }
        DataConfig::Cifar { files, test_file, limit } => {
            let mut train = Samples::new(vec![3, 32, 32], Vec::new(), Vec::new())?;
            for f in files {
                let part = read_cifar(f)?;
                train.features.extend(part.features);
                train.labels.extend(part.labels);
            }
            if let Some(n) = limit {
                truncate(&mut train, *n);
            }
            let test = test_file.as_deref().map(read_cifar).transpose()?;
            Dataset { train, test, classes: CIFAR_CLASSES }
        }
    };
    ds.check()?;
    ds.normalize();
    Ok(ds)
}

fn truncate(s: &mut Samples, n: usize) {
    let n = n.min(s.len());
    s.features.truncate(n * s.width());
    s.labels.truncate(n);
}

/// Interleaved spiral arms in the plane, shuffled.
pub fn spirals(points_per_class: usize, classes: usize, noise: f64, turns: f64, rng: &mut ChaCha8Rng) -> Result<Samples> {
    if classes == 0 || points_per_class == 0 {
        return Err(HarnessError::Config("spirals need positive classes and points_per_class".into()));
    }
    let mut features = Vec::with_capacity(2 * classes * points_per_class);
    let mut labels = Vec::with_capacity(classes * points_per_class);
    for k in 0..classes {
        for i in 0..points_per_class {
            let r = (i as f64 + 1.0) / points_per_class as f64;
            let theta = 2.0 * PI * (turns * r + k as f64 / classes as f64);
            let nx: f64 = rng.sample(StandardNormal);
            let ny: f64 = rng.sample(StandardNormal);
            features.push(r * theta.cos() + noise * r * nx);
            features.push(r * theta.sin() + noise * r * ny);
            labels.push(k);
        }
    }
    let mut s = Samples::new(vec![2], features, labels)?;
    s.permute(rng);
    Ok(s)
}

/// Isotropic Gaussian clusters around `centers` (`classes x dim`), shuffled.
pub fn blobs(
    points_per_class: usize,
    classes: usize,
    dim: usize,
    spread: f64,
    centers: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Samples> {
    if classes == 0 || points_per_class == 0 || dim == 0 {
        return Err(HarnessError::Config("blobs need positive classes, dim and points_per_class".into()));
    }
    let mut features = Vec::with_capacity(dim * classes * points_per_class);
    let mut labels = Vec::with_capacity(classes * points_per_class);
    for k in 0..classes {
        for _ in 0..points_per_class {
            for j in 0..dim {
                let z: f64 = rng.sample(StandardNormal);
                features.push(centers[k * dim + j] + spread * z);
            }
            labels.push(k);
        }
    }
    let mut s = Samples::new(vec![dim], features, labels)?;
    s.permute(rng);
    Ok(s)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| HarnessError::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| HarnessError::Data(format!("{}: truncated header", path.display())))
}

/// IDX image and label files; pixels scaled to [0, 1].
pub fn read_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Samples> {
    let (img, lab) = (read(images)?, read(labels)?);
    let (pixels, shape) = parse_idx_images(&img, images)?;
    let targets = parse_idx_labels(&lab, labels)?;
    let n = shape[0];
    if targets.len() != n {
        return Err(HarnessError::Data(format!("{n} images but {} labels", targets.len())));
    }
    let mut s = Samples::new(vec![1, shape[1], shape[2]], pixels, targets)?;
    if let Some(k) = limit {
        truncate(&mut s, k);
    }
    Ok(s)
}

pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(Vec<f64>, [usize; 3])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(HarnessError::Data(format!("{}: magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}", path.display())));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let body = &bytes[16..];
    let need = n * rows * cols;
    if body.len() < need {
        return Err(HarnessError::Data(format!("{}: truncated, {} of {need} pixel bytes", path.display(), body.len())));
    }
    Ok((body[..need].iter().map(|&b| f64::from(b) / 255.0).collect(), [n, rows, cols]))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(HarnessError::Data(format!("{}: magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}", path.display())));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(HarnessError::Data(format!("{}: truncated, {} of {n} labels", path.display(), body.len())));
    }
    Ok(body[..n].iter().map(|&b| usize::from(b)).collect())
}

/// One CIFAR-10 binary batch file; pixels scaled to [0, 1].
pub fn read_cifar(path: &Path) -> Result<Samples> {
    parse_cifar(&read(path)?, path)
}

pub fn parse_cifar(bytes: &[u8], path: &Path) -> Result<Samples> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(HarnessError::Data(format!(
            "{}: {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            path.display(),
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut features = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(usize::from(rec[0]));
        features.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    Samples::new(vec![3, 32, 32], features, labels)
}

/// Draws batches from a fixed index set, reshuffled each epoch. Incomplete
/// trailing batches are dropped.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    samples: &'a Samples,
    indices: Vec<usize>,
    batch_size: usize,
    seed: u64,
    position: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
}

impl<'a> Sampler<'a> {
    pub fn new(samples: &'a Samples, indices: Vec<usize>, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || indices.len() < batch_size {
            return Err(HarnessError::Config(format!(
                "batch size {batch_size} does not fit a split of {} samples",
                indices.len()
            )));
        }
        Ok(Self { samples, indices, batch_size, seed, position: 0, epoch_order: None })
    }

    pub fn batches_per_epoch(&self) -> u64 {
        (self.indices.len() / self.batch_size) as u64
    }

    fn order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            let mut order = self.indices.clone();
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        &self.epoch_order.as_ref().expect("just filled").1
    }
}

impl BatchSource for Sampler<'_> {
    fn next_batch(&mut self) -> mlhf::Result<Batch> {
        let per = self.batches_per_epoch();
        let (epoch, k) = (self.position / per, (self.position % per) as usize);
        let b = self.batch_size;
        let idx = self.order(epoch)[k * b..(k + 1) * b].to_vec();
        self.position += 1;
        self.samples.batch(&idx).map_err(|e| mlhf::Error::InvalidArgument(e.to_string()))
    }

    fn position(&self) -> u64 {
        self.position
    }

    fn seek(&mut self, position: u64) {
        self.position = position;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(magic: u32, n: u32, side: u32, payload: usize) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, n, side, side] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..payload).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_magic_and_truncation() {
        let p = Path::new("mem");
        let good = idx_images(0x803, 2, 3, 18);
        assert_eq!(&good[..4], &[0, 0, 8, 3]);
        let (px, shape) = parse_idx_images(&good, p).unwrap();
        assert_eq!(shape, [2, 3, 3]);
        assert_eq!(px[1], 1.0 / 255.0);
        assert!(parse_idx_images(&idx_images(0x801, 2, 3, 18), p).is_err());
        assert!(parse_idx_images(&idx_images(0x803, 2, 3, 17), p).is_err());
        assert!(parse_idx_images(&good[..10], p).is_err());

        let mut labels = 0x801u32.to_be_bytes().to_vec();
        labels.extend_from_slice(&3u32.to_be_bytes());
        labels.extend_from_slice(&[4, 0, 9]);
        assert_eq!(parse_idx_labels(&labels, p).unwrap(), vec![4, 0, 9]);
        assert!(parse_idx_labels(&labels[..10], p).is_err());
    }

    #[test]
    fn cifar_records() {
        assert_eq!(CIFAR_RECORD, 3073);
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 7;
        bytes[CIFAR_RECORD] = 2;
        bytes[CIFAR_RECORD + 1] = 255;
        let s = parse_cifar(&bytes, Path::new("mem")).unwrap();
        assert_eq!(s.labels, vec![7, 2]);
        assert_eq!(s.sample_shape, vec![3, 32, 32]);
        assert_eq!(s.row(1)[0], 1.0);
        assert!(parse_cifar(&bytes[..CIFAR_RECORD + 5], Path::new("mem")).is_err());
    }

    #[test]
    fn spirals_are_seeded() {
        let cfg = DataConfig::Spirals { points_per_class: 50, classes: 3, noise: 0.2, turns: 1.5 };
        let a = load_dataset(&cfg, 11).unwrap();
        assert_eq!(a, load_dataset(&cfg, 11).unwrap());
        assert_ne!(a, load_dataset(&cfg, 12).unwrap());
        assert_eq!(a.train.len(), 150);
        assert!(a.train.labels.iter().all(|&l| l < 3));
    }

    #[test]
    fn normalization_is_per_channel() {
        let cfg = DataConfig::Blobs { points_per_class: 200, classes: 2, dim: 3, spread: 2.0 };
        let ds = load_dataset(&cfg, 0).unwrap();
        for (m, s) in ds.train.channel_moments() {
            assert!(m.abs() < 1e-12 && (s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_is_disjoint_and_exhaustive() {
        let cfg = DataConfig::Spirals { points_per_class: 41, classes: 3, noise: 0.1, turns: 1.0 };
        let ds = load_dataset(&cfg, 0).unwrap();
        let (m, v) = (ds.split_indices(Split::Meta), ds.split_indices(Split::Validate));
        assert_eq!(m.len(), 123 * 3 / 5);
        let mut all: Vec<usize> = m.iter().chain(&v).copied().collect();
        all.sort_unstable();
        assert_eq!(all, ds.split_indices(Split::Full));
    }

    #[test]
    fn sampler_covers_epoch_and_seeks() {
        let cfg = DataConfig::Spirals { points_per_class: 10, classes: 2, noise: 0.1, turns: 1.0 };
        let ds = load_dataset(&cfg, 0).unwrap();
        let mut s = Sampler::new(&ds.train, (0..20).collect(), 6, 3).unwrap();
        assert_eq!(s.batches_per_epoch(), 3);
        let first: Vec<Batch> = (0..5).map(|_| s.next_batch().unwrap()).collect();
        assert_eq!(s.position(), 5);
        s.seek(4);
        assert_eq!(s.next_batch().unwrap(), first[4]);
        s.seek(1);
        assert_eq!(s.next_batch().unwrap(), first[1]);
        assert_ne!(first[0], first[3]);
        assert!(Sampler::new(&ds.train, (0..4).collect(), 6, 0).is_err());
    }
}
