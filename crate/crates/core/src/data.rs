//! Datasets: CIFAR-10 binary batches, a synthetic style-discriminable
//! generator, and training-time augmentation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{Array, Container};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-channel CIFAR-10 statistics used for normalization.
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR10_PER_FILE: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled NCHW images.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        let (n, _, _, _) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::ShapeMismatch {
                op: "dataset labels",
                lhs: images.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn image_len(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Images at `indices` as a batch tensor of `T`, plus their labels.
    pub fn batch<T: Element>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!("index {i} out of range")));
            }
            data.extend(self.image(i).iter().map(|&v| T::of(v as f64)));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape();
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` examples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch::<f32>(&idx)?;
        Self::new(images, labels, self.num_classes, self.split)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new("dataset");
        c.push("images", Array::from_tensor(&self.images));
        c.push("labels", Array::u32s(self.labels.iter().map(|&l| l as u32).collect()));
        c.push("num_classes", Array::u32s(vec![self.num_classes as u32]));
        let split = match self.split {
            Split::Train => 0,
            Split::Test => 1,
        };
        c.push("split", Array::u32s(vec![split]));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let images = c.require("images")?.to_tensor::<f32>()?;
        let labels = c.require("labels")?.as_u32()?.iter().map(|&l| l as usize).collect();
        let num_classes = *c
            .require("num_classes")?
            .as_u32()?
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty num_classes".into()))? as usize;
        let split = match c.require("split")?.as_u32()?.first() {
            Some(0) => Split::Train,
            Some(1) => Split::Test,
            _ => return Err(Error::InvalidArgument("bad split tag".into())),
        };
        Self::new(images, labels, num_classes, split)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?.expect_kind("dataset")?)
    }
}

/// Raw CIFAR-10 records: one label byte followed by 3072 channel-major
/// pixel bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CifarRecords {
    pub labels: Vec<u8>,
    pub pixels: Vec<u8>,
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<CifarRecords> {
    if !bytes.len().is_multiple_of(CIFAR10_RECORD) {
        let complete = bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD;
        return Err(Error::Format {
            offset: complete as u64,
            reason: format!(
                "truncated record: {} bytes is not a multiple of {CIFAR10_RECORD}",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR10_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Format {
                offset: (i * CIFAR10_RECORD) as u64,
                reason: format!("label byte {} > 9 in record {i}", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok(CifarRecords { labels, pixels })
}

/// Scales bytes to `[0, 1]` and normalizes with the CIFAR-10 constants.
pub fn cifar_dataset(records: &CifarRecords, split: Split) -> Result<Dataset> {
    let n = records.labels.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no CIFAR-10 records".into()));
    }
    let plane = 32 * 32;
    let data = records
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ch = (i / plane) % 3;
            (p as f32 / 255.0 - CIFAR10_MEAN[ch]) / CIFAR10_STD[ch]
        })
        .collect();
    let images = Tensor::new([n, 3, 32, 32], data)?;
    Dataset::new(images, records.labels.iter().map(|&l| l as usize).collect(), 10, split)
}

/// Loads the standard binary batches from `dir`
/// (`data_batch_{1..5}.bin` or `test_batch.bin`).
pub fn load_cifar10(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let files: Vec<String> = match split {
        Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
        Split::Test => vec!["test_batch.bin".into()],
    };
    let mut all = CifarRecords {
        labels: Vec::new(),
        pixels: Vec::new(),
    };
    for f in files {
        let path = dir.join(&f);
        let bytes = fs::read(&path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let recs = parse_cifar10(&bytes)?;
        if recs.labels.len() != CIFAR10_PER_FILE {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                reason: format!("{f} holds {} records, expected {CIFAR10_PER_FILE}", recs.labels.len()),
            });
        }
        all.labels.extend(recs.labels);
        all.pixels.extend(recs.pixels);
    }
    cifar_dataset(&all, split)
}

/// Target global statistics of one class, per channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStyle {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// Parameters of the synthetic style dataset.
///
/// Each image is box-filtered white noise, standardized, then shifted and
/// scaled so that every channel's global mean/std equals the class target
/// plus a per-image offset. The offset, taken over the concatenated
/// `(mean, std)` vector of all channels, has Euclidean norm at most
/// `jitter`; class targets must be at least `4 * jitter` apart in the same
/// metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthStyleSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub channels: usize,
    pub size: usize,
    pub targets: Vec<ClassStyle>,
    pub jitter: f32,
    /// Box filter radius.
    pub smoothing: usize,
    pub seed: u64,
    pub split: Split,
}

impl SynthStyleSpec {
    /// Classes laid out on a grid of means `{-1, +1, ...}` and standard
    /// deviations `{0.5, 1.5, ...}`, identical across channels. K = 2 gives
    /// means -1 / +1 at std 1.
    pub fn grid(num_classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        let channels = 3;
        let targets = if num_classes == 2 {
            vec![(-1.0, 1.0), (1.0, 1.0)]
        } else {
            let cols = (num_classes as f64).sqrt().ceil() as usize;
            (0..num_classes)
                .map(|k| {
                    let (i, j) = (k % cols, k / cols);
                    (-1.0 + 2.0 * i as f32, 0.5 + j as f32)
                })
                .collect()
        };
        Self {
            num_classes,
            per_class,
            channels,
            size,
            targets: targets
                .into_iter()
                .map(|(m, s)| ClassStyle {
                    mean: vec![m; channels],
                    std: vec![s; channels],
                })
                .collect(),
            jitter: 0.25,
            smoothing: 1,
            seed,
            split: Split::Train,
        }
    }

    pub fn with_split(mut self, split: Split, seed: u64) -> Self {
        self.split = split;
        self.seed = seed;
        self
    }

    fn target_vec(&self, k: usize) -> Vec<f32> {
        let t = &self.targets[k];
        t.mean.iter().chain(&t.std).copied().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_classes < 2 || self.targets.len() != self.num_classes {
            return bad(format!(
                "need >= 2 classes with one target each ({} targets for {} classes)",
                self.targets.len(),
                self.num_classes
            ));
        }
        if self.per_class == 0 || self.channels == 0 || self.size < 2 {
            return bad("per_class and channels must be >= 1, size >= 2".into());
        }
        if !(self.jitter >= 0.0) {
            return bad("jitter must be >= 0".into());
        }
        for (k, t) in self.targets.iter().enumerate() {
            if t.mean.len() != self.channels || t.std.len() != self.channels {
                return bad(format!("class {k} target has wrong channel count"));
            }
            if t.std.iter().any(|&s| s <= self.jitter) {
                return bad(format!("class {k} target std must exceed jitter"));
            }
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let d = euclid(&self.target_vec(a), &self.target_vec(b));
                if d < 4.0 * self.jitter as f64 || d == 0.0 {
                    return bad(format!(
                        "classes {a} and {b} are {d:.3} apart, need >= 4 * jitter = {}",
                        4.0 * self.jitter
                    ));
                }
            }
        }
        Ok(())
    }

    /// Nearest class target to the pooled `(mean, std)` vector.
    pub fn nearest_class(&self, pooled: &[f32]) -> usize {
        (0..self.num_classes)
            .min_by(|&a, &b| {
                euclid(pooled, &self.target_vec(a))
                    .partial_cmp(&euclid(pooled, &self.target_vec(b)))
                    .unwrap()
            })
            .unwrap()
    }
}

fn euclid(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Generates the synthetic dataset; labels cycle `0, 1, ..., K-1`.
pub fn synth_style(spec: &SynthStyleSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, s) = (spec.channels, spec.size);
    let n = spec.num_classes * spec.per_class;
    let mut data = Vec::with_capacity(n * c * s * s);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.num_classes;
        let offset = ball_sample(&mut rng, 2 * c, spec.jitter as f64);
        let t = &spec.targets[k];
        for ch in 0..c {
            let mean = t.mean[ch] as f64 + offset[ch];
            let std = t.std[ch] as f64 + offset[c + ch];
            let plane = smoothed_noise(&mut rng, s, spec.smoothing);
            data.extend(plane.iter().map(|&z| (mean + std * z) as f32));
        }
        labels.push(k);
    }
    Dataset::new(Tensor::new([n, c, s, s], data)?, labels, spec.num_classes, spec.split)
}

/// Uniform sample from the `dim`-ball of `radius`.
fn ball_sample(rng: &mut ChaCha8Rng, dim: usize, radius: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| f64::sample_normal(rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let r = radius * rng.random::<f64>().powf(1.0 / dim as f64);
    v.iter_mut().for_each(|x| *x *= r / norm);
    v
}

/// White noise, circular box filter, then standardized to empirical mean 0
/// and (biased) std 1.
fn smoothed_noise(rng: &mut ChaCha8Rng, size: usize, radius: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..size * size).map(|_| f64::sample_normal(rng)).collect();
    let r = radius as isize;
    let s = size as isize;
    let mut out = vec![0.0; size * size];
    for y in 0..s {
        for x in 0..s {
            let mut acc = 0.0;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).rem_euclid(s);
                    let xx = (x + dx).rem_euclid(s);
                    acc += raw[(yy * s + xx) as usize];
                }
            }
            out[(y * s + x) as usize] = acc;
        }
    }
    let n = out.len() as f64;
    let mean = out.iter().sum::<f64>() / n;
    let std = (out.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    out.iter_mut().for_each(|v| *v = (*v - mean) / std);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentPolicy {
    None,
    /// Zero-pad by `pad`, random crop back to size, horizontal flip with
    /// probability 0.5.
    PadCropFlip { pad: usize },
}

/// Crops the `pad`-zero-padded image at offset `(dy, dx)`; `(pad, pad)`
/// returns the input.
pub fn pad_crop(image: &[f32], c: usize, h: usize, w: usize, pad: usize, dy: usize, dx: usize) -> Vec<f32> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

pub fn hflip(image: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; image.len()];
    for row in 0..c * h {
        for x in 0..w {
            out[row * w + x] = image[row * w + (w - 1 - x)];
        }
    }
    out
}

/// Applies `policy` independently to each image of an NCHW batch.
pub fn augment<T: Element, R: Rng + ?Sized>(batch: &Tensor<T>, policy: AugmentPolicy, rng: &mut R) -> Result<Tensor<T>> {
    let (n, c, h, w) = batch.dims4()?;
    let AugmentPolicy::PadCropFlip { pad } = policy else {
        return Ok(batch.clone());
    };
    let len = c * h * w;
    let mut out = Vec::with_capacity(batch.len());
    for i in 0..n {
        let img: Vec<f32> = batch.data()[i * len..(i + 1) * len].iter().map(|v| v.as_f64() as f32).collect();
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let mut img = pad_crop(&img, c, h, w, pad, dy, dx);
        if rng.random_bool(0.5) {
            img = hflip(&img, c, h, w);
        }
        out.extend(img.into_iter().map(|v| T::of(v as f64)));
    }
    Tensor::new([n, c, h, w], out)
}

/// Deterministic shuffled order of `n` examples for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Writes CIFAR-10 style records; used to build fixtures.
pub fn encode_cifar10(labels: &[u8], pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * (CIFAR10_RECORD - 1) {
        return Err(Error::InvalidArgument("pixel count does not match labels".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR10_RECORD);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&pixels[i * 3072..(i + 1) * 3072]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pooled_stats(ds: &Dataset, i: usize) -> Vec<f32> {
        let [c, h, w] = ds.image_shape();
        let img = ds.image(i);
        let hw = (h * w) as f64;
        let mut means = Vec::new();
        let mut stds = Vec::new();
        for ch in 0..c {
            let p = &img[ch * h * w..(ch + 1) * h * w];
            let m = p.iter().map(|&v| v as f64).sum::<f64>() / hw;
            let v = p.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / hw;
            means.push(m as f32);
            stds.push(v.sqrt() as f32);
        }
        means.extend(stds);
        means
    }

    #[test]
    fn two_record_fixture_round_trips() {
        let labels = [3u8, 9];
        let pixels: Vec<u8> = (0..2 * 3072).map(|i| (i * 7 % 256) as u8).collect();
        let bytes = encode_cifar10(&labels, &pixels).unwrap();
        assert_eq!(bytes.len() % CIFAR10_RECORD, 0);
        let recs = parse_cifar10(&bytes).unwrap();
        assert_eq!(recs.labels, labels);
        assert_eq!(recs.pixels, pixels);
        let ds = cifar_dataset(&recs, Split::Test).unwrap();
        let expect = (pixels[1024] as f32 / 255.0 - CIFAR10_MEAN[1]) / CIFAR10_STD[1];
        assert_eq!(ds.images.at(&[0, 1, 0, 0]), expect);
    }

    #[test]
    fn cifar_errors_carry_offsets() {
        let mut bytes = encode_cifar10(&[1, 2], &vec![0u8; 2 * 3072]).unwrap();
        bytes[CIFAR10_RECORD] = 10;
        match parse_cifar10(&bytes).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, CIFAR10_RECORD as u64),
            e => panic!("{e}"),
        }
        match parse_cifar10(&bytes[..CIFAR10_RECORD + 5]).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, CIFAR10_RECORD as u64),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn k2_mean_sign_recovers_labels() {
        let spec = SynthStyleSpec::grid(2, 20, 8, 11);
        let ds = synth_style(&spec).unwrap();
        for i in 0..ds.len() {
            let mean = ds.image(i).iter().map(|&v| v as f64).sum::<f64>();
            assert_eq!(ds.labels[i], usize::from(mean > 0.0));
        }
    }

    #[test]
    fn k4_oracle_is_perfect() {
        let spec = SynthStyleSpec::grid(4, 25, 8, 5);
        let ds = synth_style(&spec).unwrap();
        for i in 0..ds.len() {
            assert_eq!(spec.nearest_class(&pooled_stats(&ds, i)), ds.labels[i]);
        }
    }

    #[test]
    fn seeds_change_pixels_not_labels() {
        let a = synth_style(&SynthStyleSpec::grid(2, 10, 8, 1)).unwrap();
        let b = synth_style(&SynthStyleSpec::grid(2, 10, 8, 2)).unwrap();
        assert_eq!(a.labels, b.labels);
        assert!(a.images.data().iter().zip(b.images.data()).all(|(x, y)| x != y));
        let again = synth_style(&SynthStyleSpec::grid(2, 10, 8, 1)).unwrap();
        assert_eq!(a.to_container().to_bytes(), again.to_container().to_bytes());
    }

    #[test]
    fn inseparable_spec_rejected() {
        let mut spec = SynthStyleSpec::grid(4, 5, 8, 0);
        spec.jitter = 0.49;
        assert!(synth_style(&spec).is_err());
        let mut spec = SynthStyleSpec::grid(2, 5, 8, 0);
        spec.targets[1] = spec.targets[0].clone();
        assert!(synth_style(&spec).is_err());
    }

    #[test]
    fn augmentation_identities() {
        let x = Tensor::<f32>::from_fn([2, 3, 5, 5], |i| i as f32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&x, AugmentPolicy::None, &mut rng).unwrap(), x);
        let img = x.data()[..75].to_vec();
        assert_eq!(pad_crop(&img, 3, 5, 5, 4, 4, 4), img);
        assert_eq!(hflip(&hflip(&img, 3, 5, 5), 3, 5, 5), img);
        let y = augment(&x, AugmentPolicy::PadCropFlip { pad: 4 }, &mut rng).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn shuffle_order_is_reproducible() {
        assert_eq!(epoch_order(50, 9, 3), epoch_order(50, 9, 3));
        assert_ne!(epoch_order(50, 9, 3), epoch_order(50, 9, 4));
    }

    #[test]
    fn dataset_container_round_trip() {
        let ds = synth_style(&SynthStyleSpec::grid(3, 4, 6, 2)).unwrap();
        let back = Dataset::from_container(&ds.to_container()).unwrap();
        assert_eq!(back, ds);
    }
}
