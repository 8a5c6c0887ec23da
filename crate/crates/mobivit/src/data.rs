//! Datasets: the CIFAR-10 binary format, synthetic sets and preprocessing.

use std::fs;
use std::path::Path;

use mobivit_core::rng::{substream, Purpose};
use mobivit_core::{Error as CoreError, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One image with pixels in `[0, 1]`, shaped `[3×S×S]`, before normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub pixels: Tensor,
    pub label: usize,
}

/// Random access to labeled images.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> LabeledImage;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn label(&self, index: usize) -> usize {
        self.get(index).label
    }
}

impl Dataset for [LabeledImage] {
    fn len(&self) -> usize {
        <[LabeledImage]>::len(self)
    }

    fn get(&self, index: usize) -> LabeledImage {
        self[index].clone()
    }

    fn label(&self, index: usize) -> usize {
        self[index].label
    }
}

impl Dataset for Vec<LabeledImage> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn get(&self, index: usize) -> LabeledImage {
        self[index].clone()
    }

    fn label(&self, index: usize) -> usize {
        self[index].label
    }
}

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn files(self) -> &'static [&'static str] {
        match self {
            Split::Train => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            Split::Test => &["test_batch.bin"],
        }
    }
}

/// CIFAR-10 records kept as raw bytes; pixels are scaled to `[0, 1]` only
/// when an image is requested, so a 50,000-image split costs ~150 MB.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CifarSplit {
    labels: Vec<u8>,
    pixels: Vec<u8>,
}

impl CifarSplit {
    /// Parses whole records. `base` is added to reported byte offsets.
    pub fn parse(bytes: &[u8], base: usize) -> Result<Self, CoreError> {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        if whole != bytes.len() {
            return Err(CoreError::Format {
                offset: base + whole,
                reason: format!(
                    "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                    bytes.len()
                ),
            });
        }
        let n = bytes.len() / CIFAR_RECORD;
        let mut out = Self {
            labels: Vec::with_capacity(n),
            pixels: Vec::with_capacity(n * CIFAR_PIXELS),
        };
        for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if rec[0] as usize >= CIFAR_CLASSES {
                return Err(CoreError::Format {
                    offset: base + r * CIFAR_RECORD,
                    reason: format!("label byte {} is not a class in 0..{CIFAR_CLASSES}", rec[0]),
                });
            }
            out.labels.push(rec[0]);
            out.pixels.extend_from_slice(&rec[1..]);
        }
        Ok(out)
    }

    /// The records in file order, byte for byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.labels.len() * CIFAR_RECORD);
        for (l, px) in self.labels.iter().zip(self.pixels.chunks_exact(CIFAR_PIXELS)) {
            out.push(*l);
            out.extend_from_slice(px);
        }
        out
    }

    pub fn extend(&mut self, other: CifarSplit) {
        self.labels.extend(other.labels);
        self.pixels.extend(other.pixels);
    }

    /// Keeps the first `n` records.
    pub fn truncate(&mut self, n: usize) {
        self.labels.truncate(n);
        self.pixels.truncate(n * CIFAR_PIXELS);
    }

    /// Splits off records `at..`.
    pub fn split_off(&mut self, at: usize) -> CifarSplit {
        let at = at.min(self.labels.len());
        CifarSplit {
            labels: self.labels.split_off(at),
            pixels: self.pixels.split_off(at * CIFAR_PIXELS),
        }
    }
}

impl Dataset for CifarSplit {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn get(&self, index: usize) -> LabeledImage {
        let px = &self.pixels[index * CIFAR_PIXELS..(index + 1) * CIFAR_PIXELS];
        let pixels = Tensor::from_fn(&[3, CIFAR_SIDE, CIFAR_SIDE], |i| px[i] as f64 / 255.0);
        LabeledImage {
            pixels,
            label: self.labels[index] as usize,
        }
    }

    fn label(&self, index: usize) -> usize {
        self.labels[index] as usize
    }
}

/// Reads a split from the directory holding the extracted binary batches.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<CifarSplit> {
    let mut out = CifarSplit::default();
    for name in split.files() {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        out.extend(CifarSplit::parse(&bytes, 0).map_err(|e| CliError::data(&path, e))?);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    /// Two classes with constant-brightness means `0.5 ∓ MU` plus iid noise.
    TwoGaussians,
    /// The label is the index of the brightest cell of a `g×g` layout,
    /// `g = ceil(sqrt(K))` (quadrants for `K ≤ 4`).
    GridPatterns,
    /// The class pattern sits in the centre of a 4×4 cell layout. Corner
    /// cells hold full-contrast clutter (the pattern of a random class), edge
    /// cells an even mix of the class pattern and clutter.
    CenteredPatterns,
}

impl SyntheticKind {
    fn key(self) -> u64 {
        match self {
            SyntheticKind::TwoGaussians => 0,
            SyntheticKind::GridPatterns => 1,
            SyntheticKind::CenteredPatterns => 2,
        }
    }
}

/// Half the distance between the two class means of `two_gaussians`.
pub const MU: f64 = 0.15;
/// Default noise level: the means are separated by exactly `6σ`.
pub const DEFAULT_SIGMA: f64 = MU / 3.0;

const DIM: f64 = 0.25;
const BRIGHT: f64 = 0.75;

/// `n` images of side `size`, labels `i mod K`. Image `i` depends only on
/// `(seed, kind, i)`.
pub fn synthetic_set(
    kind: SyntheticKind,
    n: usize,
    size: usize,
    classes: usize,
    seed: u64,
    sigma: f64,
) -> Result<Vec<LabeledImage>> {
    if classes == 0 || n < classes {
        return Err(CliError::Config(format!("synthetic set needs n >= K >= 1, got n={n} K={classes}")));
    }
    if kind == SyntheticKind::TwoGaussians && classes != 2 {
        return Err(CliError::Config(format!("two_gaussians has 2 classes, got K={classes}")));
    }
    if size == 0 || !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CliError::Config(format!("bad synthetic size {size} or sigma {sigma}")));
    }
    let out = (0..n)
        .map(|i| {
            let label = i % classes;
            let mut rng = substream(seed, Purpose::Synthetic, kind.key(), i as u64);
            let mean = match kind {
                SyntheticKind::TwoGaussians => {
                    let m = if label == 0 { 0.5 - MU } else { 0.5 + MU };
                    vec![m; size * size]
                }
                SyntheticKind::GridPatterns => cell_pattern(label, classes, size, size),
                SyntheticKind::CenteredPatterns => centered(label, classes, size, &mut rng),
            };
            let pixels = Tensor::from_fn(&[3, size, size], |j| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (mean[j % (size * size)] + sigma * z).clamp(0.0, 1.0)
            });
            LabeledImage { pixels, label }
        })
        .collect();
    Ok(out)
}

/// `h×w` plane, dim except for cell `k` of a `g×g` layout.
fn cell_pattern(k: usize, classes: usize, h: usize, w: usize) -> Vec<f64> {
    levels_pattern(k, classes, h, w, (DIM, BRIGHT))
}

fn levels_pattern(k: usize, classes: usize, h: usize, w: usize, (dim, bright): (f64, f64)) -> Vec<f64> {
    let g = (classes as f64).sqrt().ceil() as usize;
    let (ky, kx) = (k / g, k % g);
    let mut out = vec![dim; h * w];
    for y in 0..h {
        for x in 0..w {
            if y * g / h == ky && x * g / w == kx {
                out[y * w + x] = bright;
            }
        }
    }
    out
}

fn centered(label: usize, classes: usize, size: usize, rng: &mut impl Rng) -> Vec<f64> {
    const CELLS: usize = 4;
    let mut out = vec![0.0; size * size];
    for cy in 0..CELLS {
        for cx in 0..CELLS {
            let border = [cy == 0 || cy == CELLS - 1, cx == 0 || cx == CELLS - 1];
            let strength = match border {
                [false, false] => 1.0,
                [true, true] => 0.0,
                _ => 0.5,
            };
            let (y0, y1) = (cy * size / CELLS, (cy + 1) * size / CELLS);
            let (x0, x1) = (cx * size / CELLS, (cx + 1) * size / CELLS);
            let own = cell_pattern(label, classes, y1 - y0, x1 - x0);
            let other = levels_pattern(rng.random_range(0..classes), classes, y1 - y0, x1 - x0, (0.0, 1.0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let j = (y - y0) * (x1 - x0) + (x - x0);
                    out[y * size + x] = strength * own[j] + (1.0 - strength) * other[j];
                }
            }
        }
    }
    out
}

/// Resize, augmentation and normalization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preprocess {
    pub mean: [f64; 3],
    pub std: [f64; 3],
    /// Zero padding before the training-time random crop; 0 disables it.
    pub crop_pad: usize,
    pub flip: bool,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            mean: [0.5; 3],
            std: [0.5; 3],
            crop_pad: 4,
            flip: true,
        }
    }
}

impl Preprocess {
    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0 && s.is_finite())) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(CliError::Config(format!(
                "normalization needs finite mean and positive std, got {:?} / {:?}",
                self.mean, self.std
            )));
        }
        Ok(())
    }
}

fn dims(img: &Tensor) -> (usize, usize, usize) {
    let s = img.shape();
    (s[0], s[1], s[2])
}

/// Nearest-neighbour resize of `[C×H×W]` to `[C×S×S]`; source index
/// `floor(i·H/S)`.
pub fn resize_nearest(img: &Tensor, size: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let d = img.data();
    Tensor::from_fn(&[c, size, size], |j| {
        let (ch, y, x) = (j / (size * size), j / size % size, j % size);
        d[ch * h * w + (y * h / size) * w + x * w / size]
    })
}

pub fn hflip(img: &Tensor) -> Tensor {
    let (c, h, w) = dims(img);
    let d = img.data();
    Tensor::from_fn(&[c, h, w], |j| {
        let (ch, y, x) = (j / (h * w), j / w % h, j % w);
        d[ch * h * w + y * w + (w - 1 - x)]
    })
}

/// Crops an `H×W` window at offset `(dy, dx)` from the image zero-padded by
/// `pad` on every side; offsets range over `0..=2·pad`.
pub fn crop_padded(img: &Tensor, pad: usize, dy: usize, dx: usize) -> Tensor {
    let (c, h, w) = dims(img);
    let d = img.data();
    Tensor::from_fn(&[c, h, w], |j| {
        let (ch, y, x) = (j / (h * w), j / w % h, j % w);
        let (sy, sx) = ((y + dy).wrapping_sub(pad), (x + dx).wrapping_sub(pad));
        if sy < h && sx < w {
            d[ch * h * w + sy * w + sx]
        } else {
            0.0
        }
    })
}

pub fn normalize(img: &Tensor, cfg: &Preprocess) -> Tensor {
    let plane = img.shape()[1] * img.shape()[2];
    Tensor::from_fn(img.shape(), |j| (img.data()[j] - cfg.mean[j / plane]) / cfg.std[j / plane])
}

pub fn denormalize(img: &Tensor, cfg: &Preprocess) -> Tensor {
    let plane = img.shape()[1] * img.shape()[2];
    Tensor::from_fn(img.shape(), |j| img.data()[j] * cfg.std[j / plane] + cfg.mean[j / plane])
}

/// Resize to `size`, then (training only) random pad-crop and horizontal
/// flip, then normalize. Evaluation consumes no randomness.
pub fn preprocess<R: Rng>(img: &Tensor, size: usize, train: Option<&mut R>, cfg: &Preprocess) -> Result<Tensor> {
    if size < 8 {
        return Err(CliError::Config(format!("target size {size} below the minimum of 8")));
    }
    if img.ndim() != 3 || img.shape()[0] != 3 {
        return Err(CoreError::Dimension {
            op: "preprocess",
            lhs: img.shape().to_vec(),
            rhs: vec![3, size, size],
        }
        .into());
    }
    let mut x = if img.shape()[1..] == [size, size] {
        img.clone()
    } else {
        resize_nearest(img, size)
    };
    if let Some(rng) = train {
        if cfg.crop_pad > 0 {
            let dy = rng.random_range(0..=2 * cfg.crop_pad);
            let dx = rng.random_range(0..=2 * cfg.crop_pad);
            x = crop_padded(&x, cfg.crop_pad, dy, dx);
        }
        if cfg.flip && rng.random::<bool>() {
            x = hflip(&x);
        }
    }
    Ok(normalize(&x, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(label: u8, fill: u8) -> Vec<u8> {
        let mut r = vec![label];
        r.extend((0..CIFAR_PIXELS).map(|i| fill.wrapping_add(i as u8)));
        r
    }

    #[test]
    fn cifar_round_trip_and_labels() {
        let mut bytes = record(3, 0);
        bytes.extend(record(9, 7));
        let split = CifarSplit::parse(&bytes, 0).unwrap();
        assert_eq!(split.len(), 2);
        assert_eq!(split.label(0), bytes[0] as usize);
        assert_eq!(split.to_bytes(), bytes);
        let img = split.get(1);
        assert_eq!(img.pixels.shape(), &[3, 32, 32]);
        assert_eq!(img.pixels.data()[0], 7.0 / 255.0);
        // channel-planar: the second plane starts at byte 1024
        assert_eq!(img.pixels.data()[1024], bytes[CIFAR_RECORD + 1 + 1024] as f64 / 255.0);
    }

    #[test]
    fn cifar_format_errors_carry_offsets() {
        let mut bytes = record(1, 0);
        bytes.extend(record(10, 0));
        match CifarSplit::parse(&bytes, 0) {
            Err(CoreError::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
        let short = &record(1, 0)[..100];
        let mut two = record(1, 0);
        two.extend_from_slice(short);
        match CifarSplit::parse(&two, 0) {
            Err(CoreError::Format { offset, .. }) => assert_eq!(offset, CIFAR_RECORD),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_degenerate_at_zero_sigma() {
        let a = synthetic_set(SyntheticKind::TwoGaussians, 20, 16, 2, 4, DEFAULT_SIGMA).unwrap();
        let b = synthetic_set(SyntheticKind::TwoGaussians, 20, 16, 2, 4, DEFAULT_SIGMA).unwrap();
        assert_eq!(a, b);
        let z = synthetic_set(SyntheticKind::TwoGaussians, 20, 16, 2, 4, 0.0).unwrap();
        let mut distinct: Vec<&Tensor> = Vec::new();
        for im in &z {
            if !distinct.contains(&&im.pixels) {
                distinct.push(&im.pixels);
            }
        }
        assert_eq!(distinct.len(), 2);
        assert!(synthetic_set(SyntheticKind::GridPatterns, 3, 16, 4, 0, 0.0).is_err());
    }

    #[test]
    fn grid_patterns_brightest_quadrant_is_label() {
        let set = synthetic_set(SyntheticKind::GridPatterns, 8, 16, 4, 1, 0.0).unwrap();
        for im in &set {
            let d = im.pixels.data();
            let quad = |q: usize| -> f64 {
                (0..256)
                    .filter(|j| (j / 16) / 8 == q / 2 && (j % 16) / 8 == q % 2)
                    .map(|j| d[j])
                    .sum()
            };
            let best = (0..4).max_by(|&a, &b| quad(a).total_cmp(&quad(b))).unwrap();
            assert_eq!(best, im.label);
        }
    }

    #[test]
    fn centered_corners_carry_no_label() {
        let set = synthetic_set(SyntheticKind::CenteredPatterns, 40, 16, 4, 2, 0.0).unwrap();
        for im in &set {
            // centre cells show the class pattern exactly
            let centre = cell_pattern(im.label, 4, 4, 4);
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(im.pixels.data()[(4 + y) * 16 + 4 + x], centre[y * 4 + x]);
                }
            }
        }
    }

    #[test]
    fn resize_and_flip_oracles() {
        let img = Tensor::from_fn(&[3, 32, 32], |i| i as f64);
        assert_eq!(resize_nearest(&img, 32), img);
        assert_eq!(hflip(&hflip(&img)), img);
        let up = resize_nearest(&img, 64);
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..64 {
                    assert_eq!(up.data()[c * 4096 + y * 64 + x], img.data()[c * 1024 + (y / 2) * 32 + x / 2]);
                }
            }
        }
    }

    #[test]
    fn crop_centre_offset_is_identity() {
        let img = Tensor::from_fn(&[3, 8, 8], |i| i as f64);
        assert_eq!(crop_padded(&img, 4, 4, 4), img);
        let shifted = crop_padded(&img, 4, 0, 0);
        assert_eq!(shifted.data()[0], 0.0);
        assert_eq!(shifted.data()[4 * 8 + 4], img.data()[0]);
    }

    #[test]
    fn normalization_round_trip_and_eval_purity() {
        let cfg = Preprocess {
            mean: [0.4, 0.5, 0.6],
            std: [0.2, 0.3, 0.25],
            ..Preprocess::default()
        };
        let img = Tensor::from_fn(&[3, 8, 8], |i| (i % 17) as f64 / 17.0);
        let back = denormalize(&normalize(&img, &cfg), &cfg);
        assert!(back.max_abs_diff(&img).unwrap() < 1e-12);
        let a = preprocess::<ChaCha8Rng>(&img, 16, None, &cfg).unwrap();
        let b = preprocess::<ChaCha8Rng>(&img, 16, None, &cfg).unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = preprocess(&img, 16, Some(&mut rng), &cfg).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(preprocess::<ChaCha8Rng>(&img, 4, None, &cfg).is_err());
    }
}
