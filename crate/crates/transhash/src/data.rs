//! Datasets: synthetic generation, the versioned binary file format, a
//! CIFAR-10 binary reader, train-time augmentation, and the query/database
//! split protocol.
//!
//! Images are `[H, W, C]` tensors with pixel values in `[0, 1]`; on disk
//! pixels are `u8`. Every record carries a split tag. Tags are exclusive;
//! the *retrieval database* is defined as all non-query records (tags
//! `Database` and `Train`), matching the usual per-class protocol where the
//! training set is drawn from the database.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labels of one image. Single-label data uses one-element sets.
pub type LabelSet = BTreeSet<u32>;

const THDS_MAGIC: &[u8; 4] = b"THDS";
const THDS_VERSION: u16 = 1;

/// Split tag of a record. `Train` records are part of the retrieval database.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Database,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Query => 1,
            Split::Database => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Split> {
        match b {
            0 => Some(Split::Train),
            1 => Some(Split::Query),
            2 => Some(Split::Database),
            _ => None,
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "database" => Ok(Split::Database),
            other => Err(Error::config(format!(
                "unknown split {other:?}; expected train, query, or database"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<LabelSet>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() || self.images.len() != self.splits.len() {
            return Err(Error::contract(format!(
                "dataset arrays disagree: {} images, {} label sets, {} split tags",
                self.images.len(),
                self.labels.len(),
                self.splits.len()
            )));
        }
        let expect = vec![self.height, self.width, self.channels];
        for (i, img) in self.images.iter().enumerate() {
            if img.shape != expect {
                return Err(Error::contract(format!(
                    "image {i} has shape {:?}, dataset is {expect:?}",
                    img.shape
                )));
            }
        }
        for (i, l) in self.labels.iter().enumerate() {
            if l.is_empty() {
                return Err(Error::contract(format!("image {i} has an empty label set")));
            }
        }
        Ok(())
    }

    /// Indices whose tag is exactly `split`.
    pub fn tagged_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// Retrieval-database indices: every non-query record.
    pub fn database_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] != Split::Query).collect()
    }

    /// Resolves a CLI-style split name to record indices.
    pub fn select(&self, split: Split) -> Vec<usize> {
        match split {
            Split::Database => self.database_indices(),
            other => self.tagged_indices(other),
        }
    }

    // ── Binary dataset format ───────────────────────────────────────
    //
    // magic "THDS" | u16 version | u16 H | u16 W | u16 C | u64 count,
    // then per record: u8 split | u16 label_count | label_count x u32 |
    // H*W*C x u8 pixels. All integers little-endian; pixels row-major in
    // (row, col, channel) order; pixel byte = round(value * 255).

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut buf = Vec::with_capacity(16 + self.len() * (3 + self.height * self.width * self.channels));
        buf.extend_from_slice(THDS_MAGIC);
        buf.extend_from_slice(&THDS_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.height as u16).to_le_bytes());
        buf.extend_from_slice(&(self.width as u16).to_le_bytes());
        buf.extend_from_slice(&(self.channels as u16).to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for i in 0..self.len() {
            buf.push(self.splits[i].to_byte());
            buf.extend_from_slice(&(self.labels[i].len() as u16).to_le_bytes());
            for &l in &self.labels[i] {
                buf.extend_from_slice(&l.to_le_bytes());
            }
            for &v in &self.images[i].data {
                buf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path)?;
        let mut r = ByteReader::new(&bytes, path);
        let magic = r.take(4, "magic")?;
        if magic != THDS_MAGIC {
            return Err(r.format_err(0, format!("bad magic {magic:?}, expected {THDS_MAGIC:?}")));
        }
        let version = r.u16("version")?;
        if version != THDS_VERSION {
            return Err(r.format_err(4, format!("unsupported version {version}")));
        }
        let height = r.u16("height")? as usize;
        let width = r.u16("width")? as usize;
        let channels = r.u16("channels")? as usize;
        let count = r.u64("count")? as usize;
        let pixels = height * width * channels;

        // a record is at least 4 bytes, so cap preallocation by file size
        let cap = count.min(bytes.len());
        let mut images = Vec::with_capacity(cap);
        let mut labels = Vec::with_capacity(cap);
        let mut splits = Vec::with_capacity(cap);
        for rec in 0..count {
            let at = r.pos;
            let tag = r.u8("split tag")?;
            let split = Split::from_byte(tag)
                .ok_or_else(|| r.format_err(at as u64, format!("record {rec}: bad split tag {tag}")))?;
            let label_count = r.u16("label count")? as usize;
            if label_count == 0 {
                return Err(r.format_err(at as u64, format!("record {rec}: empty label set")));
            }
            let mut set = LabelSet::new();
            for _ in 0..label_count {
                set.insert(r.u32("label")?);
            }
            let raw = r.take(pixels, "pixels")?;
            let data: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
            images.push(Tensor::new(data, vec![height, width, channels])?);
            labels.push(set);
            splits.push(split);
        }
        let ds = Dataset {
            height,
            width,
            channels,
            images,
            labels,
            splits,
        };
        ds.validate()?;
        Ok(ds)
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pub(crate) pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8], path: &'a Path) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    pub(crate) fn format_err(&self, offset: u64, msg: String) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            msg,
        }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.format_err(
                self.pos as u64,
                format!("truncated while reading {what} ({n} bytes needed, {} left)", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

// ── Synthetic data ──────────────────────────────────────────────────

/// Deterministic class-conditional images: a distinct oriented sinusoid per
/// class plus seeded Gaussian noise, quantized to 8 bits so a save/load
/// round trip is exact. Labels are single-element sets; all records start
/// tagged `Database` (see [`split_protocol`]).
pub fn generate_synthetic(
    classes: usize,
    per_class: usize,
    height: usize,
    width: usize,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::config(format!(
            "synthetic data needs at least 2 classes, got {classes}"
        )));
    }
    if per_class == 0 {
        return Err(Error::config("synthetic data needs per_class >= 1"));
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid normal");

    let mut images = Vec::with_capacity(classes * per_class);
    let mut labels = Vec::with_capacity(classes * per_class);
    for class in 0..classes {
        let angle = std::f64::consts::PI * class as f64 / classes as f64;
        let freq = 1.5 + 0.9 * class as f64;
        let (dx, dy) = (angle.cos(), angle.sin());
        for _ in 0..per_class {
            let mut data = Vec::with_capacity(height * width * 3);
            for r in 0..height {
                for c in 0..width {
                    let u = c as f64 / width as f64;
                    let v = r as f64 / height as f64;
                    let phase = 2.0 * std::f64::consts::PI * freq * (dx * u + dy * v);
                    for ch in 0..3 {
                        let offset = ch as f64 * 2.0 + class as f64 * 0.7;
                        let base = 0.5 + 0.35 * (phase + offset).sin();
                        let value = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                        // quantize like the file format does
                        data.push((value * 255.0).round() / 255.0);
                    }
                }
            }
            images.push(Tensor::new(data, vec![height, width, 3])?);
            labels.push(LabelSet::from([class as u32]));
        }
    }
    let splits = vec![Split::Database; images.len()];
    Ok(Dataset {
        height,
        width,
        channels: 3,
        images,
        labels,
        splits,
    })
}

/// Classifies every image by its nearest class centroid in pixel space and
/// returns the accuracy. Used as a separability gate on generated data.
pub fn nearest_centroid_accuracy(dataset: &Dataset) -> Result<f64> {
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (img, label_set) in dataset.images.iter().zip(&dataset.labels) {
        let label = *label_set
            .iter()
            .next()
            .ok_or_else(|| Error::contract("centroid check on empty label set"))?;
        let entry = sums
            .entry(label)
            .or_insert_with(|| (vec![0.0; img.numel()], 0));
        for (acc, &v) in entry.0.iter_mut().zip(&img.data) {
            *acc += v;
        }
        entry.1 += 1;
    }
    let centroids: BTreeMap<u32, Vec<f64>> = sums
        .into_iter()
        .map(|(label, (sum, count))| {
            (label, sum.into_iter().map(|v| v / count as f64).collect())
        })
        .collect();

    let mut correct = 0usize;
    for (img, label_set) in dataset.images.iter().zip(&dataset.labels) {
        let mut best = (f64::INFINITY, 0u32);
        for (&label, centroid) in &centroids {
            let dist: f64 = img
                .data
                .iter()
                .zip(centroid)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if dist < best.0 {
                best = (dist, label);
            }
        }
        if label_set.contains(&best.1) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

// ── CIFAR-10 binary reader ──────────────────────────────────────────

/// Reads files in the public CIFAR-10 binary layout: 3073-byte records of
/// one label byte followed by 32x32 pixels stored channel-planar (1024 red,
/// 1024 green, 1024 blue). All records come back tagged `Database`.
pub fn load_cifar10_bin(paths: &[impl AsRef<Path>]) -> Result<Dataset> {
    const SIDE: usize = 32;
    const PLANE: usize = SIDE * SIDE;
    const RECORD: usize = 1 + 3 * PLANE;

    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: (bytes.len() - bytes.len() % RECORD) as u64,
                msg: format!(
                    "file length {} is not a multiple of the {RECORD}-byte record size",
                    bytes.len()
                ),
            });
        }
        for record in bytes.chunks_exact(RECORD) {
            let label = record[0] as u32;
            let planes = &record[1..];
            let mut data = Vec::with_capacity(3 * PLANE);
            for p in 0..PLANE {
                for ch in 0..3 {
                    data.push(planes[ch * PLANE + p] as f64 / 255.0);
                }
            }
            images.push(Tensor::new(data, vec![SIDE, SIDE, 3])?);
            labels.push(LabelSet::from([label]));
        }
    }
    let splits = vec![Split::Database; images.len()];
    let ds = Dataset {
        height: SIDE,
        width: SIDE,
        channels: 3,
        images,
        labels,
        splits,
    };
    ds.validate()?;
    Ok(ds)
}

// ── Augmentation ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Horizontal flip with probability 1/2.
    pub flip: bool,
    /// Reflect-pad by this many pixels, then crop back at a random offset.
    pub crop_padding: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip: true,
            crop_padding: 2,
        }
    }
}

/// Mirrors an `[H, W, C]` image left-right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    let mut data = vec![0.0; image.numel()];
    for r in 0..h {
        for col in 0..w {
            let src = (r * w + col) * c;
            let dst = (r * w + (w - 1 - col)) * c;
            data[dst..dst + c].copy_from_slice(&image.data[src..src + c]);
        }
    }
    Tensor::new(data, image.shape.clone()).expect("same shape")
}

fn reflect_index(i: isize, len: usize) -> usize {
    // reflect without repeating the border pixel: -1 -> 1, len -> len-2
    let len = len as isize;
    let mut i = i;
    while i < 0 || i >= len {
        if i < 0 {
            i = -i;
        } else {
            i = 2 * (len - 1) - i;
        }
    }
    i as usize
}

/// Training-time augmentation: optional coin-flip mirror, then reflect-pad
/// and random crop back to the original size. Evaluation uses no
/// augmentation (images pass through unchanged elsewhere).
pub fn augment(image: &Tensor, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    if image.shape.len() != 3 {
        return Err(Error::contract(format!(
            "augment expects an [H, W, C] image, got {:?}",
            image.shape
        )));
    }
    let (h, w, c) = (image.shape[0], image.shape[1], image.shape[2]);
    if cfg.crop_padding >= h.min(w) {
        return Err(Error::config(format!(
            "augment.crop_padding {} must be smaller than the image side {}",
            cfg.crop_padding,
            h.min(w)
        )));
    }
    let mut out = if cfg.flip && rng.gen::<bool>() {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if cfg.crop_padding > 0 {
        let pad = cfg.crop_padding as isize;
        let dy = rng.gen_range(0..=2 * cfg.crop_padding) as isize - pad;
        let dx = rng.gen_range(0..=2 * cfg.crop_padding) as isize - pad;
        let mut data = Vec::with_capacity(out.numel());
        for r in 0..h {
            let src_r = reflect_index(r as isize + dy, h);
            for col in 0..w {
                let src_c = reflect_index(col as isize + dx, w);
                let base = (src_r * w + src_c) * c;
                data.extend_from_slice(&out.data[base..base + c]);
            }
        }
        out = Tensor::new(data, out.shape.clone())?;
    }
    Ok(out)
}

// ── Split protocol ──────────────────────────────────────────────────

/// Assigns split tags per class: `queries_per_class` records become the
/// query set, everything else is the database, and `train_per_class`
/// database records are additionally marked as the training set.
///
/// Requires single-label records (per-class sampling is undefined for
/// multi-label data). Deterministic in `seed`.
pub fn split_protocol(
    mut dataset: Dataset,
    queries_per_class: usize,
    train_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    use rand::SeedableRng;
    dataset.validate()?;
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, labels) in dataset.labels.iter().enumerate() {
        if labels.len() != 1 {
            return Err(Error::config(format!(
                "split protocol needs single-label records; record {i} has {} labels",
                labels.len()
            )));
        }
        by_class.entry(*labels.iter().next().unwrap()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (class, mut indices) in by_class {
        if indices.len() < queries_per_class + train_per_class {
            return Err(Error::config(format!(
                "class {class} has {} records, needs at least {} \
                 ({queries_per_class} query + {train_per_class} train)",
                indices.len(),
                queries_per_class + train_per_class
            )));
        }
        indices.shuffle(&mut rng);
        for (pos, &i) in indices.iter().enumerate() {
            dataset.splits[i] = if pos < queries_per_class {
                Split::Query
            } else if pos < queries_per_class + train_per_class {
                Split::Train
            } else {
                Split::Database
            };
        }
    }
    Ok(dataset)
}
