//! Deterministic datasets: synthetic 2-D classification sets and IDX image files.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use dynreg_core::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{DataError, LabError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Examples stored contiguously, each of shape `[c, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    shape: [usize; 3],
    num_classes: usize,
    split: Split,
}

impl Dataset {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, shape: [usize; 3], num_classes: usize, split: Split) -> Result<Self, DataError> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(DataError::Invalid(format!("example shape {shape:?} has a zero extent")));
        }
        if inputs.len() != per * labels.len() {
            return Err(DataError::Invalid(format!(
                "{} values for {} examples of shape {shape:?}",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(DataError::Invalid(format!("label {bad} not below num_classes {num_classes}")));
        }
        Ok(Self { inputs, labels, shape, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    fn example_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn example(&self, i: usize) -> (Tensor, usize) {
        let k = self.example_len();
        let t = Tensor::new(self.shape.to_vec(), self.inputs[i * k..(i + 1) * k].to_vec()).expect("validated shape");
        (t, self.labels[i])
    }

    /// Stacks the given examples into `[n, c, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.batch_flipped(indices, &[])
    }

    /// Like [`Dataset::batch`], mirroring example `j` horizontally when `flips[j]` is set.
    pub fn batch_flipped(&self, indices: &[usize], flips: &[bool]) -> (Tensor, Vec<usize>) {
        let k = self.example_len();
        let [c, h, w] = self.shape;
        let mut data = Vec::with_capacity(k * indices.len());
        for (j, &i) in indices.iter().enumerate() {
            let ex = &self.inputs[i * k..(i + 1) * k];
            if flips.get(j).copied().unwrap_or(false) {
                for row in 0..c * h {
                    data.extend(ex[row * w..(row + 1) * w].iter().rev());
                }
            } else {
                data.extend_from_slice(ex);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("non-empty batch");
        (t, labels)
    }

    /// Widens the label space, e.g. to align a test split with its train split.
    pub fn set_num_classes(&mut self, k: usize) -> Result<(), DataError> {
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= k) {
            return Err(DataError::Invalid(format!("label {bad} not below num_classes {k}")));
        }
        self.num_classes = k;
        Ok(())
    }

    /// Writes `label,x0,x1,...` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let k = self.example_len();
        let header: Vec<String> = std::iter::once("label".to_string()).chain((0..k).map(|i| format!("x{i}"))).collect();
        writeln!(out, "{}", header.join(","))?;
        for (i, label) in self.labels.iter().enumerate() {
            write!(out, "{label}")?;
            for v in &self.inputs[i * k..(i + 1) * k] {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Gaussians,
    Spirals,
}

impl FromStr for SyntheticKind {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "spirals" => Ok(Self::Spirals),
            other => Err(DataError::Invalid(format!("unknown synthetic dataset {other:?}"))),
        }
    }
}

/// `n` points per class in the plane, shaped `[2, 1, 1]`, in class-major order.
///
/// Gaussians put class means on a circle of radius 2; spirals interleave
/// `classes` arms that wind through 1.2 turns.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, classes: usize, noise: f64, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 || classes < 2 {
        return Err(DataError::Invalid(format!("need n >= 1 and classes >= 2, got n={n}, classes={classes}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(DataError::Invalid(format!("noise must be finite and >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut inputs = Vec::with_capacity(2 * n * classes);
    let mut labels = Vec::with_capacity(n * classes);
    for c in 0..classes {
        let phase = std::f64::consts::TAU * c as f64 / classes as f64;
        for j in 0..n {
            let (x, y) = match kind {
                SyntheticKind::Gaussians => (2.0 * phase.cos(), 2.0 * phase.sin()),
                SyntheticKind::Spirals => {
                    let t = (j as f64 + 0.5) / n as f64;
                    let angle = phase + 1.2 * std::f64::consts::TAU * t;
                    (t * angle.cos(), t * angle.sin())
                }
            };
            inputs.push(x + noise * normal.sample(&mut rng));
            inputs.push(y + noise * normal.sample(&mut rng));
            labels.push(c);
        }
    }
    Dataset::new(inputs, labels, [2, 1, 1], classes, Split::Train)
}

/// A generated test split: same law, independent draw.
pub fn gen_synthetic_split(kind: SyntheticKind, n: usize, classes: usize, noise: f64, seed: u64, split: Split) -> Result<Dataset, DataError> {
    let seed = match split {
        Split::Train => seed,
        Split::Test => seed ^ 0x7e57_5e7d_0000_0001,
    };
    let mut ds = gen_synthetic(kind, n, classes, noise, seed)?;
    ds.split = split;
    Ok(ds)
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(DataError::Truncated { offset, needed: 4, len: bytes.len() })
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<(), DataError> {
    let found = be_u32(bytes, 0)?;
    if found != expected {
        return Err(DataError::BadMagic { found, expected });
    }
    Ok(())
}

fn payload(bytes: &[u8], offset: usize, needed: usize) -> Result<&[u8], DataError> {
    bytes.get(offset..offset + needed).ok_or(DataError::Truncated { offset, needed, len: bytes.len() })
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8]), DataError> {
    check_magic(bytes, 0x0000_0803)?;
    let n = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    let pixels = payload(bytes, 16, n * rows * cols)?;
    Ok((n, rows, cols, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8], DataError> {
    check_magic(bytes, 0x0000_0801)?;
    let n = be_u32(bytes, 4)? as usize;
    payload(bytes, 8, n)
}

/// Decodes a pair of IDX buffers; pixels are scaled to `[0, 1]`.
pub fn decode_idx(images: &[u8], labels: &[u8], split: Split) -> Result<Dataset, DataError> {
    let (n, rows, cols, pixels) = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch { images: n, labels: labels.len() });
    }
    if n == 0 || rows == 0 || cols == 0 {
        return Err(DataError::Invalid(format!("empty IDX file: {n} images of {rows}x{cols}")));
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let inputs = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = labels.iter().map(|&l| l as usize).collect();
    Dataset::new(inputs, labels, [1, rows, cols], classes.max(2), split)
}

pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset, LabError> {
    let img = std::fs::read(images).map_err(|e| LabError::io(images, e))?;
    let lab = std::fs::read(labels).map_err(|e| LabError::io(labels, e))?;
    Ok(decode_idx(&img, &lab, split)?)
}

/// Per-channel mean/std, fitted on a train split and reused for test.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(ds: &Dataset) -> Self {
        let [c, h, w] = ds.shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for ex in ds.inputs.chunks(c * plane) {
            for ch in 0..c {
                for &v in &ex[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (ds.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                let var = (s / count - *m * *m).max(0.0);
                // a constant channel is only centred
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    fn map(&self, shape: [usize; 3], data: &mut [f64], f: impl Fn(f64, f64, f64) -> f64) {
        let plane = shape[1] * shape[2];
        for (i, v) in data.iter_mut().enumerate() {
            let ch = (i / plane) % shape[0];
            *v = f(*v, self.mean[ch], self.std[ch]);
        }
    }

    pub fn apply(&self, ds: &mut Dataset) {
        let shape = ds.shape;
        self.map(shape, &mut ds.inputs, |v, m, s| (v - m) / s);
    }

    pub fn invert(&self, ds: &mut Dataset) {
        let shape = ds.shape;
        self.map(shape, &mut ds.inputs, |v, m, s| v * s + m);
    }
}

/// Shuffled mini-batches; the order of epoch `e` depends only on `(seed, e)`.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
}

impl BatchIterator {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Result<Self, DataError> {
        if len == 0 || batch_size == 0 {
            return Err(DataError::Invalid(format!("batching {len} examples by {batch_size}")));
        }
        Ok(Self { len, batch_size, seed, epoch: 0 })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Batches per epoch; the last may be partial.
    pub fn batches_per_epoch(&self) -> usize {
        self.len.div_ceil(self.batch_size)
    }

    pub fn rng_for(&self, epoch: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        rng
    }

    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len).collect();
        idx.shuffle(&mut self.rng_for(epoch));
        idx
    }

    /// Returns the batches of the current epoch and advances the counter.
    pub fn next_epoch(&mut self) -> Vec<Vec<usize>> {
        let order = self.order(self.epoch);
        self.epoch += 1;
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }
}

/// Independent coin flips for horizontal mirroring.
pub fn flip_mask(rng: &mut impl Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.gen::<bool>()).collect()
}
