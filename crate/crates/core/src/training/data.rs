//! In-memory datasets, batching and the synthetic oriented-bars task.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coding::{events_to_frames, normalize_frames, EventStream, Slicing};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One minibatch, time-major: `inputs` is `[T, B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Labeled samples. Static samples are `[C,H,W]` and are direct-encoded
/// (repeated at every timestep); temporal samples are `[T,C,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Tensor>,
    labels: Vec<usize>,
    classes: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Tensor>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::data(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(first) = samples.first() {
            if !(3..=4).contains(&first.rank()) {
                return Err(Error::data(format!(
                    "samples must be [C,H,W] or [T,C,H,W], got {:?}",
                    first.shape()
                )));
            }
            if let Some(i) = samples.iter().position(|s| s.shape() != first.shape()) {
                return Err(Error::data(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    samples[i].shape(),
                    first.shape()
                )));
            }
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset {
            samples,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    /// `[C,H,W]` of one frame.
    pub fn frame_shape(&self) -> Option<[usize; 3]> {
        let s = self.samples.first()?.shape();
        let tail = &s[s.len() - 3..];
        Some([tail[0], tail[1], tail[2]])
    }

    /// Number of timesteps baked into temporal samples.
    pub fn temporal_steps(&self) -> Option<usize> {
        self.samples.first().filter(|s| s.rank() == 4).map(|s| s.shape()[0])
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let part = |r: std::ops::Range<usize>| Dataset {
            samples: self.samples[r.clone()].to_vec(),
            labels: self.labels[r].to_vec(),
            classes: self.classes,
        };
        (part(0..n), part(n..self.len()))
    }

    /// Assembles the samples at `indices`, mirroring those with `flip[i]` set.
    pub fn batch(&self, indices: &[usize], steps: usize, flip: Option<&[bool]>) -> Result<Batch> {
        let [c, h, w] = self.frame_shape().ok_or_else(|| Error::data("empty dataset"))?;
        if let Some(t) = self.temporal_steps() {
            if t != steps {
                return Err(Error::config(format!("samples carry {t} frames but T={steps}")));
            }
        }
        let frame = c * h * w;
        let b = indices.len();
        let mut data = vec![0.0f32; steps * b * frame];
        for (bi, &idx) in indices.iter().enumerate() {
            let s = self
                .samples
                .get(idx)
                .ok_or_else(|| Error::internal(format!("sample index {idx} out of range")))?;
            let mirrored = flip.is_some_and(|f| f[bi]);
            for t in 0..steps {
                let src = if s.rank() == 4 {
                    &s.data()[t * frame..(t + 1) * frame]
                } else {
                    s.data()
                };
                let dst = &mut data[(t * b + bi) * frame..(t * b + bi + 1) * frame];
                if mirrored {
                    for (row_out, row_in) in dst.chunks_mut(w).zip(src.chunks(w)) {
                        for (o, i) in row_out.iter_mut().zip(row_in.iter().rev()) {
                            *o = *i;
                        }
                    }
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }
        Ok(Batch {
            inputs: Tensor::new(vec![steps, b, c, h, w], data)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// Consecutive batches in dataset order (the last one may be short).
    pub fn batches(&self, batch_size: usize, steps: usize) -> Result<Vec<Batch>> {
        if batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        let order: Vec<usize> = (0..self.len()).collect();
        order.chunks(batch_size).map(|c| self.batch(c, steps, None)).collect()
    }

    /// A directory of tensor files plus `labels.csv` (`file,label`).
    pub fn load_images(dir: &Path, classes: usize) -> Result<Self> {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (name, label) in read_labels(dir)? {
            let t = Tensor::load(&dir.join(&name))
                .map_err(|e| Error::data(format!("{name}: {e}")))?;
            samples.push(t);
            labels.push(label);
        }
        Dataset::new(samples, labels, classes)
    }

    /// A directory of event CSV files plus `labels.csv`; each recording is
    /// integrated into `steps` normalized two-polarity frames.
    pub fn load_events(
        dir: &Path,
        classes: usize,
        width: u16,
        height: u16,
        steps: usize,
        slicing: Slicing,
    ) -> Result<Self> {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for (name, label) in read_labels(dir)? {
            let stream = EventStream::load_csv(&dir.join(&name), width, height)?;
            samples.push(normalize_frames(&events_to_frames(&stream, steps, slicing)?));
            labels.push(label);
        }
        Dataset::new(samples, labels, classes)
    }
}

fn read_labels(dir: &Path) -> Result<Vec<(String, usize)>> {
    let path = dir.join("labels.csv");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next().map(str::trim) {
        Some("file,label") => {}
        other => return Err(Error::data(format!("labels.csv: expected header file,label, got {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let (file, label) = line
                .split_once(',')
                .ok_or_else(|| Error::data(format!("labels.csv row {}: expected 2 fields", n + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::data(format!("labels.csv row {}: bad label {label:?}", n + 1)))?;
            Ok((file.trim().to_string(), label))
        })
        .collect()
}

pub const BARS_SIZE: usize = 8;
pub const BARS_CLASSES: usize = 4;

/// Synthetic 4-class task on `1x8x8` images: a horizontal, vertical,
/// diagonal or anti-diagonal bar at a random offset and intensity over
/// uniform background noise of amplitude `noise`. Classes cycle so every
/// prefix is balanced.
pub fn synthetic_bars(n: usize, seed: u64, noise: f32) -> Dataset {
    let s = BARS_SIZE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % BARS_CLASSES;
        let mut img = vec![0.0f32; s * s];
        for v in img.iter_mut() {
            *v = rng.gen::<f32>() * noise;
        }
        let intensity = rng.gen_range(0.6f32..=1.0);
        let offset = rng.gen_range(0..s) as isize;
        let shift = rng.gen_range(-2isize..=2);
        let (start, len) = (rng.gen_range(0..2usize), rng.gen_range(s - 2..=s));
        for k in start..(start + len).min(s) {
            let k = k as isize;
            let (y, x) = match class {
                0 => (offset, k),
                1 => (k, offset),
                2 => (k, k + shift),
                _ => (k, s as isize - 1 - k + shift),
            };
            if (0..s as isize).contains(&y) && (0..s as isize).contains(&x) {
                img[y as usize * s + x as usize] = intensity;
            }
        }
        samples.push(Tensor::new(vec![1, s, s], img).expect("sizes"));
        labels.push(class);
    }
    Dataset::new(samples, labels, BARS_CLASSES).expect("valid synthetic data")
}
