//! Input encoding, rate decoding and event-camera ingestion.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::SpikeTensor;
use crate::tensor::Tensor;

/// Replicates a static image `[C,H,W]` as a constant input current at each of `T` steps.
pub fn direct_encode(image: &Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("T must be >= 1"));
    }
    let mut shape = vec![steps];
    shape.extend_from_slice(image.shape());
    let mut data = Vec::with_capacity(image.numel() * steps);
    for _ in 0..steps {
        data.extend_from_slice(image.data());
    }
    Tensor::new(shape, data)
}

/// `(1 / (N*T)) * sum_t z(t)`, reducing the leading time axis.
pub fn rate_decode(spikes: &SpikeTensor, levels: u32, steps: usize) -> Tensor {
    let tail = spikes.shape()[1..].to_vec();
    let per: usize = tail.iter().product();
    let mut acc = vec![0u64; per];
    for t in 0..spikes.timesteps() {
        for (a, &z) in acc.iter_mut().zip(spikes.step(t)) {
            *a += z as u64;
        }
    }
    let denom = levels as f64 * steps as f64;
    let data = acc
        .iter()
        .map(|&s| if denom > 0.0 { (s as f64 / denom) as f32 } else { 0.0 })
        .collect();
    Tensor::new(tail, data).expect("shape derived from spikes")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u16,
    pub y: u16,
    /// 0 = OFF, 1 = ON.
    pub p: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u16,
    height: u16,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u16, height: u16) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::data(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p > 1 {
                return Err(Error::data(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && e.t < events[i - 1].t {
                return Err(Error::data(format!("event {i} timestamp goes backwards")));
            }
        }
        Ok(EventStream {
            events,
            width,
            height,
        })
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Parses the `t,x,y,p` CSV format (header required).
    pub fn from_csv(text: &str, width: u16, height: u16) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::data("empty event file"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["t", "x", "y", "p"] {
            return Err(Error::data(format!("expected header t,x,y,p, got {header}")));
        }
        let mut events = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 4 {
                return Err(Error::data(format!("event row {}: expected 4 fields", n + 1)));
            }
            let bad = |what: &str| Error::data(format!("event row {}: bad {what}", n + 1));
            events.push(Event {
                t: f[0].parse().map_err(|_| bad("timestamp"))?,
                x: f[1].parse().map_err(|_| bad("x"))?,
                y: f[2].parse().map_err(|_| bad("y"))?,
                p: f[3].parse().map_err(|_| bad("polarity"))?,
            });
        }
        EventStream::new(events, width, height)
    }

    pub fn load_csv(path: &Path, width: u16, height: u16) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        Self::from_csv(&text, width, height)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,x,y,p\n");
        for e in &self.events {
            let _ = writeln!(s, "{},{},{},{}", e.t, e.x, e.y, e.p);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slicing {
    /// Equal event counts per slice.
    #[default]
    ByCount,
    /// Equal-duration windows over `[first_ts, last_ts]`.
    ByTime,
}

/// Integrates events into `T` frames of shape `[T, 2, H, W]` (channel = polarity).
pub fn events_to_frames(stream: &EventStream, steps: usize, slicing: Slicing) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::config("T must be >= 1"));
    }
    let (h, w) = (stream.height as usize, stream.width as usize);
    let mut frames = Tensor::zeros(&[steps, 2, h, w]);
    let events = stream.events();
    let m = events.len();
    let slice_of: Box<dyn Fn(usize, &Event) -> usize> = match slicing {
        Slicing::ByCount => {
            if m == 0 {
                return Err(Error::data("by_count slicing needs a nonempty stream"));
            }
            // slice j holds indices [floor(j*M/T), floor((j+1)*M/T))
            Box::new(move |idx, _| ((idx + 1) * steps - 1) / m)
        }
        Slicing::ByTime => {
            let first = events.first().map_or(0, |e| e.t);
            let last = events.last().map_or(0, |e| e.t);
            let span = last - first;
            Box::new(move |_, e| {
                if span == 0 {
                    0
                } else {
                    let j = ((e.t - first) as u128 * steps as u128 / span as u128) as usize;
                    j.min(steps - 1)
                }
            })
        }
    };
    let data = frames.data_mut();
    for (idx, e) in events.iter().enumerate() {
        let j = slice_of(idx, e);
        data[((j * 2 + e.p as usize) * h + e.y as usize) * w + e.x as usize] += 1.0;
    }
    Ok(frames)
}

/// Scales each `[2,H,W]` frame so its maximum is 1 (all-zero frames unchanged).
pub fn normalize_frames(frames: &Tensor) -> Tensor {
    let steps = frames.shape()[0];
    let per = frames.numel() / steps.max(1);
    let mut out = frames.clone();
    for chunk in out.data_mut().chunks_mut(per.max(1)) {
        let max = chunk.iter().copied().fold(0.0f32, f32::max);
        if max > 0.0 {
            chunk.iter_mut().for_each(|v| *v /= max);
        }
    }
    out
}
