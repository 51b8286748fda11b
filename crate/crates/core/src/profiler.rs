//! Spike-activity accounting, the spike-avalanche predictor and the
//! gradient-flow report for residual variants.
//!
//! An event is a nonzero spike entry: a multi-level spike of any value
//! counts once. The sum of spike values is tracked alongside as
//! `weighted_events`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::network::{BlockVariant, Mode, Model, ModelConfig};
use crate::neuron::SpikeTensor;
use crate::training::Batch;

/// Number of nonzero entries (each multi-level spike is one event).
pub fn count_events(z: &SpikeTensor) -> u64 {
    z.values().iter().filter(|&&v| v > 0).count() as u64
}

/// Static description of a spike-emitting layer, fixed at model build time.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmitterInfo {
    pub name: String,
    /// Weighted synapses reached by one emitted event.
    pub fan_out: u64,
    /// Weight-free potential updates per event (spikes fed straight into a neuron).
    pub direct_fan_out: u64,
    /// Output sites per sample.
    pub neuron_count: u64,
    /// Whether the sites are neurons integrating a bias every timestep.
    pub has_bias: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerStats {
    #[serde(flatten)]
    pub info: EmitterInfo,
    /// Events per timestep, summed over the batch.
    pub events: Vec<u64>,
    /// Sum of spike values per timestep.
    pub weighted_events: Vec<u64>,
    pub total: u64,
    /// Count of sites holding value `v` at index `v`, over all timesteps and samples.
    pub histogram: Vec<u64>,
}

impl LayerStats {
    /// Stats of a time-major `[T*B, ...]` tensor of spike values.
    pub fn from_values(info: EmitterInfo, values: &[f32], steps: usize, min_bins: usize) -> Self {
        let per = values.len() / steps.max(1);
        let mut events = vec![0u64; steps];
        let mut weighted = vec![0u64; steps];
        let mut histogram = vec![0u64; min_bins.max(1)];
        for t in 0..steps {
            for &v in &values[t * per..(t + 1) * per] {
                let z = v.max(0.0) as u64;
                if z > 0 {
                    events[t] += 1;
                    weighted[t] += z;
                }
                if z as usize >= histogram.len() {
                    histogram.resize(z as usize + 1, 0);
                }
                histogram[z as usize] += 1;
            }
        }
        LayerStats {
            info,
            total: events.iter().sum(),
            events,
            weighted_events: weighted,
            histogram,
        }
    }

    pub fn name(&self) -> &str {
        &self.info.name
    }

    pub fn weighted_total(&self) -> u64 {
        self.weighted_events.iter().sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputStats {
    /// Nonzero entries of the encoded input, over all timesteps and samples.
    pub events: u64,
    /// Synapses of the first weight layer reached by one input value.
    pub fan_out: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpikeTrace {
    pub layers: Vec<LayerStats>,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "N")]
    pub levels: u32,
    pub batch: usize,
    pub input: InputStats,
    /// Non-firing integrators of the classification head.
    pub readout_neurons: u64,
}

impl SpikeTrace {
    pub fn empty(timesteps: usize, levels: u32) -> Self {
        SpikeTrace {
            layers: Vec::new(),
            timesteps,
            levels,
            batch: 0,
            input: InputStats::default(),
            readout_neurons: 0,
        }
    }

    pub fn layer(&self, name: &str) -> Option<&LayerStats> {
        self.layers.iter().find(|l| l.info.name == name)
    }

    /// Associative merge of traces from separate lanes or batches.
    pub fn merge(&self, other: &SpikeTrace) -> Result<SpikeTrace> {
        if self.timesteps != other.timesteps || self.levels != other.levels {
            return Err(Error::config("cannot merge traces with different T or N"));
        }
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| a.info != b.info)
        {
            return Err(Error::config("cannot merge traces of different models"));
        }
        let add = |a: &[u64], b: &[u64]| -> Vec<u64> {
            let n = a.len().max(b.len());
            (0..n)
                .map(|i| a.get(i).copied().unwrap_or(0) + b.get(i).copied().unwrap_or(0))
                .collect()
        };
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| LayerStats {
                info: a.info.clone(),
                events: add(&a.events, &b.events),
                weighted_events: add(&a.weighted_events, &b.weighted_events),
                total: a.total + b.total,
                histogram: add(&a.histogram, &b.histogram),
            })
            .collect();
        Ok(SpikeTrace {
            layers,
            timesteps: self.timesteps,
            levels: self.levels,
            batch: self.batch + other.batch,
            input: InputStats {
                events: self.input.events + other.input.events,
                fan_out: self.input.fan_out.max(other.input.fan_out),
            },
            readout_neurons: self.readout_neurons.max(other.readout_neurons),
        })
    }

    /// Trace CSV: `layer,timestep,events,weighted_events`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,timestep,events,weighted_events\n");
        for l in &self.layers {
            for (t, (e, w)) in l.events.iter().zip(&l.weighted_events).enumerate() {
                let _ = writeln!(s, "{},{},{},{}", l.info.name, t, e, w);
            }
        }
        s
    }

    pub fn summary(&self) -> TraceSummary {
        TraceSummary {
            layers: self
                .layers
                .iter()
                .map(|l| LayerTotal {
                    name: l.info.name.clone(),
                    events: l.total,
                    weighted_events: l.weighted_total(),
                })
                .collect(),
            total_events: trace_totals(self),
            total_weighted_events: self.layers.iter().map(LayerStats::weighted_total).sum(),
            timesteps: self.timesteps,
            levels: self.levels,
            batch: self.batch,
        }
    }
}

/// Network-wide event total.
pub fn trace_totals(trace: &SpikeTrace) -> u64 {
    trace.layers.iter().map(|l| l.total).sum()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTotal {
    pub name: String,
    pub events: u64,
    pub weighted_events: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceSummary {
    pub layers: Vec<LayerTotal>,
    pub total_events: u64,
    pub total_weighted_events: u64,
    #[serde(rename = "T")]
    pub timesteps: usize,
    #[serde(rename = "N")]
    pub levels: u32,
    pub batch: usize,
}

/// Rebuilds per-layer totals from a trace CSV, preserving layer order.
pub fn summarize_trace_csv(csv: &str, timesteps: usize, levels: u32, batch: usize) -> Result<TraceSummary> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header = lines.next().ok_or_else(|| Error::data("empty trace csv"))?;
    if header.trim() != "layer,timestep,events,weighted_events" {
        return Err(Error::data(format!("unexpected trace header {header:?}")));
    }
    let mut order: Vec<String> = Vec::new();
    let mut acc: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(Error::data(format!("trace row {}: expected 4 fields", n + 1)));
        }
        let parse = |s: &str| -> Result<u64> {
            s.trim()
                .parse()
                .map_err(|_| Error::data(format!("trace row {}: bad number {s:?}", n + 1)))
        };
        parse(f[1])?;
        let (e, w) = (parse(f[2])?, parse(f[3])?);
        let name = f[0].to_string();
        if !acc.contains_key(&name) {
            order.push(name.clone());
        }
        let slot = acc.entry(name).or_default();
        slot.0 += e;
        slot.1 += w;
    }
    let layers: Vec<LayerTotal> = order
        .into_iter()
        .map(|name| {
            let (events, weighted_events) = acc[&name];
            LayerTotal {
                name,
                events,
                weighted_events,
            }
        })
        .collect();
    Ok(TraceSummary {
        total_events: layers.iter().map(|l| l.events).sum(),
        total_weighted_events: layers.iter().map(|l| l.weighted_events).sum(),
        layers,
        timesteps,
        levels,
        batch,
    })
}

/// Predicted event count after `depth` ADD-aggregating residual blocks with
/// event-preserving direct paths and identity shortcuts: `gamma * 2^depth`.
pub fn avalanche_predict(gamma: u64, depth: u32) -> Result<u128> {
    let factor = 1u128
        .checked_shl(depth)
        .filter(|_| depth < 128)
        .ok_or_else(|| Error::numerical(format!("2^{depth} overflows")))?;
    (gamma as u128)
        .checked_mul(factor)
        .ok_or_else(|| Error::numerical(format!("{gamma} * 2^{depth} overflows")))
}

/// L2 norms of the tap gradients of one block for one minibatch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSample {
    pub seed: u64,
    pub batch: usize,
    pub block: usize,
    pub direct: f64,
    pub residual: f64,
    pub output: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockGradStats {
    pub block: usize,
    pub direct_mean: f64,
    pub direct_std: f64,
    pub residual_mean: f64,
    pub residual_std: f64,
    pub output_mean: f64,
    pub output_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradFlowReport {
    pub variant: BlockVariant,
    pub blocks: Vec<BlockGradStats>,
    pub samples: Vec<GradSample>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl GradFlowReport {
    fn from_samples(variant: BlockVariant, samples: Vec<GradSample>) -> Self {
        let n_blocks = samples.iter().map(|s| s.block + 1).max().unwrap_or(0);
        let blocks = (0..n_blocks)
            .map(|b| {
                let of = |f: fn(&GradSample) -> f64| -> Vec<f64> {
                    samples.iter().filter(|s| s.block == b).map(f).collect()
                };
                let (dm, ds) = mean_std(&of(|s| s.direct));
                let (rm, rs) = mean_std(&of(|s| s.residual));
                let (om, os) = mean_std(&of(|s| s.output));
                BlockGradStats {
                    block: b,
                    direct_mean: dm,
                    direct_std: ds,
                    residual_mean: rm,
                    residual_std: rs,
                    output_mean: om,
                    output_std: os,
                }
            })
            .collect();
        GradFlowReport {
            variant,
            blocks,
            samples,
        }
    }

    /// CSV with one row per block: mean/std of the A, R and O gradient norms.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "variant,block,direct_mean,direct_std,residual_mean,residual_std,output_mean,output_std\n",
        );
        for b in &self.blocks {
            let _ = writeln!(
                s,
                "{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                self.variant.as_str(),
                b.block,
                b.direct_mean,
                b.direct_std,
                b.residual_mean,
                b.residual_std,
                b.output_mean,
                b.output_std
            );
        }
        s
    }
}

/// Measures tap-gradient norms of every residual block.
///
/// For each seed a fresh model is built (and handed to `prepare`, e.g. to
/// train it), then every batch is run forward and backward under the
/// cross-entropy loss.
pub fn gradient_flow_report(
    config: &ModelConfig,
    batches: &[Batch],
    seeds: &[u64],
    mut prepare: impl FnMut(&mut Model, u64) -> Result<()>,
) -> Result<GradFlowReport> {
    let mut samples = Vec::new();
    for &seed in seeds {
        let mut model = Model::build(config, seed)?;
        if model.residual_block_count() == 0 {
            return Err(Error::config("gradient flow report needs residual blocks"));
        }
        prepare(&mut model, seed)?;
        for (bi, batch) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch.inputs, Mode::Train)?;
            let loss = tape.cross_entropy(out.logits, &batch.labels)?;
            let grads = tape.backward(loss, &mut model.params)?;
            model.params.zero_grad();
            for (block, taps) in out.taps.iter().enumerate() {
                let norm = |id| grads.get_or_zeros(id, tape.value(id)).l2_norm();
                samples.push(GradSample {
                    seed,
                    batch: bi,
                    block,
                    direct: norm(taps.direct),
                    residual: norm(taps.residual),
                    output: norm(taps.output),
                });
            }
        }
    }
    Ok(GradFlowReport::from_samples(config.variant, samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn info(name: &str) -> EmitterInfo {
        EmitterInfo {
            name: name.into(),
            fan_out: 1,
            direct_fan_out: 0,
            neuron_count: 5,
            has_bias: true,
        }
    }

    #[test]
    fn count_events_examples() {
        assert_eq!(count_events(&SpikeTensor::new(vec![1, 1], vec![3], 4).unwrap()), 1);
        assert_eq!(count_events(&SpikeTensor::new(vec![1, 3], vec![0; 3], 4).unwrap()), 0);
        let mixed = SpikeTensor::new(vec![1, 5], vec![0, 1, 4, 0, 2], 4).unwrap();
        assert_eq!(count_events(&mixed), 3);
    }

    #[test]
    fn avalanche_examples() {
        assert_eq!(avalanche_predict(7, 0).unwrap(), 7);
        assert_eq!(avalanche_predict(7, 1).unwrap(), 14);
        assert_eq!(avalanche_predict(7, 2).unwrap(), 28);
        assert_eq!(avalanche_predict(0, 5).unwrap(), 0);
        assert!(avalanche_predict(u64::MAX, 70).is_err());
        assert!(avalanche_predict(1, 128).is_err());
    }

    #[test]
    fn layer_stats_from_values() {
        // T=2, 3 sites per step
        let s = LayerStats::from_values(info("l"), &[0.0, 2.0, 1.0, 0.0, 0.0, 4.0], 2, 5);
        assert_eq!(s.events, vec![2, 1]);
        assert_eq!(s.weighted_events, vec![3, 4]);
        assert_eq!(s.total, 3);
        assert_eq!(s.histogram, vec![3, 1, 1, 0, 1]);
    }

    #[test]
    fn totals_and_merge() {
        let mut trace = SpikeTrace::empty(1, 1);
        assert_eq!(trace_totals(&trace), 0);
        trace.layers.push(LayerStats::from_values(info("a"), &[1.0; 10], 1, 2));
        trace.layers.push(LayerStats::from_values(info("b"), &[1.0; 20], 1, 2));
        trace.batch = 1;
        assert_eq!(trace_totals(&trace), 30);
        let merged = trace.merge(&trace).unwrap();
        assert_eq!(trace_totals(&merged), 60);
        assert_eq!(merged.batch, 2);
    }

    #[test]
    fn csv_summary_round_trip() {
        let mut trace = SpikeTrace::empty(2, 3);
        trace.layers.push(LayerStats::from_values(info("n0"), &[0.0, 3.0, 1.0, 1.0], 2, 4));
        trace.layers.push(LayerStats::from_values(info("sum0"), &[2.0, 0.0, 0.0, 0.0], 2, 4));
        trace.batch = 1;
        let back = summarize_trace_csv(&trace.to_csv(), 2, 3, 1).unwrap();
        assert_eq!(back, trace.summary());
        assert!(summarize_trace_csv("x,y\n", 1, 1, 1).is_err());
    }
}
