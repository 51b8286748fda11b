//! Shared oracles for the integration tests.
#![allow(dead_code)]

use mlsnn::autograd::{NodeId, ParamStore, Tape};
use mlsnn::network::{BlockVariant, Model, ModelConfig, Topology};
use mlsnn::training::{evaluate, synthetic_bars, train_loop, Dataset, OptimizerConfig, TrainConfig};
use mlsnn::energy::HardwareProfile;
use mlsnn::profiler::{EmitterInfo, InputStats, LayerStats, SpikeTrace};
use mlsnn::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Worst norm-wise relative error between tape gradients and central
/// differences of `sum(w * f(inputs))` for a fixed random projection `w`.
///
/// The projection is evaluated in f64 from the f32 outputs.
pub fn finite_difference_error(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    step: f32,
    f: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
) -> f64 {
    let eval = |xs: &[Tensor]| -> Tensor {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &ids).expect("forward");
        tape.value(out).clone()
    };
    let y0 = eval(inputs);
    let w: Vec<f32> = (0..y0.numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let project = |y: &Tensor| -> f64 {
        y.data()
            .iter()
            .zip(&w)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &ids).expect("forward");
    let wn = tape.leaf(Tensor::new(y0.shape().to_vec(), w.clone()).unwrap());
    let prod = tape.mul(out, wn).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss, &mut ParamStore::new()).expect("backward");

    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], x);
        let mut numeric = vec![0.0f64; x.numel()];
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += step;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= step;
            let h = plus[k].data()[i] as f64 - minus[k].data()[i] as f64;
            numeric[i] = (project(&eval(&plus)) - project(&eval(&minus))) / h;
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| (a as f64 - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let a_scale = analytic.l2_norm();
        let rel = diff / scale.max(a_scale).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

/// Independent sigmoid-derivative surrogate: `alpha * s * (1 - s)`, `s = 1/(1+e^{-alpha u})`.
pub fn sigmoid_surrogate(u: f64, alpha: f64) -> f64 {
    let s = 1.0 / (1.0 + (-alpha * u).exp());
    alpha * s * (1.0 - s)
}

/// The desk-scale classification task: synthetic bars, 128 train / 128 validation.
pub fn desk_task() -> (Dataset, Dataset) {
    synthetic_bars(256, 1, 0.15).split_at(128)
}

/// The desk residual model: resnet-small at width 8 (as in `configs/`).
pub fn resnet_small(variant: BlockVariant, t: usize, n: u32) -> ModelConfig {
    let mut cfg = ModelConfig::new(Topology::ResnetSmall, [1, 8, 8], 4)
        .with_tn(t, n)
        .with_variant(variant);
    cfg.width = 8;
    cfg
}

pub struct TrainedRun {
    pub train_acc: Vec<f64>,
    pub final_val_acc: f64,
    pub final_val_loss: f64,
    pub val_events: u64,
}

/// Adam, lr 1e-2, batch 32, evaluated on the validation split after training.
pub fn train_desk(cfg: &ModelConfig, seed: u64, epochs: usize, stop_at_acc: Option<f64>) -> TrainedRun {
    let (train, val) = desk_task();
    let mut model = Model::build(cfg, seed).unwrap();
    let mut tc = TrainConfig::new(OptimizerConfig::adam(1e-2), epochs);
    tc.seed = seed;
    let mut accs = Vec::new();
    let mut state = None;
    // epoch by epoch so training can stop once the target accuracy is met
    for e in 0..epochs {
        tc.epochs = e + 1;
        let out = train_loop(&mut model, &train, None, &tc, state.take(), |m, _| {
            accs.push(m.train_acc);
            Ok(())
        })
        .unwrap();
        state = Some(out.state);
        if stop_at_acc.is_some_and(|t| accs.last().copied().unwrap_or(0.0) >= t) {
            break;
        }
    }
    let r = evaluate(&mut model, &val, 64).unwrap();
    TrainedRun {
        train_acc: accs,
        final_val_acc: r.accuracy,
        final_val_loss: r.loss,
        val_events: mlsnn::profiler::trace_totals(r.trace.as_ref().unwrap()),
    }
}

/// Like [`finite_difference_error`], but the central differences come from an
/// f64 reference forward `reference`, for ops whose f32 round-off swamps the
/// step (batch statistics). Returns the norm-wise relative error.
pub fn reference_difference_error(
    rng: &mut ChaCha8Rng,
    inputs: &[Tensor],
    step: f64,
    f: &dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
    reference: &dyn Fn(&[Vec<f64>]) -> Vec<f64>,
) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &ids).expect("forward");
    let shape = tape.value(out).shape().to_vec();
    let w: Vec<f32> = (0..tape.value(out).numel()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wn = tape.leaf(Tensor::new(shape, w.clone()).unwrap());
    let prod = tape.mul(out, wn).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss, &mut ParamStore::new()).expect("backward");

    let xs: Vec<Vec<f64>> = inputs.iter().map(|x| x.data().iter().map(|&v| v as f64).collect()).collect();
    let project = |xs: &[Vec<f64>]| -> f64 { reference(xs).iter().zip(&w).map(|(a, &b)| a * b as f64).sum() };
    let mut worst = 0.0f64;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], x);
        let (mut diff, mut scale) = (0.0f64, 0.0f64);
        for i in 0..x.numel() {
            let mut plus = xs.clone();
            plus[k][i] += step;
            let mut minus = xs.clone();
            minus[k][i] -= step;
            let n = (project(&plus) - project(&minus)) / (2.0 * step);
            diff += (analytic.data()[i] as f64 - n).powi(2);
            scale += n * n;
        }
        worst = worst.max(diff.sqrt() / scale.sqrt().max(analytic.l2_norm()).max(1e-6));
    }
    worst
}

/// Training-mode batch normalization over `[B, C, inner]`, in f64.
pub fn batchnorm_reference(x: &[f64], channels: usize, inner: usize, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let outer = x.len() / (channels * inner);
    for c in 0..channels {
        let idx: Vec<usize> = (0..outer).flat_map(|o| (0..inner).map(move |i| (o * channels + c) * inner + i)).collect();
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| x[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (x[i] - mean).powi(2)).sum::<f64>() / m;
        for &i in &idx {
            out[i] = (x[i] - mean) / (var + eps).sqrt() * gamma[c] + beta[c];
        }
    }
    out
}

/// Random but self-consistent trace: weighted events lie in `[events, N * events]`.
pub fn random_trace(r: &mut ChaCha8Rng, levels: u32) -> SpikeTrace {
    let steps = r.gen_range(1..=6);
    let mut trace = SpikeTrace::empty(steps, levels);
    trace.batch = r.gen_range(1..=4);
    trace.readout_neurons = r.gen_range(0..20);
    trace.input = InputStats {
        events: r.gen_range(0..500),
        fan_out: r.gen_range(0..100),
    };
    for l in 0..r.gen_range(0..6) {
        let events: Vec<u64> = (0..steps).map(|_| r.gen_range(0..1000)).collect();
        let weighted: Vec<u64> = events.iter().map(|&e| r.gen_range(e..=e * levels as u64)).collect();
        trace.layers.push(LayerStats {
            info: EmitterInfo {
                name: format!("l{l}"),
                fan_out: r.gen_range(0..300),
                direct_fan_out: r.gen_range(0..2),
                neuron_count: r.gen_range(1..2000),
                has_bias: r.gen_bool(0.5),
            },
            total: events.iter().sum(),
            events,
            weighted_events: weighted,
            histogram: vec![0; levels as usize + 1],
        });
    }
    trace
}

pub fn random_profile(r: &mut ChaCha8Rng) -> HardwareProfile {
    // whole femtojoules so that integer scaling is exact
    let mut fj = || r.gen_range(0..10_000) as f64 * 1e-6;
    HardwareProfile {
        e_read_weight: fj(),
        e_write_pot: fj(),
        e_read_pot: fj(),
        e_read_io: fj(),
        e_write_io: fj(),
        e_read_bias: fj(),
        e_acc: fj(),
        e_mac: fj(),
        e_addr: fj(),
    }
}
