//! Backpropagation-through-time training and evaluation.

mod data;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{synthetic_bars, Batch, Dataset, BARS_CLASSES, BARS_SIZE};
pub use optim::{optimizer_step, OptimizerConfig, OptimizerKind, OptimizerState};

use crate::autograd::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::network::{Mode, Model};
use crate::profiler::{trace_totals, SpikeTrace};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy of `logits[B,K]`.
pub fn cross_entropy_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    tape.cross_entropy(logits, labels)
}

fn default_batch() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Random horizontal flips of training samples.
    #[serde(default)]
    pub hflip: bool,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerConfig, epochs: usize) -> Self {
        TrainConfig {
            optimizer,
            epochs,
            batch_size: default_batch(),
            seed: 0,
            hflip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub seed: u64,
    pub best_val_acc: Option<f64>,
    pub optimizer: OptimizerState,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    epoch: usize,
    seed: u64,
    best_val_acc: Option<f64>,
    step: u64,
    moments: usize,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        TrainState {
            epoch: 0,
            seed,
            best_val_acc: None,
            optimizer: OptimizerState::default(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_dir_atomic(dir, |tmp| {
            for (i, (m, v)) in self.optimizer.m.iter().zip(&self.optimizer.v).enumerate() {
                m.save(&tmp.join(format!("m{i}.mltn")))?;
                v.save(&tmp.join(format!("v{i}.mltn")))?;
            }
            crate::io::write_json_atomic(
                &tmp.join("state.json"),
                &StateFile {
                    epoch: self.epoch,
                    seed: self.seed,
                    best_val_acc: self.best_val_acc,
                    step: self.optimizer.step,
                    moments: self.optimizer.m.len(),
                },
            )
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let f: StateFile = crate::io::read_json(&dir.join("state.json"))?;
        let mut opt = OptimizerState {
            step: f.step,
            ..Default::default()
        };
        for i in 0..f.moments {
            opt.m.push(Tensor::load(&dir.join(format!("m{i}.mltn")))?);
            opt.v.push(Tensor::load(&dir.join(format!("v{i}.mltn")))?);
        }
        Ok(TrainState {
            epoch: f.epoch,
            seed: f.seed,
            best_val_acc: f.best_val_acc,
            optimizer: opt,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's minibatches.
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub val_loss: Option<f64>,
    /// Events emitted during the epoch's training forward passes.
    pub total_events: u64,
}

/// `epoch,loss,train_acc,val_acc,total_events` (empty `val_acc` without validation data).
pub fn metrics_to_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,loss,train_acc,val_acc,total_events\n");
    for r in rows {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.loss, r.train_acc, val, r.total_events);
    }
    s
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
    /// Merged over all batches; `None` for an empty dataset.
    pub trace: Option<SpikeTrace>,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            // first maximum wins ties
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == l
        })
        .count()
}

/// Inference-mode loss, accuracy and spike trace over a dataset.
pub fn evaluate(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<EvalResult> {
    let steps = model.timesteps();
    let (mut loss, mut hits, mut trace) = (0.0f64, 0usize, None::<SpikeTrace>);
    for batch in data.batches(batch_size, steps)? {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch.inputs, Mode::Eval)?;
        let l = tape.cross_entropy(out.logits, &batch.labels)?;
        loss += tape.value(l).item() as f64 * batch.labels.len() as f64;
        hits += correct(tape.value(out.logits), &batch.labels);
        trace = Some(match trace {
            None => out.trace,
            Some(t) => t.merge(&out.trace)?,
        });
    }
    let n = data.len().max(1) as f64;
    Ok(EvalResult {
        loss: loss / n,
        accuracy: hits as f64 / n,
        trace,
    })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Runs one epoch of minibatch updates. Returns (mean loss, accuracy, events).
pub fn train_epoch(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<(f64, f64, u64)> {
    let steps = model.timesteps();
    let epoch = state.epoch;
    let lr = config.optimizer.lr_at(epoch);
    let mut rng = epoch_rng(state.seed, epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let (mut loss_sum, mut hits, mut events, mut batches) = (0.0f64, 0usize, 0u64, 0usize);
    for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
        let flips: Option<Vec<bool>> = config
            .hflip
            .then(|| chunk.iter().map(|_| rng.gen::<bool>()).collect());
        let batch = data.batch(chunk, steps, flips.as_deref())?;
        let mut tape = Tape::new();
        let context = |e: Error| match e {
            Error::Numerical(m) => Error::numerical(format!("epoch {epoch}, batch {bi}: {m}")),
            other => other,
        };
        let out = model
            .forward(&mut tape, &batch.inputs, Mode::Train)
            .map_err(context)?;
        let loss = tape.cross_entropy(out.logits, &batch.labels).map_err(context)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::numerical(format!("epoch {epoch}, batch {bi}: loss is {lv}")));
        }
        model.params.zero_grad();
        tape.backward(loss, &mut model.params).map_err(context)?;
        if let Some((_, p)) = model.params.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::numerical(format!(
                "epoch {epoch}, batch {bi}: non-finite gradient for {}",
                p.name
            )));
        }
        optimizer_step(&mut state.optimizer, &mut model.params, &config.optimizer, lr);
        loss_sum += lv as f64;
        hits += correct(tape.value(out.logits), &batch.labels);
        events += trace_totals(&out.trace);
        batches += 1;
    }
    model.params.zero_grad();
    Ok((
        loss_sum / batches.max(1) as f64,
        hits as f64 / data.len().max(1) as f64,
        events,
    ))
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    /// Parameters at the best validation accuracy (the last epoch without validation data).
    pub best: Option<Model>,
}

/// Trains until `config.epochs` epochs have run in total, resuming from `state`.
///
/// `on_epoch` sees every epoch's metrics and the model after the update.
pub fn train_loop(
    model: &mut Model,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    state: Option<TrainState>,
    mut on_epoch: impl FnMut(&EpochMetrics, &Model) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    let mut state = state.unwrap_or_else(|| TrainState::new(config.seed));
    let mut metrics = Vec::new();
    let mut best = None;
    while state.epoch < config.epochs {
        let (loss, train_acc, total_events) = train_epoch(model, train, config, &mut state)?;
        let (val_acc, val_loss) = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let r = evaluate(model, v, config.batch_size)?;
                (Some(r.accuracy), Some(r.loss))
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch: state.epoch,
            loss,
            train_acc,
            val_acc,
            val_loss,
            total_events,
        };
        state.epoch += 1;
        match val_acc {
            Some(acc) if state.best_val_acc.is_none_or(|b| acc > b) => {
                state.best_val_acc = Some(acc);
                best = Some(model.clone());
            }
            None => best = Some(model.clone()),
            _ => {}
        }
        on_epoch(&m, model)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        state,
        metrics,
        best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ModelConfig, Topology};

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[2, 4]));
        let loss = cross_entropy_loss(&mut tape, l, &[0, 3]).unwrap();
        assert!((tape.value(loss).item() - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(cross_entropy_loss(&mut tape, l, &[0, 4]), Err(Error::Data(_))));
    }

    #[test]
    fn metrics_csv_header() {
        let csv = metrics_to_csv(&[EpochMetrics {
            epoch: 0,
            loss: 1.5,
            train_acc: 0.25,
            val_acc: Some(0.5),
            val_loss: Some(1.0),
            total_events: 7,
        }]);
        assert_eq!(csv, "epoch,loss,train_acc,val_acc,total_events\n0,1.5,0.25,0.5,7\n");
    }

    #[test]
    fn state_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut st = TrainState::new(4);
        st.epoch = 3;
        st.best_val_acc = Some(0.5);
        st.optimizer.step = 9;
        st.optimizer.m.push(Tensor::full(&[2], 0.25));
        st.optimizer.v.push(Tensor::full(&[2], 0.5));
        st.save(&dir.path().join("s")).unwrap();
        assert_eq!(TrainState::load(&dir.path().join("s")).unwrap(), st);
    }

    #[test]
    fn same_batch_twice_gives_same_output() {
        let cfg = ModelConfig::new(Topology::VggSmall, [1, 8, 8], 4).with_tn(2, 2);
        let mut m = Model::build(&cfg, 0).unwrap();
        let data = synthetic_bars(4, 0, 0.1);
        let b = data.batch(&[0, 1, 2, 3], 2, None).unwrap();
        let (a, _) = m.infer(&b.inputs).unwrap();
        let (c, _) = m.infer(&b.inputs).unwrap();
        assert_eq!(a, c);
    }
}
