mod common;

use mlsnn::autograd::Tape;
use mlsnn::network::{Mode, Model, ModelConfig, Topology};
use mlsnn::training::{synthetic_bars, train_loop, Dataset, OptimizerConfig, TrainConfig, TrainState};

fn config() -> ModelConfig {
    ModelConfig::new(Topology::VggSmall, [1, 8, 8], 4).with_tn(2, 2)
}

fn data() -> Dataset {
    synthetic_bars(48, 3, 0.1)
}

fn train(epochs: usize, seed: u64) -> (Model, Vec<f64>) {
    let mut model = Model::build(&config(), seed).unwrap();
    let mut tc = TrainConfig::new(OptimizerConfig::adam(5e-3), epochs);
    tc.batch_size = 16;
    tc.seed = seed;
    let out = train_loop(&mut model, &data(), None, &tc, None, |_, _| Ok(())).unwrap();
    (model, out.metrics.iter().map(|m| m.loss).collect())
}

fn params(m: &Model) -> Vec<u32> {
    m.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn same_seed_same_run() {
    let (a, la) = train(2, 7);
    let (b, lb) = train(2, 7);
    assert_eq!(la, lb);
    assert_eq!(params(&a), params(&b));
}

#[test]
fn resume_is_bit_exact() {
    let (full, lf) = train(4, 1);
    let dir = tempfile::tempdir().unwrap();

    let mut model = Model::build(&config(), 1).unwrap();
    let mut tc = TrainConfig::new(OptimizerConfig::adam(5e-3), 2);
    tc.batch_size = 16;
    tc.seed = 1;
    let first = train_loop(&mut model, &data(), None, &tc, None, |_, _| Ok(())).unwrap();
    model.save(&dir.path().join("model")).unwrap();
    first.state.save(&dir.path().join("state")).unwrap();

    let mut model = Model::load(&dir.path().join("model")).unwrap();
    let state = TrainState::load(&dir.path().join("state")).unwrap();
    tc.epochs = 4;
    let second = train_loop(&mut model, &data(), None, &tc, Some(state), |_, _| Ok(())).unwrap();
    let losses: Vec<f64> = first.metrics.iter().chain(&second.metrics).map(|m| m.loss).collect();
    assert_eq!(losses, lf);
    assert_eq!(params(&model), params(&full));
}

fn train_mode_loss(model: &mut Model, data: &Dataset) -> f32 {
    let b = data.batches(data.len(), model.timesteps()).unwrap().remove(0);
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &b.inputs, Mode::Train).unwrap();
    let loss = tape.cross_entropy(out.logits, &b.labels).unwrap();
    tape.value(loss).item()
}

#[test]
fn small_sgd_step_lowers_loss_on_one_sample() {
    // batch statistics, not running ones, so both losses see the same normalization
    let one = synthetic_bars(1, 2, 0.0);
    let mut model = Model::build(&config(), 4).unwrap();
    let before = train_mode_loss(&mut model, &one);
    let mut tc = TrainConfig::new(OptimizerConfig::sgd(1e-3), 1);
    tc.batch_size = 1;
    train_loop(&mut model, &one, None, &tc, None, |_, _| Ok(())).unwrap();
    let after = train_mode_loss(&mut model, &one);
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn metrics_carry_validation() {
    let (train_set, val) = data().split_at(32);
    let mut model = Model::build(&config(), 0).unwrap();
    let tc = TrainConfig::new(OptimizerConfig::adam(5e-3), 1);
    let out = train_loop(&mut model, &train_set, Some(&val), &tc, None, |_, _| Ok(())).unwrap();
    let m = &out.metrics[0];
    assert!(m.val_acc.is_some() && m.total_events > 0);
    assert!(out.best.is_some());
}

#[test]
fn empty_training_set_is_a_data_error() {
    let (empty, _) = data().split_at(0);
    let mut model = Model::build(&config(), 0).unwrap();
    let tc = TrainConfig::new(OptimizerConfig::adam(5e-3), 1);
    let err = train_loop(&mut model, &empty, None, &tc, None, |_, _| Ok(())).err().unwrap();
    assert!(matches!(err, mlsnn::Error::Data(_)));
}
