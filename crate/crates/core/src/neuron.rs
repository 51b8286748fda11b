//! Integrate-and-fire neurons with soft reset.
//!
//! The multi-level neuron charges its membrane `N` times with the timestep's
//! input current, then discharges through `N` micro-timesteps, emitting one
//! internal binary spike per micro-timestep in which the potential reaches
//! the threshold. Only the summed value `z in [0, N]` leaves the neuron.
//! With `N = 1` the dynamics are exactly the binary IF neuron.
//!
//! Threshold convention: a potential exactly equal to `V_th` fires. The
//! membrane is never clamped from below.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::{register_custom_backward, CustomOp, NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Backward rule substituted for the Heaviside derivative.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackwardKind {
    /// Sigmoid-derivative surrogate with width parameter `alpha`.
    Surrogate { alpha: f32 },
    /// Straight-through: derivative 1 everywhere.
    Ste,
}

impl BackwardKind {
    pub fn derivative(&self, u: f32) -> f32 {
        match *self {
            BackwardKind::Surrogate { alpha } => surrogate_derivative(u, alpha),
            BackwardKind::Ste => ste_derivative(u),
        }
    }
}

/// How the multi-level neuron records itself on the tape.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    /// One Heaviside node per micro-timestep, each with the configured rule.
    #[default]
    PerMicroStep,
    /// A single node per layer: `dz(t)/di(t) = N * rule(H(t) - V_th)`.
    Fused,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlNeuronConfig {
    /// Spike levels `N`.
    pub levels: u32,
    pub v_th: f32,
    pub backward: BackwardKind,
    #[serde(default)]
    pub grad_mode: GradMode,
}

impl MlNeuronConfig {
    pub fn new(levels: u32, v_th: f32, backward: BackwardKind) -> Self {
        MlNeuronConfig {
            levels,
            v_th,
            backward,
            grad_mode: GradMode::PerMicroStep,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("neuron levels N must be >= 1"));
        }
        if !(self.v_th.is_finite() && self.v_th > 0.0) {
            return Err(Error::config(format!("V_th must be positive, got {}", self.v_th)));
        }
        if let BackwardKind::Surrogate { alpha } = self.backward {
            if !(alpha.is_finite() && alpha > 0.0) {
                return Err(Error::config(format!("surrogate alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }
}

/// Membrane potential of a population of neurons.
#[derive(Clone, Debug, PartialEq)]
pub struct IfState {
    pub v: Tensor,
    pub v_th: f32,
}

impl IfState {
    pub fn new(shape: &[usize], v_th: f32) -> Self {
        IfState {
            v: Tensor::zeros(shape),
            v_th,
        }
    }
}

fn check_input(state: &IfState, input: &Tensor) -> Result<()> {
    if state.v.shape() != input.shape() {
        return Err(Error::config(format!(
            "input current {:?} does not match membrane {:?}",
            input.shape(),
            state.v.shape()
        )));
    }
    if !input.is_finite() {
        return Err(Error::numerical("non-finite input current"));
    }
    Ok(())
}

/// One binary IF timestep: `H = V + i`, fire on `H >= V_th`, `V = H - z*V_th`.
pub fn if_step(state: &mut IfState, input: &Tensor) -> Result<Tensor> {
    check_input(state, input)?;
    let v_th = state.v_th;
    let mut z = Tensor::zeros(input.shape());
    for ((v, &i), zo) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(z.data_mut())
    {
        let h = *v + i;
        let spike = if h - v_th >= 0.0 { 1.0 } else { 0.0 };
        *v = h - spike * v_th;
        *zo = spike;
    }
    Ok(z)
}

/// One multi-level timestep: charge `N` times, then discharge through `N`
/// micro-timesteps. Returns `z in [0, N]`.
pub fn ml_step(state: &mut IfState, input: &Tensor, levels: u32) -> Result<Tensor> {
    if levels == 0 {
        return Err(Error::config("neuron levels N must be >= 1"));
    }
    check_input(state, input)?;
    let v_th = state.v_th;
    let charge = levels as f32;
    let mut z = Tensor::zeros(input.shape());
    for ((v, &i), zo) in state
        .v
        .data_mut()
        .iter_mut()
        .zip(input.data())
        .zip(z.data_mut())
    {
        let mut h = *v + charge * i;
        let mut count = 0.0f32;
        for _ in 0..levels {
            let g = if h - v_th >= 0.0 { 1.0 } else { 0.0 };
            h -= v_th * g;
            count += g;
        }
        *v = h;
        *zo = count;
    }
    if !state.v.is_finite() {
        return Err(Error::numerical("membrane potential overflowed"));
    }
    Ok(z)
}

/// Integer spike values of shape `[T, ...]`, each in `[0, levels]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikeTensor {
    shape: Vec<usize>,
    values: Vec<u32>,
    levels: u32,
}

impl SpikeTensor {
    pub fn new(shape: Vec<usize>, values: Vec<u32>, levels: u32) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::config("spike tensor needs a leading time axis"));
        }
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::config(format!(
                "spike shape {:?} does not hold {} values",
                shape,
                values.len()
            )));
        }
        if let Some(&bad) = values.iter().find(|&&z| z > levels) {
            return Err(Error::data(format!("spike value {bad} exceeds N={levels}")));
        }
        Ok(SpikeTensor {
            shape,
            values,
            levels,
        })
    }

    /// Converts a float tensor holding integer spike counts.
    pub fn from_tensor(t: &Tensor, levels: u32) -> Result<Self> {
        let values = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v <= levels as f32 {
                    Ok(v as u32)
                } else {
                    Err(Error::data(format!("{v} is not a spike value in [0, {levels}]")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        SpikeTensor::new(t.shape().to_vec(), values, levels)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn timesteps(&self) -> usize {
        self.shape[0]
    }

    pub fn levels(&self) -> u32 {
        self.levels
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    /// Values of timestep `t`.
    pub fn step(&self, t: usize) -> &[u32] {
        let per = self.values.len() / self.timesteps().max(1);
        &self.values[t * per..(t + 1) * per]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| v as f32).collect(),
        )
        .expect("shape checked at construction")
    }
}

/// Runs `ml_step` over the leading time axis of `input_currents`, starting from `V = 0`.
pub fn ml_forward_sequence(config: &MlNeuronConfig, input_currents: &Tensor) -> Result<SpikeTensor> {
    let per_step = input_currents.shape().get(1..).unwrap_or(&[]).to_vec();
    let mut state = IfState::new(&per_step, config.v_th);
    ml_forward_sequence_with_state(config, &mut state, input_currents)
}

/// Like [`ml_forward_sequence`] but continues from (and updates) `state`.
pub fn ml_forward_sequence_with_state(
    config: &MlNeuronConfig,
    state: &mut IfState,
    input_currents: &Tensor,
) -> Result<SpikeTensor> {
    config.validate()?;
    let shape = input_currents.shape();
    if shape.is_empty() {
        return Err(Error::config("input currents need a leading time axis"));
    }
    let steps = shape[0];
    let mut values = Vec::with_capacity(input_currents.numel());
    for t in 0..steps {
        let frame = input_currents
            .slice_rows(t, t + 1)?
            .reshape(&shape[1..])?;
        let z = ml_step(state, &frame, config.levels)?;
        values.extend(z.data().iter().map(|&v| v as u32));
    }
    SpikeTensor::new(shape.to_vec(), values, config.levels)
}

/// Closed-form decoded output of the multi-level neuron for a constant input:
/// `clamp(floor(N*T*x / V_th), 0, N*T) / (N*T)`.
pub fn quantizer_oracle(x: f64, levels: u32, steps: u32, v_th: f64) -> f64 {
    let nt = levels as f64 * steps as f64;
    let q = (nt * x / v_th).floor().clamp(0.0, nt);
    q / nt
}

/// `alpha * s(alpha*u) * (1 - s(alpha*u))` with `s` the logistic sigmoid.
pub fn surrogate_derivative(u: f32, alpha: f32) -> f32 {
    let a = alpha as f64;
    let e = (-a * (u as f64).abs()).exp();
    (a * e / ((1.0 + e) * (1.0 + e))) as f32
}

pub fn ste_derivative(_u: f32) -> f32 {
    1.0
}

/// Heaviside `Θ(v - V_th)` whose backward applies `rule(v - V_th)`.
pub fn heaviside_op(v_th: f32, rule: BackwardKind) -> CustomOp {
    register_custom_backward(
        "heaviside",
        move |x| Ok(x[0].map(|v| if v - v_th >= 0.0 { 1.0 } else { 0.0 })),
        move |ctx, g| {
            vec![g
                .zip_map(ctx.inputs[0], |g, v| g * rule.derivative(v - v_th))
                .expect("same shape")]
        },
    )
}

fn time_rows(tape: &Tape, x: NodeId, steps: usize) -> Result<usize> {
    let rows = tape.value(x).shape().first().copied().unwrap_or(0);
    if steps == 0 || rows % steps != 0 {
        return Err(Error::config(format!(
            "leading dim {rows} is not a multiple of T={steps}"
        )));
    }
    Ok(rows / steps)
}

/// Records a multi-level neuron over a time-major `[T*B, ...]` current node.
/// Returns a node of the same shape holding `z` for every timestep.
pub fn ml_sequence_on_tape(
    tape: &mut Tape,
    config: &MlNeuronConfig,
    input: NodeId,
    steps: usize,
) -> Result<NodeId> {
    config.validate()?;
    match config.grad_mode {
        GradMode::PerMicroStep => ml_sequence_micro_steps(tape, config, input, steps),
        GradMode::Fused => ml_sequence_fused(tape, config, input, steps),
    }
}

fn ml_sequence_micro_steps(
    tape: &mut Tape,
    config: &MlNeuronConfig,
    input: NodeId,
    steps: usize,
) -> Result<NodeId> {
    let batch = time_rows(tape, input, steps)?;
    let heaviside = heaviside_op(config.v_th, config.backward);
    let mut step_shape = tape.value(input).shape().to_vec();
    step_shape[0] = batch;
    let mut v = tape.leaf(Tensor::zeros(&step_shape));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let i_t = tape.slice_rows(input, t * batch, (t + 1) * batch)?;
        let charge = tape.scale(i_t, config.levels as f32)?;
        let mut h = tape.add(v, charge)?;
        let mut z: Option<NodeId> = None;
        for _ in 0..config.levels {
            let g = heaviside.apply(tape, &[h])?;
            h = tape.sub_scaled(h, g, config.v_th)?;
            z = Some(match z {
                None => g,
                Some(acc) => tape.add(acc, g)?,
            });
        }
        v = h;
        outputs.push(z.expect("levels >= 1"));
    }
    if outputs.len() == 1 {
        Ok(outputs[0])
    } else {
        tape.concat_rows(&outputs)
    }
}

/// Forward dynamics over `[T*B, ...]` rows; returns (z, H after charge).
fn simulate_rows(
    x: &Tensor,
    steps: usize,
    levels: u32,
    v_th: f32,
    charge_scale: f32,
) -> (Vec<f32>, Vec<f32>) {
    let per = x.numel() / steps.max(1);
    let xd = x.data();
    let mut v = vec![0.0f32; per];
    let mut z = vec![0.0f32; xd.len()];
    let mut h_rec = vec![0.0f32; xd.len()];
    for t in 0..steps {
        for j in 0..per {
            let idx = t * per + j;
            let mut h = v[j] + charge_scale * xd[idx];
            h_rec[idx] = h;
            let mut count = 0.0f32;
            for _ in 0..levels {
                let g = if h - v_th >= 0.0 { 1.0 } else { 0.0 };
                h -= v_th * g;
                count += g;
            }
            v[j] = h;
            z[idx] = count;
        }
    }
    (z, h_rec)
}

fn ml_sequence_fused(
    tape: &mut Tape,
    config: &MlNeuronConfig,
    input: NodeId,
    steps: usize,
) -> Result<NodeId> {
    time_rows(tape, input, steps)?;
    let levels = config.levels;
    let (v_th, rule) = (config.v_th, config.backward);
    let x = tape.value(input);
    let (z, h) = simulate_rows(x, steps, levels, v_th, levels as f32);
    let out = Tensor::new(x.shape().to_vec(), z)?;
    tape.push(
        "ml_fused",
        out,
        vec![input],
        Rc::new(move |_, g| {
            let d: Vec<f32> = g
                .data()
                .iter()
                .zip(&h)
                .map(|(&g, &h)| g * levels as f32 * rule.derivative(h - v_th))
                .collect();
            vec![Tensor::new(g.shape().to_vec(), d).expect("sizes")]
        }),
    )
}

/// Neuron placed after a residual summation point.
///
/// Each timestep the summed spikes `S(t)` are integrated once (they already
/// carry spike-value units), then discharged through `N` micro-timesteps.
/// The backward is the per-element rule evaluated at `S - V_th`, so with
/// STE `dO/dS = 1` and with the surrogate `dO/dS = σ'(S - V_th)`.
pub fn post_sum_neuron_on_tape(
    tape: &mut Tape,
    config: &MlNeuronConfig,
    sum: NodeId,
    steps: usize,
) -> Result<NodeId> {
    config.validate()?;
    time_rows(tape, sum, steps)?;
    let (v_th, rule) = (config.v_th, config.backward);
    let s = tape.value(sum);
    let (z, _) = simulate_rows(s, steps, config.levels, v_th, 1.0);
    let out = Tensor::new(s.shape().to_vec(), z)?;
    tape.push(
        "post_sum_neuron",
        out,
        vec![sum],
        Rc::new(move |ctx, g| {
            vec![g
                .zip_map(ctx.inputs[0], |g, s| g * rule.derivative(s - v_th))
                .expect("same shape")]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;

    fn one(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn if_step_hand_simulation() {
        let mut s = IfState::new(&[1], 1.0);
        assert_eq!(if_step(&mut s, &one(0.5)).unwrap().item(), 0.0);
        assert_eq!(s.v.item(), 0.5);
        assert_eq!(if_step(&mut s, &one(0.5)).unwrap().item(), 1.0);
        assert_eq!(s.v.item(), 0.0);
    }

    #[test]
    fn if_step_threshold_equality_fires() {
        let mut s = IfState::new(&[1], 1.0);
        assert_eq!(if_step(&mut s, &one(1.0)).unwrap().item(), 1.0);
        assert_eq!(s.v.item(), 0.0);
    }

    #[test]
    fn if_step_negative_membrane() {
        let mut s = IfState::new(&[1], 1.0);
        assert_eq!(if_step(&mut s, &one(-0.3)).unwrap().item(), 0.0);
        assert_eq!(s.v.item(), -0.3);
    }

    #[test]
    fn if_step_rejects_non_finite() {
        let mut s = IfState::new(&[1], 1.0);
        assert!(matches!(if_step(&mut s, &one(f32::NAN)), Err(Error::Numerical(_))));
        assert!(matches!(ml_step(&mut s, &one(f32::INFINITY), 2), Err(Error::Numerical(_))));
    }

    #[test]
    fn ml_step_examples() {
        let mut s = IfState::new(&[1], 1.0);
        assert_eq!(ml_step(&mut s, &one(0.25), 4).unwrap().item(), 1.0);
        assert_eq!(s.v.item(), 0.0);

        let mut s = IfState::new(&[1], 1.0);
        assert_eq!(ml_step(&mut s, &one(1.0), 4).unwrap().item(), 4.0);
        assert_eq!(s.v.item(), 0.0);

        for n in 1..6 {
            let mut s = IfState::new(&[1], 1.0);
            assert_eq!(ml_step(&mut s, &one(0.0), n).unwrap().item(), 0.0);
        }
    }

    #[test]
    fn sequence_constant_input() {
        let binary = MlNeuronConfig::new(1, 1.0, BackwardKind::Ste);
        let x = Tensor::full(&[10, 1], 0.3);
        let z = ml_forward_sequence(&binary, &x).unwrap();
        // cumulative charge 0.3t crosses 1, 2, 3 at t = 4, 7, 10 (1-based)
        let fired: Vec<usize> = (0..10).filter(|&t| z.step(t)[0] == 1).collect();
        assert_eq!(fired, vec![3, 6, 9]);

        let ml = MlNeuronConfig::new(10, 1.0, BackwardKind::Ste);
        let z = ml_forward_sequence(&ml, &Tensor::full(&[1, 1], 0.3)).unwrap();
        assert_eq!(z.values(), &[3]);
    }

    #[test]
    fn empty_sequence_keeps_state() {
        let cfg = MlNeuronConfig::new(2, 1.0, BackwardKind::Ste);
        let mut s = IfState::new(&[2], 1.0);
        s.v.data_mut().copy_from_slice(&[0.4, -0.2]);
        let z = ml_forward_sequence_with_state(&cfg, &mut s, &Tensor::zeros(&[0, 2])).unwrap();
        assert_eq!(z.timesteps(), 0);
        assert!(z.values().is_empty());
        assert_eq!(s.v.data(), &[0.4, -0.2]);
    }

    #[test]
    fn oracle_examples() {
        assert_eq!(quantizer_oracle(1.0, 4, 2, 1.0), 1.0);
        assert_eq!(quantizer_oracle(0.0, 4, 2, 1.0), 0.0);
        assert_eq!(quantizer_oracle(-3.0, 4, 2, 1.0), 0.0);
        let mut levels: Vec<u64> = (0..=1200)
            .map(|i| (quantizer_oracle(i as f64 * 0.001, 4, 2, 1.0) * 8.0).round() as u64)
            .collect();
        levels.dedup();
        assert_eq!(levels.len(), 9);
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(surrogate_derivative(0.0, 5.0), 1.25);
        assert!(surrogate_derivative(10.0, 5.0) < 1e-9);
        assert!(surrogate_derivative(-10.0, 5.0) < 1e-9);
        assert!(surrogate_derivative(10.0, 5.0) > 0.0);
        for u in [0.1f32, 0.7, 2.5, 4.0] {
            assert_eq!(surrogate_derivative(u, 5.0), surrogate_derivative(-u, 5.0));
            assert!(surrogate_derivative(u, 5.0) < surrogate_derivative(0.0, 5.0));
        }
        for u in [0.0f32, -5.0, 5.0] {
            assert_eq!(ste_derivative(u), 1.0);
        }
    }

    #[test]
    fn heaviside_op_rules() {
        let mut tape = Tape::new();
        let x = tape.leaf(one(2.0));
        let ste = heaviside_op(0.0, BackwardKind::Ste);
        let y = ste.apply(&mut tape, &[x]).unwrap();
        assert_eq!(tape.value(y).item(), 1.0);
        assert_eq!(tape.vjp(y, &one(0.7)).unwrap()[0].item(), 0.7);

        let x = tape.leaf(one(0.0));
        let sg = heaviside_op(0.0, BackwardKind::Surrogate { alpha: 5.0 });
        let y = sg.apply(&mut tape, &[x]).unwrap();
        assert_eq!(tape.vjp(y, &one(1.0)).unwrap()[0].item(), 1.25);
    }

    #[test]
    fn tape_sequence_matches_numeric() {
        let data: Vec<f32> = (0..24).map(|i| ((i * 7) % 11) as f32 * 0.13 - 0.3).collect();
        let x = Tensor::new(vec![3, 8], data).unwrap();
        for mode in [GradMode::PerMicroStep, GradMode::Fused] {
            for levels in [1, 3] {
                let mut cfg = MlNeuronConfig::new(levels, 0.9, BackwardKind::Surrogate { alpha: 5.0 });
                cfg.grad_mode = mode;
                let numeric = ml_forward_sequence(&cfg, &x).unwrap().to_tensor();
                let mut tape = Tape::new();
                let xin = tape.leaf(x.clone());
                let z = ml_sequence_on_tape(&mut tape, &cfg, xin, 3).unwrap();
                assert_eq!(tape.value(z).data(), numeric.data());
            }
        }
    }

    #[test]
    fn micro_step_nodes_recorded() {
        let cfg = MlNeuronConfig::new(4, 1.0, BackwardKind::Surrogate { alpha: 5.0 });
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3], 0.4));
        let z = ml_sequence_on_tape(&mut tape, &cfg, x, 2).unwrap();
        assert_eq!(tape.nodes_named("heaviside").len(), 2 * 4);
        let loss = tape.sum(z).unwrap();
        let mut store = ParamStore::new();
        let grads = tape.backward(loss, &mut store).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|g| g.is_finite()));
    }

    #[test]
    fn post_sum_neuron_ste_is_identity_backward() {
        let cfg = MlNeuronConfig::new(2, 1.0, BackwardKind::Ste);
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::new(vec![2, 2], vec![0.0, 1.0, 3.0, 2.0]).unwrap());
        let o = post_sum_neuron_on_tape(&mut tape, &cfg, s, 2).unwrap();
        // t0: [0,1] -> [0,1]; t1: [3,2] -> [2,2] (V carries 1 and 0)
        assert_eq!(tape.value(o).data(), &[0.0, 1.0, 2.0, 2.0]);
        let up = Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.vjp(o, &up).unwrap()[0], up);
    }

    #[test]
    fn spike_tensor_validation() {
        assert!(SpikeTensor::new(vec![1, 2], vec![0, 3], 2).is_err());
        assert!(SpikeTensor::from_tensor(&Tensor::full(&[1, 1], 0.5), 2).is_err());
        let s = SpikeTensor::new(vec![2, 1], vec![1, 2], 2).unwrap();
        assert_eq!(SpikeTensor::from_tensor(&s.to_tensor(), 2).unwrap(), s);
    }

    #[test]
    fn config_validation() {
        assert!(MlNeuronConfig::new(0, 1.0, BackwardKind::Ste).validate().is_err());
        assert!(MlNeuronConfig::new(1, 0.0, BackwardKind::Ste).validate().is_err());
        assert!(MlNeuronConfig::new(1, 1.0, BackwardKind::Surrogate { alpha: -1.0 })
            .validate()
            .is_err());
    }
}
