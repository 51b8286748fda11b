//! Layers, residual block variants and the model container.
//!
//! Tensors inside the model are time-major: every layer sees all `T`
//! timesteps of a batch stacked as `[T*B, ...]`. Neuron layers walk the
//! timestep slices in order so membrane state carries across time, while
//! weight layers and batch norm process the whole stack at once.

mod config;

use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::{BlockVariant, LayerSpec, ModelConfig, Topology};

use crate::autograd::{conv_out_size, NodeId, ParamId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::neuron::{ml_sequence_on_tape, post_sum_neuron_on_tape, MlNeuronConfig};
use crate::profiler::{EmitterInfo, InputStats, LayerStats, SpikeTrace};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics folded into a per-channel affine map.
    Eval,
}

/// Gradient taps of one residual block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockTaps {
    /// `A`: output of the direct path.
    pub direct: NodeId,
    /// `R`: output of the shortcut.
    pub residual: NodeId,
    /// `S = A + R`.
    pub sum: NodeId,
    /// `O`: block output (equal to `S` when there is no post-sum neuron).
    pub output: NodeId,
}

pub struct ForwardOutput {
    /// `[B, classes]`.
    pub logits: NodeId,
    pub trace: SpikeTrace,
    pub taps: Vec<BlockTaps>,
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    w: ParamId,
    b: Option<ParamId>,
    stride: usize,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Bn {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Clone, Debug)]
struct Shortcut {
    conv: ConvUnit,
    bn: Option<Bn>,
    /// Emitter index; `None` when the shortcut carries currents.
    neuron: Option<usize>,
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    variant: BlockVariant,
    conv1: ConvUnit,
    bn1: Option<Bn>,
    n1: usize,
    conv2: ConvUnit,
    bn2: Option<Bn>,
    /// Direct-path neuron; spiking ResNet blocks sum currents instead.
    a_neuron: Option<usize>,
    shortcut: Option<Shortcut>,
    sum: usize,
}

#[derive(Clone, Debug)]
enum Layer {
    Conv(ConvUnit),
    Linear { w: ParamId, b: Option<ParamId> },
    Pool { kernel: usize, stride: usize },
    Bn(Bn),
    Neuron(usize),
    Block(ResidualBlock),
}

/// Dense cost of one weight layer for the ANN baseline (per sample).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WeightLayerCost {
    pub name: String,
    pub macs: u64,
    pub inputs: u64,
    pub outputs: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn numel(self) -> usize {
        match self {
            Shape::Map(c, h, w) => c * h * w,
            Shape::Flat(f) => f,
        }
    }
}

/// What an emitter's events reach next.
#[derive(Clone, Copy, Debug, Default)]
struct Consumer {
    fan_out: u64,
    direct: u64,
}

fn conv_fan_out(kernel: usize, stride: usize, c_out: usize) -> u64 {
    let reach = kernel.div_ceil(stride) as u64;
    reach * reach * c_out as u64
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    params: ParamStore,
    rng: ChaCha8Rng,
    emitters: Vec<EmitterInfo>,
    /// Emitters whose consumer has not been built yet.
    pending: Vec<usize>,
    input_pending: bool,
    input_fan_out: u64,
    costs: Vec<WeightLayerCost>,
}

impl Builder<'_> {
    fn err(&self, index: usize, kind: &str, msg: impl std::fmt::Display) -> Error {
        Error::config(format!("layer {index} ({kind}): {msg}"))
    }

    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let dist = Uniform::new_inclusive(-bound, bound);
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| dist.sample(rng));
        self.params.add(name, t, true)
    }

    fn conv_unit(
        &mut self,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> ConvUnit {
        let w = self.kaiming(
            format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        );
        let b = bias.then(|| self.params.add(format!("{name}.bias"), Tensor::zeros(&[c_out]), true));
        ConvUnit {
            w,
            b,
            stride,
            padding,
        }
    }

    fn bn(&mut self, name: &str, ch: usize) -> Bn {
        Bn {
            gamma: self.params.add(format!("{name}.gamma"), Tensor::full(&[ch], 1.0), true),
            beta: self.params.add(format!("{name}.beta"), Tensor::zeros(&[ch]), true),
            mean: self.params.add(format!("{name}.running_mean"), Tensor::zeros(&[ch]), false),
            var: self.params.add(format!("{name}.running_var"), Tensor::full(&[ch], 1.0), false),
        }
    }

    fn emitter(&mut self, name: String, shape: Shape, has_bias: bool) -> usize {
        self.emitters.push(EmitterInfo {
            name,
            fan_out: 0,
            direct_fan_out: 0,
            neuron_count: shape.numel() as u64,
            has_bias,
        });
        self.emitters.len() - 1
    }

    /// Hands the consumer to every pending emitter (and the raw input).
    fn consume(&mut self, c: Consumer) {
        for i in self.pending.drain(..) {
            self.emitters[i].fan_out = c.fan_out;
            self.emitters[i].direct_fan_out = c.direct;
        }
        if self.input_pending {
            self.input_fan_out = c.fan_out + c.direct;
            self.input_pending = false;
        }
    }

    fn conv_cost(&mut self, name: &str, c_in: usize, h: usize, w: usize, c_out: usize, k: usize, ho: usize, wo: usize) {
        let outputs = (c_out * ho * wo) as u64;
        self.costs.push(WeightLayerCost {
            name: name.to_string(),
            macs: outputs * (c_in * k * k) as u64,
            inputs: (c_in * h * w) as u64,
            outputs,
        });
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<Layer>,
    pub params: ParamStore,
    emitters: Vec<EmitterInfo>,
    input_fan_out: u64,
    costs: Vec<WeightLayerCost>,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    model: ModelConfig,
    params: Vec<ManifestEntry>,
}

impl Model {
    /// Validates the configuration and initializes parameters from `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let specs = config.resolved_layers();
        if specs.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let mut b = Builder {
            cfg: config,
            params: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            emitters: Vec::new(),
            pending: Vec::new(),
            input_pending: true,
            input_fan_out: 0,
            costs: Vec::new(),
        };
        let [c0, h0, w0] = config.input_shape;
        let mut shape = Shape::Map(c0, h0, w0);
        let mut layers = Vec::with_capacity(specs.len());
        // whether the current pre-activation carries a bias (conv bias or BN shift)
        let mut biased = false;
        let last = specs.len() - 1;
        for (i, spec) in specs.iter().enumerate() {
            let kind = spec.kind();
            match *spec {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    stride,
                    padding,
                    bias,
                } => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(b.err(i, kind, "needs a [C,H,W] input, got a flat vector"));
                    };
                    if out_channels == 0 {
                        return Err(b.err(i, kind, "out_channels must be positive"));
                    }
                    let ho = conv_out_size(h, kernel, stride, padding).map_err(|e| b.err(i, kind, e))?;
                    let wo = conv_out_size(w, kernel, stride, padding).map_err(|e| b.err(i, kind, e))?;
                    b.consume(Consumer {
                        fan_out: conv_fan_out(kernel, stride, out_channels),
                        direct: 0,
                    });
                    let name = format!("layer{i}.conv");
                    let unit = b.conv_unit(&name, c, out_channels, kernel, stride, padding, bias);
                    b.conv_cost(&name, c, h, w, out_channels, kernel, ho, wo);
                    layers.push(Layer::Conv(unit));
                    shape = Shape::Map(out_channels, ho, wo);
                    biased = bias;
                }
                LayerSpec::Linear { out_features, bias } => {
                    let f_in = shape.numel();
                    if out_features == 0 {
                        return Err(b.err(i, kind, "out_features must be positive"));
                    }
                    if i == last && out_features != config.classes {
                        return Err(b.err(
                            i,
                            kind,
                            format!("head has {out_features} outputs for {} classes", config.classes),
                        ));
                    }
                    b.consume(Consumer {
                        fan_out: out_features as u64,
                        direct: 0,
                    });
                    let name = format!("layer{i}.linear");
                    let w = b.kaiming(format!("{name}.weight"), &[f_in, out_features], f_in);
                    let bias_id = bias.then(|| {
                        b.params
                            .add(format!("{name}.bias"), Tensor::zeros(&[out_features]), true)
                    });
                    b.costs.push(WeightLayerCost {
                        name,
                        macs: (f_in * out_features) as u64,
                        inputs: f_in as u64,
                        outputs: out_features as u64,
                    });
                    layers.push(Layer::Linear { w, b: bias_id });
                    shape = Shape::Flat(out_features);
                    biased = bias;
                }
                LayerSpec::Avgpool {
                    kernel,
                    stride,
                    global,
                } => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(b.err(i, kind, "needs a [C,H,W] input"));
                    };
                    let (k, s) = if global {
                        if h != w {
                            return Err(b.err(i, kind, format!("global pool needs a square map, got {h}x{w}")));
                        }
                        (h, h)
                    } else {
                        (kernel, stride.unwrap_or(kernel))
                    };
                    if k > h || k > w {
                        return Err(b.err(i, kind, format!("window {k} larger than {h}x{w}")));
                    }
                    let ho = conv_out_size(h, k, s, 0).map_err(|e| b.err(i, kind, e))?;
                    let wo = conv_out_size(w, k, s, 0).map_err(|e| b.err(i, kind, e))?;
                    layers.push(Layer::Pool { kernel: k, stride: s });
                    shape = Shape::Map(c, ho, wo);
                }
                LayerSpec::Batchnorm => {
                    let ch = match shape {
                        Shape::Map(c, ..) => c,
                        Shape::Flat(f) => f,
                    };
                    let bn = b.bn(&format!("layer{i}.bn"), ch);
                    layers.push(Layer::Bn(bn));
                    biased = true;
                }
                LayerSpec::Neuron => {
                    if i == last {
                        return Err(b.err(i, kind, "the last layer must be the linear readout"));
                    }
                    b.consume(Consumer { fan_out: 0, direct: 1 });
                    let e = b.emitter(format!("neuron{i}"), shape, biased);
                    b.pending.push(e);
                    layers.push(Layer::Neuron(e));
                    biased = false;
                }
                LayerSpec::ResidualBlock {
                    out_channels,
                    stride,
                    variant,
                    batchnorm,
                } => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(b.err(i, kind, "needs a [C,H,W] input"));
                    };
                    let variant = variant.unwrap_or(config.variant);
                    let (block, out) = build_block(&mut b, i, variant, c, h, w, out_channels, stride, batchnorm)?;
                    layers.push(Layer::Block(block));
                    shape = out;
                    biased = false;
                }
            }
        }
        if !matches!(layers.last(), Some(Layer::Linear { .. })) {
            return Err(Error::config(format!(
                "layer {last} ({}): the last layer must be the linear readout",
                specs[last].kind()
            )));
        }
        b.consume(Consumer::default());
        Ok(Model {
            config: config.clone(),
            layers,
            params: b.params,
            emitters: b.emitters,
            input_fan_out: b.input_fan_out,
            costs: b.costs,
            classes: config.classes,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn timesteps(&self) -> usize {
        self.config.timesteps
    }

    pub fn levels(&self) -> u32 {
        self.config.levels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Spike-emitting layers in forward order.
    pub fn emitters(&self) -> &[EmitterInfo] {
        &self.emitters
    }

    pub fn input_fan_out(&self) -> u64 {
        self.input_fan_out
    }

    /// Conv and linear layers with their dense per-sample costs.
    pub fn weight_layers(&self) -> &[WeightLayerCost] {
        &self.costs
    }

    pub fn residual_block_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Block(_))).count()
    }

    /// Trainable scalar count (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    /// Runs all `T` timesteps of `input` (`[T, B, C, H, W]`).
    ///
    /// Membrane potentials start from zero on every call.
    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let steps = self.config.timesteps;
        let [c, h, w] = self.config.input_shape;
        let shape = input.shape();
        if shape.len() != 5 || shape[0] != steps || shape[2..] != [c, h, w] {
            return Err(Error::config(format!(
                "model expects input [T={steps}, B, {c}, {h}, {w}], got {shape:?}"
            )));
        }
        let batch = shape[1];
        if batch == 0 {
            return Err(Error::data("empty batch"));
        }
        if !input.is_finite() {
            return Err(Error::numerical("non-finite input"));
        }
        let input_events = input.data().iter().filter(|&&v| v != 0.0).count() as u64;
        let x0 = tape.leaf(input.clone().reshape(&[steps * batch, c, h, w])?);
        let mut f = Fwd {
            tape,
            params: &mut self.params,
            steps,
            mode,
            neuron: self.config.neuron(),
            alpha: self.config.alpha,
            emitters: &self.emitters,
            stats: Vec::with_capacity(self.emitters.len()),
            taps: Vec::new(),
        };
        let mut x = x0;
        let mut readout = None;
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(u) => f.conv(x, u)?,
                Layer::Linear { w, b } => {
                    let v = f.tape.value(x);
                    let rows = v.shape()[0];
                    let flat = v.numel() / rows;
                    let xf = if v.rank() == 2 { x } else { f.tape.reshape(x, &[rows, flat])? };
                    let wn = f.tape.param(f.params, *w);
                    let bn = b.map(|b| f.tape.param(f.params, b));
                    let y = f.tape.linear(xf, wn, bn)?;
                    readout = Some(y);
                    y
                }
                Layer::Pool { kernel, stride } => f.tape.avgpool2d(x, *kernel, *stride)?,
                Layer::Bn(bn) => f.bn(x, bn)?,
                Layer::Neuron(e) => f.neuron(x, *e)?,
                Layer::Block(block) => f.block(x, block)?,
            };
        }
        let readout = readout.ok_or_else(|| Error::internal("model without readout"))?;
        let logits = f.tape.mean_over_time(readout, steps)?;
        let Fwd { stats, taps, .. } = f;
        let trace = SpikeTrace {
            layers: stats,
            timesteps: steps,
            levels: self.config.levels,
            batch,
            input: InputStats {
                events: input_events,
                fan_out: self.input_fan_out,
            },
            readout_neurons: self.classes as u64,
        };
        Ok(ForwardOutput { logits, trace, taps })
    }

    /// Logits and trace without keeping the tape.
    pub fn infer(&mut self, input: &Tensor) -> Result<(Tensor, SpikeTrace)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, Mode::Eval)?;
        Ok((tape.value(out.logits).clone(), out.trace))
    }

    /// Writes every parameter as a tensor file plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        crate::io::write_dir_atomic(dir, |tmp| {
            let mut entries = Vec::with_capacity(self.params.len());
            for (_, p) in self.params.iter() {
                let file = format!("{}.mltn", p.name);
                p.value.save(&tmp.join(&file))?;
                entries.push(ManifestEntry {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    file,
                });
            }
            crate::io::write_json_atomic(
                &tmp.join("manifest.json"),
                &Manifest {
                    model: self.config.clone(),
                    params: entries,
                },
            )
        })
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let manifest: Manifest = crate::io::read_json(&dir.join("manifest.json"))?;
        let mut model = Model::build(&manifest.model, 0)?;
        if manifest.params.len() != model.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, model needs {}",
                manifest.params.len(),
                model.params.len()
            )));
        }
        for entry in &manifest.params {
            let id = model
                .params
                .find(&entry.name)
                .ok_or_else(|| Error::config(format!("unknown parameter {}", entry.name)))?;
            let t = Tensor::load(&dir.join(&entry.file))?;
            let p = model.params.get_mut(id);
            if t.shape() != p.value.shape() || entry.shape != p.value.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    entry.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(model)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_block(
    b: &mut Builder<'_>,
    i: usize,
    variant: BlockVariant,
    c: usize,
    h: usize,
    w: usize,
    c_out: usize,
    stride: usize,
    batchnorm: bool,
) -> Result<(ResidualBlock, Shape)> {
    let kind = "residual_block";
    if c_out == 0 {
        return Err(b.err(i, kind, "out_channels must be positive"));
    }
    // Downsampling uses even kernels so that even maps halve exactly.
    let (k1, p1, ks) = match stride {
        1 => (3, 1, 1),
        2 => (4, 1, 2),
        s => return Err(b.err(i, kind, format!("stride must be 1 or 2, got {s}"))),
    };
    let ho = conv_out_size(h, k1, stride, p1).map_err(|e| b.err(i, kind, e))?;
    let wo = conv_out_size(w, k1, stride, p1).map_err(|e| b.err(i, kind, e))?;
    let projection = stride != 1 || c != c_out;
    if projection {
        conv_out_size(h, ks, stride, 0).map_err(|e| b.err(i, kind, e))?;
        conv_out_size(w, ks, stride, 0).map_err(|e| b.err(i, kind, e))?;
    }
    let post_rule = variant.post_sum_rule(b.cfg.alpha);
    let mut fan_out = conv_fan_out(k1, stride, c_out);
    let mut direct = 0;
    if projection {
        fan_out += conv_fan_out(ks, stride, c_out);
    } else if post_rule.is_some() {
        direct = 1;
    }
    b.consume(Consumer { fan_out, direct });

    let name = format!("block{i}");
    let out = Shape::Map(c_out, ho, wo);
    let conv1 = b.conv_unit(&format!("{name}.conv1"), c, c_out, k1, stride, p1, !batchnorm);
    b.conv_cost(&format!("{name}.conv1"), c, h, w, c_out, k1, ho, wo);
    let bn1 = batchnorm.then(|| b.bn(&format!("{name}.bn1"), c_out));
    let n1 = b.emitter(format!("{name}.n1"), out, true);
    b.pending.push(n1);
    b.consume(Consumer {
        fan_out: conv_fan_out(3, 1, c_out),
        direct: 0,
    });
    let conv2 = b.conv_unit(&format!("{name}.conv2"), c_out, c_out, 3, 1, 1, !batchnorm);
    b.conv_cost(&format!("{name}.conv2"), c_out, ho, wo, c_out, 3, ho, wo);
    let bn2 = batchnorm.then(|| b.bn(&format!("{name}.bn2"), c_out));
    // events of A and R reach the post-sum neuron weight-free, or nothing for ADD
    let into_sum = Consumer {
        fan_out: 0,
        direct: u64::from(post_rule.is_some()),
    };
    let spiking_paths = variant != BlockVariant::SpikingResnet;
    let a_neuron = spiking_paths.then(|| {
        let e = b.emitter(format!("{name}.a"), out, true);
        b.emitters[e].fan_out = into_sum.fan_out;
        b.emitters[e].direct_fan_out = into_sum.direct;
        e
    });
    let shortcut = if projection {
        let sc_name = format!("{name}.shortcut");
        let conv = b.conv_unit(&sc_name, c, c_out, ks, stride, 0, !batchnorm);
        b.conv_cost(&sc_name, c, h, w, c_out, ks, ho, wo);
        let bn = batchnorm.then(|| b.bn(&format!("{name}.shortcut_bn"), c_out));
        let neuron = spiking_paths.then(|| {
            let e = b.emitter(format!("{name}.res"), out, true);
            b.emitters[e].fan_out = into_sum.fan_out;
            b.emitters[e].direct_fan_out = into_sum.direct;
            e
        });
        Some(Shortcut { conv, bn, neuron })
    } else {
        None
    };
    let sum = b.emitter(format!("{name}.sum"), out, false);
    b.pending.push(sum);
    Ok((
        ResidualBlock {
            variant,
            conv1,
            bn1,
            n1,
            conv2,
            bn2,
            a_neuron,
            shortcut,
            sum,
        },
        out,
    ))
}

struct Fwd<'a> {
    tape: &'a mut Tape,
    params: &'a mut ParamStore,
    steps: usize,
    mode: Mode,
    neuron: MlNeuronConfig,
    alpha: f32,
    emitters: &'a [EmitterInfo],
    stats: Vec<LayerStats>,
    taps: Vec<BlockTaps>,
}

impl Fwd<'_> {
    fn bins(&self) -> usize {
        self.neuron.levels as usize + 1
    }

    fn conv(&mut self, x: NodeId, u: &ConvUnit) -> Result<NodeId> {
        let w = self.tape.param(self.params, u.w);
        let b = u.b.map(|b| self.tape.param(self.params, b));
        self.tape.conv2d(x, w, b, u.stride, u.padding)
    }

    fn bn(&mut self, x: NodeId, bn: &Bn) -> Result<NodeId> {
        match self.mode {
            Mode::Train => {
                let gamma = self.tape.param(self.params, bn.gamma);
                let beta = self.tape.param(self.params, bn.beta);
                let (y, mean, var) = self.tape.batchnorm_train(x, gamma, beta, BN_EPS)?;
                let v = self.tape.value(x);
                let n = (v.numel() / mean.len().max(1)) as f32;
                let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                let rm = self.params.get_mut(bn.mean).value.data_mut();
                for (r, m) in rm.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                }
                let rv = self.params.get_mut(bn.var).value.data_mut();
                for (r, s) in rv.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * s * unbias;
                }
                Ok(y)
            }
            Mode::Eval => {
                let g = self.params.get(bn.gamma).value.data();
                let be = self.params.get(bn.beta).value.data();
                let m = self.params.get(bn.mean).value.data();
                let v = self.params.get(bn.var).value.data();
                let scale: Vec<f32> = g.iter().zip(v).map(|(g, v)| g / (v + BN_EPS).sqrt()).collect();
                let shift: Vec<f32> = be
                    .iter()
                    .zip(m)
                    .zip(&scale)
                    .map(|((b, m), s)| b - m * s)
                    .collect();
                self.tape.channel_affine(x, &scale, &shift)
            }
        }
    }

    fn record(&mut self, emitter: usize, values: &[f32]) {
        let bins = self.bins();
        self.stats.push(LayerStats::from_values(
            self.emitters[emitter].clone(),
            values,
            self.steps,
            bins,
        ));
    }

    fn neuron(&mut self, x: NodeId, emitter: usize) -> Result<NodeId> {
        let z = ml_sequence_on_tape(self.tape, &self.neuron, x, self.steps)?;
        let values = self.tape.value(z).data().to_vec();
        self.record(emitter, &values);
        Ok(z)
    }

    fn block(&mut self, x: NodeId, blk: &ResidualBlock) -> Result<NodeId> {
        let mut d = self.conv(x, &blk.conv1)?;
        if let Some(bn) = &blk.bn1 {
            d = self.bn(d, bn)?;
        }
        let z1 = self.neuron(d, blk.n1)?;
        let mut d = self.conv(z1, &blk.conv2)?;
        if let Some(bn) = &blk.bn2 {
            d = self.bn(d, bn)?;
        }
        let a = match blk.a_neuron {
            Some(e) => self.neuron(d, e)?,
            None => d,
        };
        let r = match &blk.shortcut {
            None => x,
            Some(sc) => {
                let mut r = self.conv(x, &sc.conv)?;
                if let Some(bn) = &sc.bn {
                    r = self.bn(r, bn)?;
                }
                match sc.neuron {
                    Some(e) => self.neuron(r, e)?,
                    None => r,
                }
            }
        };
        // explicit tap nodes so each receives gradient only through the sum
        let a = self.tape.identity(a)?;
        let r = self.tape.identity(r)?;
        let s = self.tape.add(a, r)?;
        let o = match blk.variant.post_sum_rule(self.alpha) {
            None => {
                // ADD: every event of A and of R travels on
                let bins = self.bins();
                let info = self.emitters[blk.sum].clone();
                let sa = LayerStats::from_values(info.clone(), self.tape.value(a).data(), self.steps, bins);
                let sr = LayerStats::from_values(info.clone(), self.tape.value(r).data(), self.steps, bins);
                let ss = LayerStats::from_values(info, self.tape.value(s).data(), self.steps, bins);
                self.stats.push(sum_stats(sa, sr, ss.histogram));
                s
            }
            Some(rule) => {
                let cfg = MlNeuronConfig {
                    backward: rule,
                    ..self.neuron
                };
                let o = post_sum_neuron_on_tape(self.tape, &cfg, s, self.steps)?;
                let values = self.tape.value(o).data().to_vec();
                self.record(blk.sum, &values);
                o
            }
        };
        self.taps.push(BlockTaps {
            direct: a,
            residual: r,
            sum: s,
            output: o,
        });
        Ok(o)
    }
}

fn sum_stats(a: LayerStats, b: LayerStats, histogram: Vec<u64>) -> LayerStats {
    let add = |x: &[u64], y: &[u64]| -> Vec<u64> {
        (0..x.len().max(y.len()))
            .map(|i| x.get(i).copied().unwrap_or(0) + y.get(i).copied().unwrap_or(0))
            .collect()
    };
    // sites are counted once, so the histogram is that of the summed map
    LayerStats {
        events: add(&a.events, &b.events),
        weighted_events: add(&a.weighted_events, &b.weighted_events),
        total: a.total + b.total,
        histogram,
        info: a.info,
    }
}
