//! Event-driven energy estimation.
//!
//! Every emitted event reaches `fan_out` weighted synapses, each costing one
//! weight read, one membrane read/write pair and `N` accumulations (the
//! worst case of a multi-level spike). Events fed straight into a neuron
//! skip the weight read. Energies accumulate as integer attojoules so the
//! components add up to the total exactly; reports are in nJ.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, WeightLayerCost};
use crate::profiler::SpikeTrace;

/// Per-operation energies in nJ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub e_read_weight: f64,
    pub e_write_pot: f64,
    pub e_read_pot: f64,
    pub e_read_io: f64,
    pub e_write_io: f64,
    pub e_read_bias: f64,
    pub e_acc: f64,
    pub e_mac: f64,
    pub e_addr: f64,
}

impl Default for HardwareProfile {
    /// Illustrative constants: memory reads cost about 50x an accumulate.
    fn default() -> Self {
        HardwareProfile {
            e_read_weight: 5e-3,
            e_write_pot: 5e-3,
            e_read_pot: 5e-3,
            e_read_io: 5e-3,
            e_write_io: 5e-3,
            e_read_bias: 5e-3,
            e_acc: 1e-4,
            e_mac: 4e-4,
            e_addr: 1e-4,
        }
    }
}

const AJ_PER_NJ: f64 = 1e9;

/// Profile constants in attojoules.
#[derive(Clone, Copy, Debug)]
struct Fixed {
    read_weight: u128,
    write_pot: u128,
    read_pot: u128,
    read_io: u128,
    write_io: u128,
    read_bias: u128,
    acc: u128,
    mac: u128,
    addr: u128,
}

impl HardwareProfile {
    pub fn load(path: &Path) -> Result<Self> {
        let p: HardwareProfile = crate::io::read_json(path)?;
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.fields() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!("{name} must be a non-negative number, got {v}")));
            }
            if v * AJ_PER_NJ > 1e18 {
                return Err(Error::config(format!("{name} = {v} nJ is out of range")));
            }
        }
        Ok(())
    }

    fn fields(&self) -> [(&'static str, f64); 9] {
        [
            ("e_read_weight", self.e_read_weight),
            ("e_write_pot", self.e_write_pot),
            ("e_read_pot", self.e_read_pot),
            ("e_read_io", self.e_read_io),
            ("e_write_io", self.e_write_io),
            ("e_read_bias", self.e_read_bias),
            ("e_acc", self.e_acc),
            ("e_mac", self.e_mac),
            ("e_addr", self.e_addr),
        ]
    }

    /// Every constant multiplied by `c`.
    pub fn scaled(&self, c: f64) -> HardwareProfile {
        HardwareProfile {
            e_read_weight: self.e_read_weight * c,
            e_write_pot: self.e_write_pot * c,
            e_read_pot: self.e_read_pot * c,
            e_read_io: self.e_read_io * c,
            e_write_io: self.e_write_io * c,
            e_read_bias: self.e_read_bias * c,
            e_acc: self.e_acc * c,
            e_mac: self.e_mac * c,
            e_addr: self.e_addr * c,
        }
    }

    fn fixed(&self) -> Result<Fixed> {
        self.validate()?;
        let aj = |v: f64| (v * AJ_PER_NJ).round() as u128;
        Ok(Fixed {
            read_weight: aj(self.e_read_weight),
            write_pot: aj(self.e_write_pot),
            read_pot: aj(self.e_read_pot),
            read_io: aj(self.e_read_io),
            write_io: aj(self.e_write_io),
            read_bias: aj(self.e_read_bias),
            acc: aj(self.e_acc),
            mac: aj(self.e_mac),
            addr: aj(self.e_addr),
        })
    }
}

/// Itemized energy in attojoules; `*_nj` accessors convert.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub potentials: u128,
    pub weights: u128,
    pub bias: u128,
    pub io: u128,
    pub synaptic: u128,
    pub addressing: u128,
    pub total: u128,
}

pub const ROW_NAMES: [&str; 7] = [
    "Potentials",
    "Weights",
    "Bias",
    "In/Out",
    "Synaptic Operations",
    "Addressing",
    "Total",
];

impl EnergyBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.potentials + self.weights + self.bias + self.io + self.synaptic + self.addressing;
        self
    }

    /// The same workload run `n` times: every per-inference term scales by
    /// `n`, the bias stays counted once per run.
    pub fn repeated(&self, n: u64) -> EnergyBreakdown {
        let n = n as u128;
        EnergyBreakdown {
            potentials: self.potentials * n,
            weights: self.weights * n,
            bias: self.bias,
            io: self.io * n,
            synaptic: self.synaptic * n,
            addressing: self.addressing * n,
            total: 0,
        }
        .finish()
    }

    /// Components in report order, ending with the total (attojoules).
    pub fn rows(&self) -> [u128; 7] {
        [
            self.potentials,
            self.weights,
            self.bias,
            self.io,
            self.synaptic,
            self.addressing,
            self.total,
        ]
    }

    pub fn to_nj(aj: u128) -> f64 {
        aj as f64 / AJ_PER_NJ
    }

    pub fn total_nj(&self) -> f64 {
        Self::to_nj(self.total)
    }

    pub fn report(&self) -> EnergyReport {
        let r = self.rows();
        EnergyReport {
            potentials_nj: Self::to_nj(r[0]),
            weights_nj: Self::to_nj(r[1]),
            bias_nj: Self::to_nj(r[2]),
            io_nj: Self::to_nj(r[3]),
            synaptic_nj: Self::to_nj(r[4]),
            addressing_nj: Self::to_nj(r[5]),
            total_nj: Self::to_nj(r[6]),
            attojoules: *self,
        }
    }
}

/// Serialized form: nJ values plus the exact integer breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub potentials_nj: f64,
    pub weights_nj: f64,
    pub bias_nj: f64,
    pub io_nj: f64,
    pub synaptic_nj: f64,
    pub addressing_nj: f64,
    pub total_nj: f64,
    pub attojoules: EnergyBreakdown,
}

/// CSV with one row per component; columns are the named breakdowns (nJ).
pub fn breakdowns_to_csv(columns: &[(&str, &EnergyBreakdown)]) -> String {
    let mut s = String::from("component");
    for (name, _) in columns {
        let _ = write!(s, ",{name}");
    }
    s.push('\n');
    for (i, row) in ROW_NAMES.iter().enumerate() {
        s.push_str(row);
        for (_, b) in columns {
            let _ = write!(s, ",{}", EnergyBreakdown::to_nj(b.rows()[i]));
        }
        s.push('\n');
    }
    s
}

/// How synaptic accumulations of multi-level events are charged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynapticMode {
    /// `N` accumulations per event whatever its value.
    #[default]
    WorstCase,
    /// One accumulation per unit of spike value (`sum z`).
    Exact,
}

/// Energy of a trace, using the fan-outs recorded in it.
pub fn estimate_trace_energy(
    trace: &SpikeTrace,
    profile: &HardwareProfile,
    mode: SynapticMode,
) -> Result<EnergyBreakdown> {
    let e = profile.fixed()?;
    let n = trace.levels.max(1) as u128;
    let t = trace.timesteps as u128;
    let mut b = EnergyBreakdown::default();

    // nonzero input values enter the first layer under the same per-event contract
    let in_events = trace.input.events as u128;
    let in_syn = in_events * trace.input.fan_out as u128;
    b.weights += in_syn * e.read_weight;
    b.potentials += in_syn * (e.read_pot + e.write_pot);
    b.synaptic += in_syn * n * e.acc;
    b.io += in_events * e.read_io;

    for l in &trace.layers {
        let events = l.total as u128;
        let units = match mode {
            SynapticMode::WorstCase => events * n,
            SynapticMode::Exact => l.weighted_total() as u128,
        };
        let reach = (l.info.fan_out + l.info.direct_fan_out) as u128;
        b.weights += events * l.info.fan_out as u128 * e.read_weight;
        b.potentials += events * reach * (e.read_pot + e.write_pot);
        b.synaptic += units * reach * e.acc;
        b.io += events * (e.write_io + e.read_io);
        b.addressing += events * e.addr;
    }
    b.bias = bias_term(trace, &e, t);
    Ok(b.finish())
}

fn bias_term(trace: &SpikeTrace, e: &Fixed, t: u128) -> u128 {
    let sites: u128 = trace
        .layers
        .iter()
        .filter(|l| l.info.has_bias)
        .map(|l| l.info.neuron_count as u128)
        .sum::<u128>()
        + trace.readout_neurons as u128;
    sites * t * (e.read_bias + e.acc)
}

/// Energy of a trace produced by `model`, checked for consistency with it.
pub fn estimate_snn_energy(
    trace: &SpikeTrace,
    model: &Model,
    profile: &HardwareProfile,
    mode: SynapticMode,
) -> Result<EnergyBreakdown> {
    if trace.timesteps != model.timesteps() || trace.levels != model.levels() {
        return Err(Error::config(format!(
            "trace has T={}, N={} but model has T={}, N={}",
            trace.timesteps,
            trace.levels,
            model.timesteps(),
            model.levels()
        )));
    }
    let emitters = model.emitters();
    if trace.layers.len() != emitters.len()
        || trace.layers.iter().zip(emitters).any(|(l, e)| &l.info != e)
    {
        return Err(Error::config("trace layers do not match the model's spiking layers"));
    }
    estimate_trace_energy(trace, profile, mode)
}

/// Dense accounting of the same topology run as a non-spiking network (T = 1).
pub fn estimate_ann_energy(model: &Model, profile: &HardwareProfile) -> Result<EnergyBreakdown> {
    let sites = model
        .emitters()
        .iter()
        .filter(|l| l.has_bias)
        .map(|l| l.neuron_count)
        .sum::<u64>()
        + model.classes() as u64;
    estimate_dense_energy(model.weight_layers(), sites, profile)
}

/// Dense accounting over explicit layer costs; `bias_sites` neurons add a bias once.
pub fn estimate_dense_energy(
    layers: &[WeightLayerCost],
    bias_sites: u64,
    profile: &HardwareProfile,
) -> Result<EnergyBreakdown> {
    let e = profile.fixed()?;
    let mut b = EnergyBreakdown::default();
    for l in layers {
        let macs = l.macs as u128;
        b.weights += macs * e.read_weight;
        b.synaptic += macs * e.mac;
        b.io += l.inputs as u128 * e.read_io + l.outputs as u128 * e.write_io;
    }
    b.bias = bias_sites as u128 * (e.read_bias + e.acc);
    Ok(b.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyComparison {
    pub total: f64,
    pub potentials: Option<f64>,
    pub weights: Option<f64>,
    pub bias: Option<f64>,
    pub io: Option<f64>,
    pub synaptic: Option<f64>,
    pub addressing: Option<f64>,
}

/// `a / b` for the totals and, where `b` is nonzero, for each component.
pub fn compare_energy(a: &EnergyBreakdown, b: &EnergyBreakdown) -> Result<EnergyComparison> {
    if b.total == 0 {
        return Err(Error::data("reference energy is zero"));
    }
    let ratio = |x: u128, y: u128| (y != 0).then(|| x as f64 / y as f64);
    Ok(EnergyComparison {
        total: a.total as f64 / b.total as f64,
        potentials: ratio(a.potentials, b.potentials),
        weights: ratio(a.weights, b.weights),
        bias: ratio(a.bias, b.bias),
        io: ratio(a.io, b.io),
        synaptic: ratio(a.synaptic, b.synaptic),
        addressing: ratio(a.addressing, b.addressing),
    })
}
