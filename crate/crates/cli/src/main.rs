//! `mlsnn`: train, evaluate, profile and cost multi-level spiking networks.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlsnn::coding::rate_decode;
use mlsnn::energy::{
    breakdowns_to_csv, compare_energy, estimate_ann_energy, estimate_snn_energy, estimate_trace_energy,
    EnergyBreakdown, EnergyComparison, EnergyReport, HardwareProfile, SynapticMode,
};
use mlsnn::io::{write_atomic, write_json_atomic};
use mlsnn::network::{BlockVariant, Model};
use mlsnn::neuron::{ml_forward_sequence, BackwardKind, MlNeuronConfig};
use mlsnn::profiler::{avalanche_predict, gradient_flow_report, trace_totals, GradFlowReport, SpikeTrace};
use mlsnn::training::{evaluate, metrics_to_csv, train_loop, Dataset, EpochMetrics, TrainState};
use mlsnn::{Error, Result, Tensor};
use serde::Serialize;

use config::Experiment;

#[derive(Parser)]
#[command(name = "mlsnn", version, about = "Multi-level spiking neural networks")]
struct Cli {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.csv, checkpoint/, best/ and state/.
    Train {
        /// Continue from `<out>/checkpoint` and `<out>/state`.
        #[arg(long)]
        resume: bool,
    },
    /// Loss and accuracy of a checkpoint on a split.
    Eval(SplitArgs),
    /// Staircase of the constant-input quantizer.
    Quantscan {
        #[arg(long, default_value_t = 1.0)]
        v_th: f32,
        #[arg(long = "levels", short = 'n', default_value_t = 4)]
        levels: u32,
        #[arg(long = "timesteps", short = 't', default_value_t = 2)]
        timesteps: usize,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        from: f32,
        #[arg(long, default_value_t = 1.2, allow_hyphen_values = true)]
        to: f32,
        /// Number of sweep points.
        #[arg(long, default_value_t = 500)]
        steps: usize,
    },
    /// Per-layer spike activity of a checkpoint on a split.
    Profile(SplitArgs),
    /// Energy breakdown from a trace, or from a checkpoint run on a split.
    Energy {
        /// `trace.json` written by `profile`.
        #[arg(long, conflicts_with = "checkpoint")]
        trace: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Split::Val)]
        split: Split,
        /// Hardware profile JSON (nJ per operation); built-in defaults otherwise.
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Add the matched non-spiking network and the SNN/ANN ratio.
        #[arg(long)]
        ann_baseline: bool,
        /// Second `trace.json` (e.g. a binary network) to compare against.
        #[arg(long)]
        baseline_trace: Option<PathBuf>,
        /// Charge the actual spike values instead of N per event.
        #[arg(long)]
        exact: bool,
    },
    /// Tap-gradient norms of every residual block for several variants.
    Gradflow {
        /// Minibatches per seed.
        #[arg(long, default_value_t = 4)]
        batches: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', value_enum, default_values_t = [VariantArg::Sew, VariantArg::Sparse, VariantArg::SparseNoSte])]
        variants: Vec<VariantArg>,
        /// Train each model this many epochs before measuring.
        #[arg(long, default_value_t = 0)]
        train_epochs: usize,
    },
    /// Predicted events per depth of a chain of identity SEW blocks.
    Avalanche {
        #[arg(long)]
        gamma: u64,
        #[arg(long)]
        depth: u32,
    },
}

#[derive(Args)]
struct SplitArgs {
    /// Checkpoint directory (default `<out>/checkpoint`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    split: Split,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    /// Falls back to the whole dataset when no validation samples are held out.
    Val,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    SpikingResnet,
    Sew,
    Sparse,
    SparseNoSte,
}

impl From<VariantArg> for BlockVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SpikingResnet => BlockVariant::SpikingResnet,
            VariantArg::Sew => BlockVariant::Sew,
            VariantArg::Sparse => BlockVariant::Sparse,
            VariantArg::SparseNoSte => BlockVariant::SparseNoSte,
        }
    }
}

fn experiment(cli: &Cli) -> Result<Experiment> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("this command needs --config"))?;
    Experiment::load(path, cli.seed, cli.out.as_deref())
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("out"))
}

fn select(exp: &Experiment, split: Split) -> Result<Dataset> {
    let (train, val) = exp.datasets()?;
    Ok(match split {
        Split::Train => train,
        Split::Val if !val.is_empty() => val,
        Split::Val | Split::All => {
            let mut samples = train.samples().to_vec();
            samples.extend_from_slice(val.samples());
            let mut labels = train.labels().to_vec();
            labels.extend_from_slice(val.labels());
            Dataset::new(samples, labels, train.classes())?
        }
    })
}

fn load_checkpoint(exp: &Experiment, path: Option<&Path>) -> Result<Model> {
    let dir = path.map(Path::to_path_buf).unwrap_or_else(|| exp.out("checkpoint"));
    let model = Model::load(&dir).map_err(|e| match e {
        Error::Io(io) => Error::data(format!("checkpoint {}: {io}", dir.display())),
        other => other,
    })?;
    let (m, c) = (model.config(), &exp.model);
    if m.input_shape != c.input_shape || m.classes != c.classes {
        return Err(Error::config(format!(
            "checkpoint expects {:?} inputs and {} classes, config has {:?} and {}",
            m.input_shape, m.classes, c.input_shape, c.classes
        )));
    }
    Ok(model)
}

fn cmd_train(cli: &Cli, resume: bool) -> Result<()> {
    let exp = experiment(cli)?;
    let (train, val) = exp.datasets()?;
    let tc = exp.train_config();
    let (mut model, state, mut history) = if resume {
        let model = load_checkpoint(&exp, None)?;
        let state = TrainState::load(&exp.out("state"))?;
        let history = read_metrics(&exp.out("metrics.csv"))?;
        (model, Some(state), history)
    } else {
        (Model::build(&exp.model, exp.config.seed)?, None, Vec::new())
    };
    std::fs::create_dir_all(&exp.config.out_dir)?;
    let metrics_path = exp.out("metrics.csv");
    let outcome = train_loop(&mut model, &train, Some(&val), &tc, state, |m, _| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  train {:.3}  val {}  events {}",
            m.epoch,
            m.loss,
            m.train_acc,
            m.val_acc.map_or("-".into(), |a| format!("{a:.3}")),
            m.total_events
        );
        history.push(m.clone());
        write_atomic(&metrics_path, metrics_to_csv(&history).as_bytes())
    })?;
    model.save(&exp.out("checkpoint"))?;
    if let Some(best) = &outcome.best {
        best.save(&exp.out("best"))?;
    }
    outcome.state.save(&exp.out("state"))?;
    println!("{}", metrics_path.display());
    Ok(())
}

/// Re-reads a metrics CSV written by an earlier run (for `--resume`).
fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let bad = |n: usize| Error::data(format!("{}: malformed row {n}", path.display()));
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(n + 1));
            }
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad(n + 1))?,
                loss: f[1].parse().map_err(|_| bad(n + 1))?,
                train_acc: f[2].parse().map_err(|_| bad(n + 1))?,
                val_acc: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad(n + 1))?) },
                val_loss: None,
                total_events: f[4].parse().map_err(|_| bad(n + 1))?,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct EvalReport {
    samples: usize,
    loss: f64,
    accuracy: f64,
    total_events: u64,
}

fn run_split(cli: &Cli, args: &SplitArgs) -> Result<(Experiment, EvalReport, SpikeTrace)> {
    let exp = experiment(cli)?;
    let data = select(&exp, args.split)?;
    if data.is_empty() {
        return Err(Error::data("selected split is empty"));
    }
    let mut model = load_checkpoint(&exp, args.checkpoint.as_deref())?;
    let r = evaluate(&mut model, &data, exp.config.batch_size)?;
    let trace = r.trace.ok_or_else(|| Error::internal("evaluation produced no trace"))?;
    let report = EvalReport {
        samples: data.len(),
        loss: r.loss,
        accuracy: r.accuracy,
        total_events: trace_totals(&trace),
    };
    Ok((exp, report, trace))
}

fn cmd_eval(cli: &Cli, args: &SplitArgs) -> Result<()> {
    let (exp, report, _) = run_split(cli, args)?;
    write_json_atomic(&exp.out("eval.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_profile(cli: &Cli, args: &SplitArgs) -> Result<()> {
    let (exp, _, trace) = run_split(cli, args)?;
    write_atomic(&exp.out("trace.csv"), trace.to_csv().as_bytes())?;
    write_json_atomic(&exp.out("trace.json"), &trace)?;
    let summary = trace.summary();
    write_json_atomic(&exp.out("summary.json"), &summary)?;
    for l in &summary.layers {
        println!("{:<16} {:>12} {:>12}", l.name, l.events, l.weighted_events);
    }
    println!("{:<16} {:>12} {:>12}", "total", summary.total_events, summary.total_weighted_events);
    Ok(())
}

fn cmd_quantscan(cli: &Cli, v_th: f32, levels: u32, timesteps: usize, from: f32, to: f32, steps: usize) -> Result<()> {
    if steps < 2 {
        return Err(Error::config("quantscan needs at least 2 sweep points"));
    }
    if !(from.is_finite() && to.is_finite() && from < to) {
        return Err(Error::config(format!("bad sweep range [{from}, {to}]")));
    }
    let cfg = MlNeuronConfig::new(levels, v_th, BackwardKind::Ste);
    cfg.validate()?;
    if timesteps == 0 {
        return Err(Error::config("timesteps must be >= 1"));
    }
    let xs: Vec<f32> = (0..steps)
        .map(|i| from + (to - from) * i as f32 / (steps - 1) as f32)
        .collect();
    let currents = Tensor::new(vec![timesteps, steps], xs.repeat(timesteps))?;
    let z = ml_forward_sequence(&cfg, &currents)?;
    let decoded = rate_decode(&z, levels, timesteps);
    let mut csv = String::from("x,decoded\n");
    for (x, d) in xs.iter().zip(decoded.data()) {
        csv.push_str(&format!("{x},{d}\n"));
    }
    let path = out_dir(cli).join("quantscan.csv");
    write_atomic(&path, csv.as_bytes())?;
    let mut distinct: Vec<u32> = decoded.data().iter().map(|v| v.to_bits()).collect();
    distinct.sort_unstable();
    distinct.dedup();
    println!("{} ({} distinct levels)", path.display(), distinct.len());
    Ok(())
}

#[derive(Serialize)]
struct EnergyOutput {
    snn: EnergyReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    ann: Option<EnergyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snn_over_ann: Option<EnergyComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline: Option<EnergyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snn_over_baseline: Option<EnergyComparison>,
}

fn read_trace(path: &Path) -> Result<SpikeTrace> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

#[allow(clippy::too_many_arguments)]
fn cmd_energy(
    cli: &Cli,
    trace: Option<&Path>,
    checkpoint: Option<&Path>,
    split: Split,
    profile: Option<&Path>,
    ann_baseline: bool,
    baseline_trace: Option<&Path>,
    exact: bool,
) -> Result<()> {
    let hw = match profile {
        Some(p) => HardwareProfile::load(p)?,
        None => HardwareProfile::default(),
    };
    hw.validate()?;
    let mode = if exact { SynapticMode::Exact } else { SynapticMode::WorstCase };
    let baseline = baseline_trace.map(read_trace).transpose()?;
    let (snn, ann, out): (EnergyBreakdown, Option<EnergyBreakdown>, PathBuf) = match trace {
        Some(t) => {
            if ann_baseline {
                return Err(Error::config("--ann-baseline needs a checkpoint, not a trace file"));
            }
            let tr = read_trace(t)?;
            (estimate_trace_energy(&tr, &hw, mode)?, None, out_dir(cli))
        }
        None => {
            let args = SplitArgs {
                checkpoint: checkpoint.map(Path::to_path_buf),
                split,
            };
            let (exp, _, tr) = run_split(cli, &args)?;
            let model = load_checkpoint(&exp, checkpoint)?;
            let snn = estimate_snn_energy(&tr, &model, &hw, mode)?;
            // the trace covers every sample of the split, so the ANN runs as often
            let ann = ann_baseline
                .then(|| estimate_ann_energy(&model, &hw).map(|a| a.repeated(tr.batch as u64)))
                .transpose()?;
            (snn, ann, exp.config.out_dir.clone())
        }
    };
    let base = baseline
        .as_ref()
        .map(|b| estimate_trace_energy(b, &hw, mode))
        .transpose()?;
    let report = EnergyOutput {
        snn: snn.report(),
        ann: ann.as_ref().map(EnergyBreakdown::report),
        snn_over_ann: ann.as_ref().map(|a| compare_energy(&snn, a)).transpose()?,
        baseline: base.as_ref().map(EnergyBreakdown::report),
        snn_over_baseline: base.as_ref().map(|b| compare_energy(&snn, b)).transpose()?,
    };
    let mut columns = vec![("snn", &snn)];
    if let Some(a) = &ann {
        columns.push(("ann", a));
    }
    if let Some(b) = &base {
        columns.push(("baseline", b));
    }
    let csv = breakdowns_to_csv(&columns);
    write_json_atomic(&out.join("energy.json"), &report)?;
    write_atomic(&out.join("energy.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_gradflow(cli: &Cli, batches: usize, seeds: &[u64], variants: &[VariantArg], train_epochs: usize) -> Result<()> {
    let exp = experiment(cli)?;
    if batches == 0 || seeds.is_empty() || variants.is_empty() {
        return Err(Error::config("gradflow needs at least one batch, seed and variant"));
    }
    if Model::build(&exp.model, exp.config.seed)?.residual_block_count() == 0 {
        return Err(Error::config("gradflow needs a model with residual blocks"));
    }
    let (train, _) = exp.datasets()?;
    let mut all = train.batches(exp.config.batch_size, exp.model.timesteps)?;
    if all.len() < batches {
        return Err(Error::data(format!("dataset yields {} batches, {batches} requested", all.len())));
    }
    all.truncate(batches);
    let mut tc = exp.train_config();
    tc.epochs = train_epochs;
    let mut reports: Vec<GradFlowReport> = Vec::new();
    for &v in variants {
        let mut cfg = exp.model.clone();
        cfg.variant = v.into();
        // per-block overrides would hide the variant under test
        for layer in &mut cfg.layers {
            if let mlsnn::network::LayerSpec::ResidualBlock { variant, .. } = layer {
                *variant = None;
            }
        }
        let report = gradient_flow_report(&cfg, &all, seeds, |model, seed| {
            if train_epochs > 0 {
                let mut tc = tc.clone();
                tc.seed = seed;
                train_loop(model, &train, None, &tc, None, |_, _| Ok(()))?;
            }
            Ok(())
        })?;
        reports.push(report);
    }
    let mut csv = String::new();
    for (i, r) in reports.iter().enumerate() {
        let body = r.to_csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |(_, rest)| rest) });
    }
    write_atomic(&exp.out("gradflow.csv"), csv.as_bytes())?;
    write_json_atomic(&exp.out("gradflow.json"), &reports)?;
    print!("{csv}");
    Ok(())
}

fn cmd_avalanche(cli: &Cli, gamma: u64, depth: u32) -> Result<()> {
    let mut csv = String::from("depth,events\n");
    for d in 0..=depth {
        csv.push_str(&format!("{d},{}\n", avalanche_predict(gamma, d)?));
    }
    write_atomic(&out_dir(cli).join("avalanche.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { resume } => cmd_train(cli, *resume),
        Command::Eval(args) => cmd_eval(cli, args),
        Command::Quantscan {
            v_th,
            levels,
            timesteps,
            from,
            to,
            steps,
        } => cmd_quantscan(cli, *v_th, *levels, *timesteps, *from, *to, *steps),
        Command::Profile(args) => cmd_profile(cli, args),
        Command::Energy {
            trace,
            checkpoint,
            split,
            profile,
            ann_baseline,
            baseline_trace,
            exact,
        } => cmd_energy(
            cli,
            trace.as_deref(),
            checkpoint.as_deref(),
            *split,
            profile.as_deref(),
            *ann_baseline,
            baseline_trace.as_deref(),
            *exact,
        ),
        Command::Gradflow {
            batches,
            seeds,
            variants,
            train_epochs,
        } => cmd_gradflow(cli, *batches, seeds, variants, *train_epochs),
        Command::Avalanche { gamma, depth } => cmd_avalanche(cli, *gamma, *depth),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mlsnn: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
