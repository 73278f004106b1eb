//! `magnet`: generate datasets, train and re-tune models, evaluate rollouts.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use magnet_core::baselines::{LinearMotion, LstmBaseline, MlpBaseline};
use magnet_core::eval::{evaluate_rollout, DenoisedStart, EvalOptions, EvalReport};
use magnet_core::io::{read_checkpoint, read_dataset, write_checkpoint, write_dataset, AnyModel, Checkpoint};
use magnet_core::preprocess::{add_gaussian_noise, denoise_dataset};
use magnet_core::sim::{DEFAULT_DT, DEFAULT_SUBSTEPS};
use magnet_core::train::{monitor_and_retune, retune_wrapper, train_single_step, TrainReport};
use magnet_core::{generate_dataset, ArchConfig, Dataset, MagnetModel, Model, Predictor, SystemKind, SystemSpec};

use config::{BaselineFile, RetuneFile, TrainFile};

#[derive(Parser)]
#[command(name = "magnet", version, about = "Multi-agent dynamics workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum System {
    Pm,
    Kuramoto,
    Swarm,
}

impl From<System> for SystemKind {
    fn from(s: System) -> Self {
        match s {
            System::Pm => SystemKind::PointMass,
            System::Kuramoto => SystemKind::Kuramoto,
            System::Swarm => SystemKind::PredatorSwarm,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BaselineKind {
    Linear,
    Mlp,
    Lstm,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset.
    Gen {
        #[arg(long, value_enum)]
        system: System,
        /// Agent count (for the swarm, prey plus the predator).
        #[arg(long)]
        n: usize,
        /// Number of sequences.
        #[arg(long)]
        m: usize,
        /// Samples per sequence.
        #[arg(long)]
        l: usize,
        #[arg(long, default_value_t = DEFAULT_DT)]
        dt: f64,
        #[arg(long, default_value_t = DEFAULT_SUBSTEPS)]
        substeps: usize,
        /// Seed for initial states.
        #[arg(long)]
        seed: u64,
        /// Seed for the physical parameters; datasets sharing it share a system.
        #[arg(long, default_value_t = 0)]
        system_seed: u64,
        /// Gaussian noise on the observed channels, as a share of each
        /// channel's spread.
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a MagNet model on single-step pairs.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Write the per-epoch loss trace here.
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Re-tune the wrapper of a checkpoint on one observation sequence.
    Retune {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Roll a checkpoint out over a test set and write per-step MSE.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        horizon: usize,
        #[arg(long)]
        out_csv: PathBuf,
        /// Observations are noisy: start from TV-differentiated positions.
        #[arg(long)]
        noisy: bool,
        #[arg(long, default_value_t = magnet_core::preprocess::EVAL_PREFIX, requires = "noisy")]
        prefix: usize,
        /// Clean ground truth to score against (defaults to --data).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Index of the initial condition.
        #[arg(long)]
        start: Option<usize>,
    },
    /// Evaluate the linear-motion baseline, or train an MLP/LSTM baseline.
    Baseline {
        #[arg(long, value_enum)]
        kind: BaselineKind,
        #[arg(long)]
        data: PathBuf,
        /// Linear: rollout horizon.
        #[arg(long, required_if_eq("kind", "linear"))]
        horizon: Option<usize>,
        /// Linear: CSV output.
        #[arg(long, required_if_eq("kind", "linear"))]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        start: Option<usize>,
        /// MLP/LSTM: training config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// MLP/LSTM: checkpoint output.
        #[arg(long, required_if_eq_any([("kind", "mlp"), ("kind", "lstm")]))]
        out: Option<PathBuf>,
        #[arg(long)]
        trace_csv: Option<PathBuf>,
    },
    /// Print a checkpoint's architecture and parameter counts.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Gen {
            system,
            n,
            m,
            l,
            dt,
            substeps,
            seed,
            system_seed,
            noise,
            noise_seed,
            out,
        } => {
            let kind = SystemKind::from(system);
            let spec = SystemSpec::sample(kind, n, dt, substeps, system_seed)?;
            let mut ds = generate_dataset(&spec, m, l, seed)?;
            if let Some(scale) = noise {
                ds = add_gaussian_noise(&ds, &kind.metric_channels(), scale, noise_seed)?;
            }
            write_dataset(&out, &ds).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} sequences of {} samples to {}", m, l, out.display());
        }
        Command::Train {
            data,
            config,
            out,
            trace_csv,
        } => {
            let cfg: TrainFile = config::load(config.as_deref())?;
            let mut ds = load_dataset(&data)?;
            if cfg.denoise {
                ds = denoise_dataset(&ds, &cfg.tv)?;
            }
            let arch = cfg.arch.clone().unwrap_or_else(|| ArchConfig::for_system(ds.system));
            let mut model = MagnetModel::build(arch, ds.n_agents, ds.dt, cfg.model_seed)?;
            let report = train_single_step(&mut model, &ds, &cfg.train)?;
            finish_training(AnyModel::Magnet(model), &report, &out, trace_csv.as_deref())?;
        }
        Command::Retune {
            ckpt,
            data,
            config,
            out,
            trace_csv,
        } => {
            let cfg: RetuneFile = config::load(config.as_deref())?;
            let stream = load_dataset(&data)?;
            let loaded = load_checkpoint(&ckpt)?;
            let AnyModel::Magnet(mut model) = loaded.model else {
                bail!("only MagNet checkpoints have a wrapper to re-tune");
            };
            if model.n_agents() != stream.n_agents {
                model = model.with_averaged_wrapper(stream.n_agents)?;
            }
            match &cfg.monitor {
                Some(monitor) => {
                    let event = monitor_and_retune(&mut model, &stream, loaded.val_loss, monitor, &cfg.retune)?;
                    match &event {
                        Some(ev) => println!(
                            "trigger at step {} (rolling error {:e}); re-tuned on {} observations",
                            ev.trigger_step, ev.rolling_error, ev.observations
                        ),
                        None => println!("error stayed below the threshold; wrapper unchanged"),
                    }
                    let val = event.and_then(|e| e.post_val_loss).unwrap_or(loaded.val_loss);
                    save(AnyModel::Magnet(model), val, &out)?;
                }
                None => {
                    let report = retune_wrapper(&mut model, &stream, &cfg.retune)?;
                    finish_training(AnyModel::Magnet(model), &report, &out, trace_csv.as_deref())?;
                }
            }
        }
        Command::Eval {
            ckpt,
            data,
            horizon,
            out_csv,
            noisy,
            prefix,
            truth,
            start,
        } => {
            let observed = load_dataset(&data)?;
            let truth = match truth {
                Some(path) => load_dataset(&path)?,
                None => observed.clone(),
            };
            let loaded = load_checkpoint(&ckpt)?;
            let model = loaded.model.as_model();
            check_compatible(model, &observed)?;
            let report = if noisy {
                let mut predictor = DenoisedStart::new(model, magnet_core::TvConfig::default());
                predictor.prefix = prefix;
                score(&predictor, &observed, &truth, horizon, start)?
            } else {
                score(model, &observed, &truth, horizon, start)?
            };
            write_report(&report, &out_csv)?;
        }
        Command::Baseline {
            kind,
            data,
            horizon,
            out_csv,
            start,
            config,
            out,
            trace_csv,
        } => {
            let ds = load_dataset(&data)?;
            if kind == BaselineKind::Linear {
                let (Some(horizon), Some(out_csv)) = (horizon, out_csv) else {
                    bail!("linear baseline needs --horizon and --out-csv");
                };
                let predictor = LinearMotion {
                    frame_len: ds.frame_len(),
                };
                let report = score(&predictor, &ds, &ds, horizon, start)?;
                return write_report(&report, &out_csv);
            }
            let Some(out) = out else {
                bail!("learned baselines need --out");
            };
            let cfg: BaselineFile = config::load(config.as_deref())?;
            let (model, report) = if kind == BaselineKind::Mlp {
                let mut model = MlpBaseline::build(ds.n_agents, ds.state_dim, ds.dt, &cfg.mlp_hidden, cfg.model_seed)?;
                let report = train_single_step(&mut model, &ds, &cfg.train)?;
                (AnyModel::Mlp(model), report)
            } else {
                let mut model =
                    LstmBaseline::build(ds.n_agents, ds.state_dim, ds.dt, cfg.lstm_hidden, cfg.lstm_layers, cfg.model_seed)?;
                let report = train_single_step(&mut model, &ds, &cfg.train)?;
                (AnyModel::Lstm(model), report)
            };
            finish_training(model, &report, &out, trace_csv.as_deref())?;
        }
        Command::Inspect { ckpt } => {
            let loaded = load_checkpoint(&ckpt)?;
            print!("{}", describe(&loaded));
        }
    }
    Ok(())
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    read_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    read_checkpoint(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn save(model: AnyModel, val_loss: f64, out: &Path) -> anyhow::Result<()> {
    write_checkpoint(out, &Checkpoint { model, val_loss }).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

fn finish_training(model: AnyModel, report: &TrainReport, out: &Path, trace_csv: Option<&Path>) -> anyhow::Result<()> {
    if let Some(path) = trace_csv {
        std::fs::write(path, report.trace.to_csv()).with_context(|| format!("writing {}", path.display()))?;
    }
    match report.trace.initial_val_loss {
        Some(first) => println!("validation loss {first:e} -> {:e}", report.recorded_val_loss),
        None => println!("final training loss {:e}", report.recorded_val_loss),
    }
    save(model, report.recorded_val_loss, out)
}

fn check_compatible(model: &dyn Model, ds: &Dataset) -> anyhow::Result<()> {
    if model.n_agents() != ds.n_agents || model.state_dim() != ds.state_dim {
        bail!(
            "checkpoint expects {} agents with {} state values, dataset has {} with {}",
            model.n_agents(),
            model.state_dim(),
            ds.n_agents,
            ds.state_dim
        );
    }
    Ok(())
}

fn score<P: Predictor + ?Sized>(
    predictor: &P,
    observed: &Dataset,
    truth: &Dataset,
    horizon: usize,
    start: Option<usize>,
) -> anyhow::Result<EvalReport> {
    let opts = EvalOptions {
        horizon,
        start,
        channels: truth.system.metric_channels(),
    };
    let report = evaluate_rollout(predictor, observed, truth, &opts)?;
    for (m, reason) in &report.failures {
        eprintln!("warning: sequence {m} stopped early: {reason}");
    }
    Ok(report)
}

fn write_report(report: &EvalReport, out: &Path) -> anyhow::Result<()> {
    std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    println!(
        "{} sequences, start {}, step-{} MSE {:e}",
        report.sequences,
        report.start,
        report.horizon,
        report.mse_at(report.horizon)
    );
    Ok(())
}

fn describe(ckpt: &Checkpoint) -> String {
    let model = ckpt.model.as_model();
    let mut lines = vec![
        format!("kind={}", model.kind().name()),
        format!("agents={}", model.n_agents()),
        format!("state_dim={}", model.state_dim()),
        format!("dt={}", model.dt()),
    ];
    match &ckpt.model {
        AnyModel::Magnet(m) => {
            let (core, wrapper) = m.count_params();
            lines.push(format!("mode={}", m.mode().name()));
            lines.push(format!("core={core}"));
            lines.push(format!("wrapper={wrapper}"));
        }
        AnyModel::Mlp(m) => lines.push(format!("hidden={:?}", m.hidden())),
        AnyModel::Lstm(m) => lines.push(format!("hidden={} layers={}", m.hidden(), m.layers())),
    }
    lines.push(format!("params={}", model.param_count()));
    lines.push(format!("tensors={}", model.tensors().len()));
    lines.push(format!("val_loss={:e}", ckpt.val_loss));
    lines.join("\n") + "\n"
}
