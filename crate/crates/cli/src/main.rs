use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use contnet::arch::{Activation, Arch, ModelConfig};
use contnet::basis::{BasisFamily, BasisKind};
use contnet::data::SplitSpec;
use contnet::optim::TrainConfig;
use contnet_cli::{
    cmd_condition, cmd_gradcheck, cmd_sweep, cmd_train, parse_degrees, DataSource, DepthMode,
    RunSpec, SweepAxis,
};

#[derive(Parser)]
#[command(name = "contnet", version, about = "Continuous-time residual networks with polynomial weights")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write its artifacts.
    Train(SpecArgs),
    /// Train a sequence of configurations along one axis.
    Sweep {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Depth values are step counts at fixed dt instead of horizons.
        #[arg(long)]
        depth_as_steps: bool,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
        /// Number of training samples in the checked batch.
        #[arg(long, default_value_t = 8)]
        samples: usize,
        /// Negate one analytic block before comparing.
        #[arg(long, value_name = "BLOCK")]
        corrupt_block: Option<String>,
    },
    /// Condition numbers of basis matrices on equispaced points in [0, 1].
    Condition {
        /// Degrees as `a..b` or a comma-separated list.
        #[arg(long, default_value = "0..10")]
        degrees: String,
        #[arg(long, default_value_t = 50)]
        points: usize,
        #[arg(long, value_delimiter = ',', default_value = "monomial,legendre")]
        kinds: Vec<BasisFamily>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ActivationArg {
    Tanh,
    Identity,
}

#[derive(Args, Clone)]
struct SpecArgs {
    /// Full run specification as JSON; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    basis: Option<BasisFamily>,
    #[arg(long)]
    degree: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    /// Time horizon T.
    #[arg(long)]
    t_end: Option<f64>,
    #[arg(long)]
    activation: Option<ActivationArg>,
    /// Tikhonov weight on all parameters.
    #[arg(long)]
    alpha: Option<f64>,
    /// `synth:<smooth|ode>:<n>:<m>:<samples>[:<seed>]` or
    /// `csv:<features>:<targets>:<rows|cols>`.
    #[arg(long)]
    data: Option<DataSource>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Stop once the training loss falls below this value.
    #[arg(long)]
    loss_tolerance: Option<f64>,
    #[arg(long)]
    no_shuffle: bool,
    /// Relative tolerance of the neural ODE solves.
    #[arg(long)]
    rtol: Option<f64>,
    /// Absolute tolerance of the neural ODE solves.
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Output directory (default: $CONTNET_OUT_DIR/<run name> or runs/<run name>).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SpecArgs {
    fn build(&self) -> anyhow::Result<RunSpec> {
        let mut spec = match &self.config {
            Some(path) => RunSpec::from_file(path)?,
            None => RunSpec {
                model: ModelConfig {
                    arch: Arch::ResNet,
                    channels: 15,
                    n_features: 0,
                    m_targets: 0,
                    t_end: 1.0,
                    n_steps: 12,
                    basis: BasisKind::legendre(3),
                    activation: Activation::Tanh,
                    alpha: 0.0,
                },
                train: TrainConfig::default(),
                data: self
                    .data
                    .clone()
                    .context("either --config or --data is required")?,
                split: SplitSpec::default(),
                out_dir: None,
            },
        };
        let m = &mut spec.model;
        if let Some(v) = self.arch {
            m.arch = v;
        }
        if let Some(v) = self.basis {
            m.basis.family = v;
        }
        if let Some(v) = self.degree {
            m.basis.degree = v;
        }
        if m.basis.family == BasisFamily::None {
            m.basis.degree = 0;
        }
        if let Some(v) = self.steps {
            m.n_steps = v;
        }
        if let Some(v) = self.channels {
            m.channels = v;
        }
        if let Some(v) = self.t_end {
            m.t_end = v;
        }
        if let Some(v) = self.activation {
            m.activation = match v {
                ActivationArg::Tanh => Activation::Tanh,
                ActivationArg::Identity => Activation::Identity,
            };
        }
        if let Some(v) = self.alpha {
            m.alpha = v;
        }
        let t = &mut spec.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.loss_tolerance {
            t.loss_tolerance = Some(v);
        }
        if self.no_shuffle {
            t.shuffle = false;
        }
        if let Some(v) = self.rtol {
            t.ode.rtol = v;
        }
        if let Some(v) = self.atol {
            t.ode.atol = v;
        }
        if let Some(v) = &self.data {
            spec.data = v.clone();
        }
        if let Some(v) = self.split_seed {
            spec.split.seed = v;
        }
        if let Some(v) = &self.out {
            spec.out_dir = Some(v.clone());
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train(args) => {
            let outcome = cmd_train(&args.build()?)?;
            let s = &outcome.summary;
            println!(
                "{}: {} epochs, train loss {}, rhs evals {}, artifacts in {}",
                s.status,
                s.epochs_run,
                s.final_train_loss.map_or("-".into(), |v| format!("{v:.6e}")),
                s.total_rhs_evals,
                outcome.spec.out_dir.as_ref().unwrap().display()
            );
            Ok(if outcome.succeeded() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{}", s.error.as_deref().unwrap_or("run failed"));
                ExitCode::FAILURE
            })
        }
        Command::Sweep {
            spec,
            axis,
            values,
            depth_as_steps,
        } => {
            let base = spec.build()?;
            let mode = if depth_as_steps {
                DepthMode::Steps
            } else {
                DepthMode::Horizon
            };
            let rows = cmd_sweep(&base, axis, &values, mode)?;
            for r in &rows {
                match (&r.summary, &r.error) {
                    (Some(s), _) => println!(
                        "{axis}={}: {} train loss {} rhs evals {}",
                        r.value,
                        s.status,
                        s.final_train_loss.map_or("-".into(), |v| format!("{v:.6e}")),
                        s.total_rhs_evals
                    ),
                    (None, e) => println!("{axis}={}: error: {}", r.value, e.as_deref().unwrap_or("")),
                }
            }
            println!("wrote {}", base.resolved_out_dir().join("sweep.csv").display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Gradcheck {
            spec,
            tolerance,
            samples,
            corrupt_block,
        } => {
            let report = cmd_gradcheck(&spec.build()?, tolerance, samples, corrupt_block.as_deref())?;
            print!("{}", report.table());
            Ok(if report.passed() {
                ExitCode::SUCCESS
            } else {
                eprintln!("gradient check failed for: {}", report.failing().join(", "));
                ExitCode::FAILURE
            })
        }
        Command::Condition {
            degrees,
            points,
            kinds,
            out,
        } => {
            let csv = cmd_condition(&parse_degrees(&degrees)?, points, &kinds)?;
            match out {
                Some(path) => std::fs::write(&path, csv)
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{csv}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
