use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use abnn_core::attack::StepRule;
use abnn_core::eval::AttackKind;
use abnn_core::tensor::DType;
use abnn_core::train::{DefenseKind, OptimizerKind, TrainConfig};

use abnn_cli::config::{
    ArchSpec, CommandKind, DatasetSpec, EvalSpec, Paths, RunConfig, SweepParam, SweepSpec,
    SyntheticSpec,
};

/// Train stochastic (Gaussian-variational) classifiers with adversarial
/// training and measure their robustness under l-infinity PGD attacks with
/// single-sample or averaged gradients.
#[derive(Parser)]
#[command(name = "abnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a defense and write a checkpoint.
    Train(TrainArgs),
    /// Run one attack configuration against a checkpoint.
    Attack(AttackArgs),
    /// Evaluate a checkpoint over the full gamma x attack grid.
    Eval(EvalArgs),
    /// Re-render a saved report CSV.
    Report(ReportArgs),
    /// Sweep one attack parameter, one report row per value.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Dataset source: "synthetic" or "idx".
    #[arg(long, default_value = "synthetic")]
    data: String,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 24)]
    dim: usize,
    /// Synthetic training examples per class.
    #[arg(long, default_value_t = 150)]
    per_class: usize,
    /// Minimum distance between synthetic class means.
    #[arg(long, default_value_t = 0.55)]
    separation: f64,
    /// Within-class standard deviation of the synthetic blobs.
    #[arg(long, default_value_t = 0.07)]
    sigma_c: f64,
    #[arg(long)]
    idx_images: Option<PathBuf>,
    #[arg(long)]
    idx_labels: Option<PathBuf>,
}

impl DataArgs {
    fn to_spec(&self) -> Result<DatasetSpec> {
        match self.data.as_str() {
            "synthetic" => Ok(DatasetSpec::Synthetic(SyntheticSpec {
                classes: self.classes,
                dim: self.dim,
                per_class: self.per_class,
                separation: self.separation,
                sigma: self.sigma_c,
            })),
            "idx" => {
                let (Some(images), Some(labels)) = (&self.idx_images, &self.idx_labels) else {
                    bail!("--data idx needs --idx-images and --idx-labels");
                };
                Ok(DatasetSpec::Idx {
                    images: images.clone(),
                    labels: labels.clone(),
                })
            }
            other => bail!("unknown dataset source '{other}'"),
        }
    }
}

#[derive(Args)]
struct ArchArgs {
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [32usize, 16])]
    hidden: Vec<usize>,
    /// Use Gaussian-variational layers instead of point weights.
    #[arg(long)]
    stochastic: bool,
    #[arg(long, default_value_t = 1.0)]
    prior_sigma: f64,
    /// Parameter dtype: "f32" or "f64".
    #[arg(long, default_value = "f32")]
    dtype: String,
}

impl ArchArgs {
    fn to_spec(&self, force_stochastic: Option<bool>) -> Result<ArchSpec> {
        let dtype = match self.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => bail!("unknown dtype '{other}'"),
        };
        Ok(ArchSpec {
            hidden: self.hidden.clone(),
            stochastic: force_stochastic.unwrap_or(self.stochastic),
            prior_sigma: self.prior_sigma,
            dtype,
        })
    }
}

#[derive(Args)]
struct AttackParamArgs {
    /// Attack radii, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [0.035, 0.07])]
    gammas: Vec<f64>,
    /// Attacks to run: "naive" and/or "averaged", comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = vec!["naive".to_string(), "averaged".to_string()])]
    attacks: Vec<String>,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    /// Noise samples per gradient estimate for the averaged attack.
    #[arg(long, default_value_t = 10)]
    m_grad: usize,
    /// Ensemble size for predictions.
    #[arg(long, default_value_t = 40)]
    m_eval: usize,
    /// Step size; omitted means 2.5 * gamma / steps.
    #[arg(long)]
    eta: Option<f64>,
    /// Step rule: "sign" or "raw".
    #[arg(long, default_value = "sign")]
    step_rule: String,
    /// Start from the clean input instead of a random point in the ball.
    #[arg(long)]
    no_random_start: bool,
    /// Evaluation set size.
    #[arg(long, default_value_t = 1000)]
    n_examples: usize,
}

impl AttackParamArgs {
    fn to_spec(&self) -> Result<EvalSpec> {
        let attacks = self
            .attacks
            .iter()
            .map(|s| s.parse::<AttackKind>().map_err(anyhow::Error::msg))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSpec {
            gammas: self.gammas.clone(),
            attacks,
            m_eval: self.m_eval,
            steps: self.steps,
            m_grad: self.m_grad,
            eta: self.eta,
            step_rule: self
                .step_rule
                .parse::<StepRule>()
                .map_err(anyhow::Error::msg)?,
            random_start: !self.no_random_start,
            n_examples: self.n_examples,
        })
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: u64,
    /// Output checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Defense: adv_training, adv_bnn_naive, or adv_bnn_apgd.
    #[arg(long, default_value = "adv_bnn_naive")]
    defense: String,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Learning rate; omitted means the defense default.
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer: "adam" or "sgd"; omitted means the defense default.
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    kl_weight: f64,
    /// Inner-attack radius used while training.
    #[arg(long, default_value_t = 0.07)]
    train_gamma: f64,
    #[arg(long, default_value_t = 10)]
    train_steps: usize,
    #[arg(long, default_value_t = 10)]
    train_m_grad: usize,
    #[arg(long)]
    train_eta: Option<f64>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    arch: ArchArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    seed: u64,
    /// Checkpoint to evaluate.
    #[arg(long)]
    model: PathBuf,
    /// Report CSV output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional markdown rendering of the same report.
    #[arg(long)]
    markdown: Option<PathBuf>,
    #[command(flatten)]
    attack: AttackParamArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Attack radius.
    #[arg(long, default_value_t = 0.07)]
    gamma: f64,
    /// Attack kind: "naive" or "averaged".
    #[arg(long, default_value = "averaged")]
    attack: String,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    m_grad: usize,
    #[arg(long, default_value_t = 40)]
    m_eval: usize,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value = "sign")]
    step_rule: String,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 1000)]
    n_examples: usize,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct ReportArgs {
    /// Saved report CSV.
    #[arg(long, value_name = "CSV")]
    input: PathBuf,
    /// Output format: "csv" or "markdown".
    #[arg(long, default_value = "markdown")]
    format: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Swept parameter: "m_grad" or "steps".
    #[arg(long)]
    param: String,
    /// Values to sweep, comma separated.
    #[arg(long, value_delimiter = ',')]
    values: Vec<usize>,
    #[arg(long, default_value_t = 0.07)]
    gamma: f64,
    #[arg(long, default_value = "averaged")]
    attack: String,
    #[arg(long, default_value_t = 150)]
    steps: usize,
    #[arg(long, default_value_t = 10)]
    m_grad: usize,
    #[arg(long, default_value_t = 40)]
    m_eval: usize,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value = "sign")]
    step_rule: String,
    #[arg(long)]
    no_random_start: bool,
    #[arg(long, default_value_t = 1000)]
    n_examples: usize,
    #[command(flatten)]
    data: DataArgs,
}

fn train_config_from(args: &TrainArgs) -> Result<TrainConfig> {
    let defense_kind = args
        .defense
        .parse::<DefenseKind>()
        .map_err(anyhow::Error::msg)?;
    let mut cfg = TrainConfig::defaults_for(defense_kind, args.train_gamma, args.seed);
    cfg.epochs = args.epochs;
    cfg.batch_size = args.batch_size;
    cfg.kl_weight = args.kl_weight;
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(opt) = &args.optimizer {
        cfg.optimizer = match opt.as_str() {
            "adam" => OptimizerKind::adam_default(),
            "sgd" => OptimizerKind::SgdMomentum {
                momentum: args.momentum,
            },
            other => bail!("unknown optimizer '{other}'"),
        };
    }
    cfg.inner_attack.steps = args.train_steps;
    cfg.inner_attack.m_grad = args.train_m_grad;
    cfg.inner_attack.eta = args
        .train_eta
        .unwrap_or_else(|| abnn_core::attack::AttackConfig::default_eta(args.train_gamma, args.train_steps));
    Ok(cfg)
}

fn to_run_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.command {
        Command::Train(args) => {
            let defense_kind = args
                .defense
                .parse::<DefenseKind>()
                .map_err(anyhow::Error::msg)?;
            let stochastic = defense_kind != DefenseKind::AdvTraining;
            Ok(RunConfig {
                command: CommandKind::Train,
                seed: args.seed,
                dataset: args.data.to_spec()?,
                arch: args.arch.to_spec(Some(stochastic))?,
                train: train_config_from(args)?,
                eval: EvalSpec::default(),
                sweep: None,
                paths: Paths {
                    model: Some(args.out.clone()),
                    ..Paths::default()
                },
            })
        }
        Command::Eval(args) => Ok(RunConfig {
            command: CommandKind::Eval,
            seed: args.seed,
            dataset: args.data.to_spec()?,
            arch: ArchSpec {
                hidden: vec![],
                stochastic: false,
                prior_sigma: 1.0,
                dtype: DType::F32,
            },
            train: TrainConfig::defaults_for(DefenseKind::AdvBnnNaive, 0.07, args.seed),
            eval: args.attack.to_spec()?,
            sweep: None,
            paths: Paths {
                model: Some(args.model.clone()),
                report_csv: Some(args.out.clone()),
                report_md: args.markdown.clone(),
                report_in: None,
            },
        }),
        Command::Attack(args) => Ok(RunConfig {
            command: CommandKind::Attack,
            seed: args.seed,
            dataset: args.data.to_spec()?,
            arch: ArchSpec {
                hidden: vec![],
                stochastic: false,
                prior_sigma: 1.0,
                dtype: DType::F32,
            },
            train: TrainConfig::defaults_for(DefenseKind::AdvBnnNaive, 0.07, args.seed),
            eval: EvalSpec {
                gammas: vec![args.gamma],
                attacks: vec![args.attack.parse::<AttackKind>().map_err(anyhow::Error::msg)?],
                m_eval: args.m_eval,
                steps: args.steps,
                m_grad: args.m_grad,
                eta: args.eta,
                step_rule: args
                    .step_rule
                    .parse::<StepRule>()
                    .map_err(anyhow::Error::msg)?,
                random_start: !args.no_random_start,
                n_examples: args.n_examples,
            },
            sweep: None,
            paths: Paths {
                model: Some(args.model.clone()),
                report_csv: Some(args.out.clone()),
                ..Paths::default()
            },
        }),
        Command::Sweep(args) => Ok(RunConfig {
            command: CommandKind::Sweep,
            seed: args.seed,
            dataset: args.data.to_spec()?,
            arch: ArchSpec {
                hidden: vec![],
                stochastic: false,
                prior_sigma: 1.0,
                dtype: DType::F32,
            },
            train: TrainConfig::defaults_for(DefenseKind::AdvBnnNaive, 0.07, args.seed),
            eval: EvalSpec {
                gammas: vec![args.gamma],
                attacks: vec![args.attack.parse::<AttackKind>().map_err(anyhow::Error::msg)?],
                m_eval: args.m_eval,
                steps: args.steps,
                m_grad: args.m_grad,
                eta: args.eta,
                step_rule: args
                    .step_rule
                    .parse::<StepRule>()
                    .map_err(anyhow::Error::msg)?,
                random_start: !args.no_random_start,
                n_examples: args.n_examples,
            },
            sweep: Some(SweepSpec {
                param: args.param.parse::<SweepParam>().map_err(anyhow::Error::msg)?,
                values: args.values.clone(),
            }),
            paths: Paths {
                model: Some(args.model.clone()),
                report_csv: Some(args.out.clone()),
                ..Paths::default()
            },
        }),
        Command::Report(args) => {
            let format = args
                .format
                .parse::<abnn_cli::report_io::ReportFormat>()
                .map_err(anyhow::Error::msg)?;
            let (report_csv, report_md) = match format {
                abnn_cli::report_io::ReportFormat::Csv => (Some(args.out.clone()), None),
                abnn_cli::report_io::ReportFormat::Markdown => (None, Some(args.out.clone())),
            };
            Ok(RunConfig {
                command: CommandKind::Report,
                seed: 0,
                dataset: DatasetSpec::Synthetic(SyntheticSpec {
                    classes: 2,
                    dim: 1,
                    per_class: 1,
                    separation: 0.1,
                    sigma: 0.1,
                }),
                arch: ArchSpec {
                    hidden: vec![],
                    stochastic: false,
                    prior_sigma: 1.0,
                    dtype: DType::F32,
                },
                train: TrainConfig::defaults_for(DefenseKind::AdvTraining, 0.07, 0),
                eval: EvalSpec::default(),
                sweep: None,
                paths: Paths {
                    report_in: Some(args.input.clone()),
                    report_csv,
                    report_md,
                    model: None,
                },
            })
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match to_run_config(&cli) {
        Ok(cfg) => cfg,
        Err(err) => {
            eprintln!("error: {err:#}");
            return ExitCode::FAILURE;
        }
    };
    match abnn_cli::run(&cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
