//! Command orchestration: train -> checkpoint -> attack/eval -> report.
//!
//! Every path is validated before any compute starts, the fully resolved
//! config is logged first, and all randomness derives from the config seed,
//! so a fixed seed reproduces every output byte-for-byte. Wall times are
//! logged to stdout only; they never enter report files.

use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};

use abnn_core::attack::AttackConfig;
use abnn_core::data::Dataset;
use abnn_core::eval::{
    build_report, clean_accuracy, robust_accuracy, AttackKind, ReportRow, RobustnessReport,
};
use abnn_core::net::StochasticModel;
use abnn_core::tensor::DType;
use abnn_core::rng::{derive_rng, derive_seed, rng_from_seed};
use abnn_core::train::train_defense;

use crate::checkpoint::{load_checkpoint, save_checkpoint, ModelArch};
use crate::config::{CommandKind, DatasetSpec, RunConfig, SweepParam, SweepSpec};
use crate::idx::load_idx;
use crate::report_io::{emit_report, parse_csv, ReportFormat};
use crate::synthetic::gen_synthetic_with;

const TRAIN_DATA_STREAM: u64 = 0xD0;
const EVAL_DATA_STREAM: u64 = 0xD1;
const INIT_STREAM: u64 = 0xD2;
const TRAIN_STREAM: u64 = 0xD3;
const CLEAN_EVAL_STREAM: u64 = 0xD4;
const ROBUST_EVAL_STREAM: u64 = 0xD5;
const ATTACK_CFG_STREAM: u64 = 0xD6;

/// Executes one command. Any failure carries the failing stage in its
/// context chain.
pub fn run(cfg: &RunConfig) -> Result<()> {
    validate_paths(cfg).context("config validation stage")?;
    let resolved = cfg
        .to_canonical_toml()
        .context("config validation stage")?;
    println!("# resolved configuration\n{resolved}");

    match cfg.command {
        CommandKind::Train => train_command(cfg).context("train stage"),
        CommandKind::Eval | CommandKind::Attack => eval_command(cfg).context("eval stage"),
        CommandKind::Sweep => sweep_command(cfg).context("sweep stage"),
        CommandKind::Report => report_command(cfg).context("report stage"),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} '{}' does not exist", path.display());
    }
    Ok(())
}

fn require_writable_parent(path: &Path, what: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            bail!(
                "{what} '{}' is in a missing directory '{}'",
                path.display(),
                parent.display()
            );
        }
    }
    Ok(())
}

fn validate_paths(cfg: &RunConfig) -> Result<()> {
    if let DatasetSpec::Idx { images, labels } = &cfg.dataset {
        if cfg.command != CommandKind::Report {
            require_file(images, "IDX image file")?;
            require_file(labels, "IDX label file")?;
        }
    }
    match cfg.command {
        CommandKind::Train => {
            let model = cfg
                .paths
                .model
                .as_ref()
                .context("train needs an output model path")?;
            require_writable_parent(model, "model output")?;
        }
        CommandKind::Eval | CommandKind::Attack | CommandKind::Sweep => {
            let model = cfg
                .paths
                .model
                .as_ref()
                .context("evaluation needs a model checkpoint path")?;
            require_file(model, "model checkpoint")?;
            let csv = cfg
                .paths
                .report_csv
                .as_ref()
                .context("evaluation needs a report output path")?;
            require_writable_parent(csv, "report output")?;
            if let Some(md) = &cfg.paths.report_md {
                require_writable_parent(md, "markdown report output")?;
            }
            if cfg.command == CommandKind::Sweep && cfg.sweep.is_none() {
                bail!("sweep needs a sweep specification");
            }
        }
        CommandKind::Report => {
            let input = cfg
                .paths
                .report_in
                .as_ref()
                .context("report needs an input CSV path")?;
            require_file(input, "report input")?;
            if cfg.paths.report_csv.is_none() && cfg.paths.report_md.is_none() {
                bail!("report needs at least one output path");
            }
        }
    }
    Ok(())
}

fn build_train_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let dtype = cfg.arch.dtype;
    match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => {
            let distribution = derive_seed(cfg.seed, 0, TRAIN_DATA_STREAM);
            let draw = derive_seed(cfg.seed, 1, TRAIN_DATA_STREAM);
            gen_synthetic_with(spec, distribution, draw, dtype)
                .context("synthetic data generation")
        }
        DatasetSpec::Idx { images, labels } => {
            load_idx(images, labels, dtype).context("IDX parsing")
        }
    }
}

/// Evaluation data for a checkpoint. Synthetic evaluation re-draws fresh
/// points from the task the checkpoint was trained on (its class means are
/// determined by the training config echoed in the provenance); IDX
/// evaluation reads the files named on the command line.
fn build_eval_dataset(cfg: &RunConfig, trained_on: &RunConfig, dtype: DType) -> Result<Dataset> {
    let data = match (&cfg.dataset, &trained_on.dataset) {
        (DatasetSpec::Idx { images, labels }, _) => {
            load_idx(images, labels, dtype).context("IDX parsing")?
        }
        (DatasetSpec::Synthetic(_), DatasetSpec::Synthetic(train_spec)) => {
            let per_class = cfg.eval.n_examples.div_ceil(train_spec.classes);
            let spec = crate::config::SyntheticSpec {
                per_class,
                ..train_spec.clone()
            };
            let distribution = derive_seed(trained_on.seed, 0, TRAIN_DATA_STREAM);
            let draw = derive_seed(cfg.seed, 0, EVAL_DATA_STREAM);
            gen_synthetic_with(&spec, distribution, draw, dtype)
                .context("synthetic data generation")?
        }
        (DatasetSpec::Synthetic(_), DatasetSpec::Idx { .. }) => {
            bail!(
                "checkpoint was trained on IDX data; evaluate it with --data idx and the held-out files"
            )
        }
    };
    if data.len() > cfg.eval.n_examples {
        let keep: Vec<usize> = (0..cfg.eval.n_examples).collect();
        Ok(data.subset(&keep))
    } else {
        Ok(data)
    }
}

fn class_count(cfg: &RunConfig, data: &Dataset) -> usize {
    match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => spec.classes,
        DatasetSpec::Idx { .. } => data.labels().iter().max().map_or(1, |m| m + 1),
    }
}

fn train_command(cfg: &RunConfig) -> Result<()> {
    let started = Instant::now();
    let data = build_train_dataset(cfg)?;
    let classes = class_count(cfg, &data);
    let arch = ModelArch {
        input_dim: data.features(),
        hidden: cfg.arch.hidden.clone(),
        classes,
        stochastic: cfg.arch.stochastic,
        prior_sigma: cfg.arch.prior_sigma,
        dtype: cfg.arch.dtype,
    };

    let mut init_rng = derive_rng(cfg.seed, 0, INIT_STREAM);
    let mut model = if arch.stochastic {
        StochasticModel::variational_mlp(
            arch.input_dim,
            &arch.hidden,
            arch.classes,
            arch.prior_sigma,
            arch.dtype,
            &mut init_rng,
        )
        .context("model initialization")?
    } else {
        StochasticModel::deterministic_mlp(
            arch.input_dim,
            &arch.hidden,
            arch.classes,
            arch.dtype,
            &mut init_rng,
        )
    };

    let mut train_rng = rng_from_seed(derive_seed(cfg.seed, 0, TRAIN_STREAM));
    let report = train_defense(&mut model, &data, &cfg.train, &mut train_rng)
        .context("defense training")?;
    for epoch in &report.epochs {
        println!(
            "epoch {:3}  loss {:.4}  probe clean {:.3}  probe robust {:.3}",
            epoch.epoch, epoch.train_loss, epoch.clean_accuracy, epoch.robust_accuracy
        );
    }

    let model_path = cfg.paths.model.as_ref().expect("validated");
    let provenance = cfg.to_canonical_toml()?;
    save_checkpoint(&model, &arch, &provenance, model_path).context("checkpoint write")?;
    println!(
        "trained {} ({} attacks, {} optimizer steps) in {:.1}s -> {}",
        cfg.train.defense_kind,
        report.attack_invocations,
        report.optimizer_steps,
        started.elapsed().as_secs_f64(),
        model_path.display()
    );
    Ok(())
}

fn provenance_config(provenance: &str) -> Result<RunConfig> {
    RunConfig::from_toml(provenance).context("checkpoint provenance is not a readable run config")
}

fn eval_rows(
    cfg: &RunConfig,
    model: &StochasticModel,
    defense: abnn_core::train::DefenseKind,
    data: &Dataset,
    grid: &[(f64, AttackKind, usize, usize)],
    paired_attack_seed: bool,
) -> Result<Vec<ReportRow>> {
    let mut clean_rng = derive_rng(cfg.seed, 0, CLEAN_EVAL_STREAM);
    let clean = clean_accuracy(model, data, cfg.eval.m_eval, &mut clean_rng)
        .context("clean accuracy measurement")?;
    println!("clean accuracy: {clean:.4} over {} examples", data.len());

    let mut rows = Vec::with_capacity(grid.len());
    for (combo, &(gamma, attack, steps, m_grad)) in grid.iter().enumerate() {
        let combo_stream = if paired_attack_seed { 0 } else { combo as u64 };
        let attack_cfg = AttackConfig {
            gamma,
            eta: cfg
                .eval
                .eta
                .unwrap_or_else(|| AttackConfig::default_eta(gamma, steps)),
            steps,
            m_grad,
            random_start: cfg.eval.random_start,
            step_rule: cfg.eval.step_rule,
            data_range: (0.0, 1.0),
            seed: derive_seed(cfg.seed, combo_stream, ATTACK_CFG_STREAM),
        };
        let mut eval_rng = derive_rng(cfg.seed, combo as u64, ROBUST_EVAL_STREAM);
        let started = Instant::now();
        let result = robust_accuracy(model, data, attack, &attack_cfg, cfg.eval.m_eval, &mut eval_rng)
            .with_context(|| format!("robust accuracy at gamma {gamma} under {attack}"))?;
        let wall = started.elapsed().as_secs_f64();
        println!(
            "robust accuracy: {:.4}  (attack {attack}, gamma {gamma}, steps {steps}, m_grad {m_grad}, {wall:.1}s)",
            result.accuracy
        );
        rows.push(ReportRow {
            defense,
            attack,
            gamma,
            clean_accuracy: clean,
            robust_accuracy: result.accuracy,
            n_examples: data.len(),
            m_eval: cfg.eval.m_eval,
            m_grad,
            steps,
            eta: attack_cfg.eta,
            step_rule: attack_cfg.step_rule,
            seeds: vec![cfg.seed],
            wall_time_s: wall,
        });
    }
    Ok(rows)
}

fn write_outputs(cfg: &RunConfig, report: &RobustnessReport) -> Result<()> {
    let csv_path = cfg.paths.report_csv.as_ref().expect("validated");
    emit_report(report, ReportFormat::Csv, csv_path).context("report write")?;
    println!("report -> {}", csv_path.display());
    if let Some(md_path) = &cfg.paths.report_md {
        emit_report(report, ReportFormat::Markdown, md_path).context("report write")?;
        println!("markdown -> {}", md_path.display());
    }
    Ok(())
}

fn load_model_for_eval(
    cfg: &RunConfig,
) -> Result<(StochasticModel, ModelArch, RunConfig)> {
    let model_path = cfg.paths.model.as_ref().expect("validated");
    let (model, arch, provenance) = load_checkpoint(model_path).context("checkpoint read")?;
    let trained_on = provenance_config(&provenance)?;
    Ok((model, arch, trained_on))
}

fn check_data_compatibility(arch: &ModelArch, data: &Dataset) -> Result<()> {
    if data.features() != arch.input_dim {
        bail!(
            "dataset has {} features but the checkpoint expects {}",
            data.features(),
            arch.input_dim
        );
    }
    if let Some(&max_label) = data.labels().iter().max() {
        if max_label >= arch.classes {
            bail!(
                "dataset labels reach {max_label} but the checkpoint has {} classes",
                arch.classes
            );
        }
    }
    Ok(())
}

fn eval_command(cfg: &RunConfig) -> Result<()> {
    let (model, arch, trained_on) = load_model_for_eval(cfg)?;
    let defense = trained_on.train.defense_kind;
    let data = build_eval_dataset(cfg, &trained_on, arch.dtype)?;
    check_data_compatibility(&arch, &data)?;

    let mut grid = Vec::new();
    for &gamma in &cfg.eval.gammas {
        for &attack in &cfg.eval.attacks {
            let m_grad = match attack {
                AttackKind::Naive => 1,
                AttackKind::Averaged => cfg.eval.m_grad,
            };
            grid.push((gamma, attack, cfg.eval.steps, m_grad));
        }
    }
    let rows = eval_rows(cfg, &model, defense, &data, &grid, false)?;
    let report = build_report(rows).context("report assembly")?;
    write_outputs(cfg, &report)
}

fn sweep_command(cfg: &RunConfig) -> Result<()> {
    let (model, arch, trained_on) = load_model_for_eval(cfg)?;
    let defense = trained_on.train.defense_kind;
    let data = build_eval_dataset(cfg, &trained_on, arch.dtype)?;
    check_data_compatibility(&arch, &data)?;

    let SweepSpec { param, values } = cfg.sweep.as_ref().expect("validated");
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let gamma = *cfg
        .eval
        .gammas
        .first()
        .context("sweep needs one gamma in the eval spec")?;
    let grid: Vec<(f64, AttackKind, usize, usize)> = values
        .iter()
        .map(|&v| match param {
            // Sampling-count sweeps only make sense for the averaged attack.
            SweepParam::MGrad => (gamma, AttackKind::Averaged, cfg.eval.steps, v),
            SweepParam::Steps => {
                let attack = *cfg.eval.attacks.first().unwrap_or(&AttackKind::Averaged);
                let m_grad = match attack {
                    AttackKind::Naive => 1,
                    AttackKind::Averaged => cfg.eval.m_grad,
                };
                (gamma, attack, v, m_grad)
            }
        })
        .collect();
    println!("sweeping {param} over {values:?}");
    // A shared attack seed pairs the noise streams across grid points.
    let rows = eval_rows(cfg, &model, defense, &data, &grid, true)?;
    let report = build_report(rows).context("report assembly")?;
    write_outputs(cfg, &report)
}

fn report_command(cfg: &RunConfig) -> Result<()> {
    let input = cfg.paths.report_in.as_ref().expect("validated");
    let text = std::fs::read_to_string(input)
        .with_context(|| format!("reading report '{}'", input.display()))?;
    let report = parse_csv(&text).context("report parsing")?;
    if let Some(csv) = &cfg.paths.report_csv {
        emit_report(&report, ReportFormat::Csv, csv).context("report write")?;
        println!("report -> {}", csv.display());
    }
    if let Some(md) = &cfg.paths.report_md {
        emit_report(&report, ReportFormat::Markdown, md).context("report write")?;
        println!("markdown -> {}", md.display());
    }
    Ok(())
}
