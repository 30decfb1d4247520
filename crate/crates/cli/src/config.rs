//! Run configuration: one structured document that captures every knob of a
//! run. The canonical TOML form round-trips losslessly and is logged at the
//! start of every command, so no setting stays implicit.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use abnn_core::attack::StepRule;
use abnn_core::eval::AttackKind;
use abnn_core::tensor::DType;
use abnn_core::train::TrainConfig;

#[derive(Error, Debug)]
pub enum ConfigError {
    #[error("could not parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("could not serialize config: {0}")]
    Serialize(#[from] toml::ser::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommandKind {
    Train,
    Attack,
    Eval,
    Report,
    Sweep,
}

/// Gaussian-blob generator parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    /// Examples generated per class.
    pub per_class: usize,
    /// Minimum Euclidean distance between class means.
    pub separation: f64,
    /// Within-class standard deviation per coordinate.
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

/// Model architecture: an MLP given by hidden widths; input width and class
/// count come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub stochastic: bool,
    pub prior_sigma: f64,
    pub dtype: DType,
}

/// Evaluation protocol: the attack grid and ensemble settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub gammas: Vec<f64>,
    pub attacks: Vec<AttackKind>,
    pub m_eval: usize,
    pub steps: usize,
    pub m_grad: usize,
    /// Explicit step size; absent means 2.5 * gamma / steps per radius.
    pub eta: Option<f64>,
    pub step_rule: StepRule,
    pub random_start: bool,
    pub n_examples: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            gammas: vec![0.035, 0.07],
            attacks: vec![AttackKind::Naive, AttackKind::Averaged],
            m_eval: 40,
            steps: 150,
            m_grad: 10,
            eta: None,
            step_rule: StepRule::Sign,
            random_start: true,
            n_examples: 1000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    MGrad,
    Steps,
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepParam::MGrad => write!(f, "m_grad"),
            SweepParam::Steps => write!(f, "steps"),
        }
    }
}

impl std::str::FromStr for SweepParam {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "m_grad" | "m-grad" => Ok(SweepParam::MGrad),
            "steps" => Ok(SweepParam::Steps),
            other => Err(format!("unknown sweep parameter '{other}'")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct Paths {
    /// Checkpoint to write (train) or read (attack/eval/sweep).
    pub model: Option<PathBuf>,
    pub report_csv: Option<PathBuf>,
    pub report_md: Option<PathBuf>,
    /// Existing report to re-render (report command).
    pub report_in: Option<PathBuf>,
}

/// The complete, self-describing configuration of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    pub eval: EvalSpec,
    pub sweep: Option<SweepSpec>,
    pub paths: Paths,
}

impl RunConfig {
    /// Canonical text form with every default materialized.
    pub fn to_canonical_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, ConfigError> {
        Ok(toml::from_str(text)?)
    }
}
