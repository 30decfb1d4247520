//! Robust-accuracy report rows with full configuration provenance.

use serde::{Deserialize, Serialize};

use crate::attack::StepRule;
use crate::train::DefenseKind;

use super::EvalError;

/// Which attack produced a measurement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Naive,
    Averaged,
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttackKind::Naive => write!(f, "naive"),
            AttackKind::Averaged => write!(f, "averaged"),
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(AttackKind::Naive),
            "averaged" => Ok(AttackKind::Averaged),
            other => Err(format!("unknown attack kind '{other}'")),
        }
    }
}

/// One measurement: a defense attacked by one attack at one radius, with
/// every knob that produced the number.
///
/// `wall_time_s` is diagnostic metadata: it is logged, never serialized,
/// and exempt from equality so that reports from identical configurations
/// compare (and serialize) identically.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub defense: DefenseKind,
    pub attack: AttackKind,
    pub gamma: f64,
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
    pub n_examples: usize,
    pub m_eval: usize,
    pub m_grad: usize,
    pub steps: usize,
    pub eta: f64,
    pub step_rule: StepRule,
    pub seeds: Vec<u64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl PartialEq for ReportRow {
    fn eq(&self, other: &Self) -> bool {
        self.defense == other.defense
            && self.attack == other.attack
            && self.gamma == other.gamma
            && self.clean_accuracy == other.clean_accuracy
            && self.robust_accuracy == other.robust_accuracy
            && self.n_examples == other.n_examples
            && self.m_eval == other.m_eval
            && self.m_grad == other.m_grad
            && self.steps == other.steps
            && self.eta == other.eta
            && self.step_rule == other.step_rule
            && self.seeds == other.seeds
    }
}

impl ReportRow {
    fn validate(&self, index: usize) -> Result<(), EvalError> {
        let check = |name: &str, v: f64| -> Result<(), EvalError> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(EvalError::InvalidRow {
                    index,
                    message: format!("{name} {v} outside [0, 1]"),
                });
            }
            Ok(())
        };
        check("clean_accuracy", self.clean_accuracy)?;
        check("robust_accuracy", self.robust_accuracy)?;
        if self.n_examples == 0 {
            return Err(EvalError::InvalidRow {
                index,
                message: "n_examples missing".into(),
            });
        }
        if self.m_eval == 0 {
            return Err(EvalError::InvalidRow {
                index,
                message: "m_eval missing".into(),
            });
        }
        if self.m_grad == 0 {
            return Err(EvalError::InvalidRow {
                index,
                message: "m_grad missing".into(),
            });
        }
        if self.eta <= 0.0 || self.eta.is_nan() {
            return Err(EvalError::InvalidRow {
                index,
                message: format!("eta {} must be positive", self.eta),
            });
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(EvalError::InvalidRow {
                index,
                message: format!("gamma {} must be finite and non-negative", self.gamma),
            });
        }
        if self.seeds.is_empty() {
            return Err(EvalError::InvalidRow {
                index,
                message: "seeds missing".into(),
            });
        }
        Ok(())
    }
}

/// Validated, canonically ordered measurement rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    rows: Vec<ReportRow>,
}

impl RobustnessReport {
    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<ReportRow> {
        self.rows
    }

    /// Distinct radii in ascending order.
    pub fn gammas(&self) -> Vec<f64> {
        let mut gs: Vec<f64> = Vec::new();
        for row in &self.rows {
            if !gs.iter().any(|g| g == &row.gamma) {
                gs.push(row.gamma);
            }
        }
        gs.sort_by(|a, b| a.partial_cmp(b).expect("validated finite"));
        gs
    }

    pub fn defenses(&self) -> Vec<DefenseKind> {
        let mut ds = Vec::new();
        for row in &self.rows {
            if !ds.contains(&row.defense) {
                ds.push(row.defense);
            }
        }
        ds.sort();
        ds
    }
}

/// Validates every row and sorts by (defense, gamma, attack, first seed).
pub fn build_report(rows: Vec<ReportRow>) -> Result<RobustnessReport, EvalError> {
    if rows.is_empty() {
        return Err(EvalError::EmptyReport);
    }
    for (i, row) in rows.iter().enumerate() {
        row.validate(i)?;
    }
    let mut rows = rows;
    rows.sort_by(|a, b| {
        a.defense
            .cmp(&b.defense)
            .then(a.gamma.partial_cmp(&b.gamma).expect("validated finite"))
            .then(a.attack.cmp(&b.attack))
            .then(a.seeds.first().cmp(&b.seeds.first()))
    });
    Ok(RobustnessReport { rows })
}
