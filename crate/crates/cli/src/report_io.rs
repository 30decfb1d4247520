//! Report serialization: a provenance-complete CSV that parses back into an
//! equal report, and a markdown table with defenses as rows and
//! (plain, per-radius per-attack) accuracy columns.

use std::path::{Path, PathBuf};

use thiserror::Error;

use abnn_core::attack::StepRule;
use abnn_core::eval::{build_report, AttackKind, EvalError, ReportRow, RobustnessReport};
use abnn_core::train::DefenseKind;

#[derive(Error, Debug)]
pub enum ReportIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("report CSV line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("refusing to write an empty report")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format '{other}'")),
        }
    }
}

const CSV_HEADER: &str = "defense,attack,gamma,clean_accuracy,robust_accuracy,n_examples,m_eval,m_grad,steps,eta,step_rule,seeds";

/// One CSV row per measurement, every configuration column included.
/// Floats use the shortest representation that parses back bit-identically.
pub fn render_csv(report: &RobustnessReport) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in report.rows() {
        let seeds = row
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "{},{},{:?},{:?},{:?},{},{},{},{},{:?},{},{}\n",
            row.defense,
            row.attack,
            row.gamma,
            row.clean_accuracy,
            row.robust_accuracy,
            row.n_examples,
            row.m_eval,
            row.m_grad,
            row.steps,
            row.eta,
            row.step_rule,
            seeds,
        ));
    }
    out
}

fn parse_field<T: std::str::FromStr>(
    value: &str,
    name: &str,
    line: usize,
) -> Result<T, ReportIoError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| ReportIoError::Parse {
        line,
        message: format!("bad {name} '{value}': {e}"),
    })
}

/// Parses [`render_csv`] output back into a validated report.
pub fn parse_csv(text: &str) -> Result<RobustnessReport, ReportIoError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == CSV_HEADER => {}
        Some((_, header)) => {
            return Err(ReportIoError::Parse {
                line: 1,
                message: format!("unexpected header '{header}'"),
            })
        }
        None => {
            return Err(ReportIoError::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 12 {
            return Err(ReportIoError::Parse {
                line: line_no,
                message: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let seeds: Vec<u64> = if fields[11].is_empty() {
            Vec::new()
        } else {
            fields[11]
                .split(';')
                .map(|s| parse_field::<u64>(s, "seed", line_no))
                .collect::<Result<_, _>>()?
        };
        rows.push(ReportRow {
            defense: parse_field::<DefenseKind>(fields[0], "defense", line_no)?,
            attack: parse_field::<AttackKind>(fields[1], "attack", line_no)?,
            gamma: parse_field::<f64>(fields[2], "gamma", line_no)?,
            clean_accuracy: parse_field::<f64>(fields[3], "clean_accuracy", line_no)?,
            robust_accuracy: parse_field::<f64>(fields[4], "robust_accuracy", line_no)?,
            n_examples: parse_field::<usize>(fields[5], "n_examples", line_no)?,
            m_eval: parse_field::<usize>(fields[6], "m_eval", line_no)?,
            m_grad: parse_field::<usize>(fields[7], "m_grad", line_no)?,
            steps: parse_field::<usize>(fields[8], "steps", line_no)?,
            eta: parse_field::<f64>(fields[9], "eta", line_no)?,
            step_rule: parse_field::<StepRule>(fields[10], "step_rule", line_no)?,
            seeds,
            wall_time_s: 0.0,
        });
    }
    Ok(build_report(rows)?)
}

fn percent(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

/// Markdown table mirroring the usual robustness-table layout: one row per
/// defense; a plain-accuracy column, then per-radius naive and averaged
/// columns. Cells average over seeds; a per-seed section follows so
/// variability stays visible.
pub fn render_markdown(report: &RobustnessReport) -> String {
    let gammas = report.gammas();
    let defenses = report.defenses();

    let mut header = String::from("| defense | plain |");
    let mut divider = String::from("|---|---|");
    for &gamma in &gammas {
        for attack in [AttackKind::Naive, AttackKind::Averaged] {
            header.push_str(&format!(" {attack} γ={gamma} |"));
            divider.push_str("---|");
        }
    }

    let mut out = String::new();
    out.push_str(&header);
    out.push('\n');
    out.push_str(&divider);
    out.push('\n');

    for &defense in &defenses {
        let defense_rows: Vec<&ReportRow> = report
            .rows()
            .iter()
            .filter(|r| r.defense == defense)
            .collect();
        let plain =
            defense_rows.iter().map(|r| r.clean_accuracy).sum::<f64>() / defense_rows.len() as f64;
        let mut line = format!("| {defense} | {} |", percent(plain));
        for &gamma in &gammas {
            for attack in [AttackKind::Naive, AttackKind::Averaged] {
                let matching: Vec<&&ReportRow> = defense_rows
                    .iter()
                    .filter(|r| r.gamma == gamma && r.attack == attack)
                    .collect();
                if matching.is_empty() {
                    line.push_str(" - |");
                } else {
                    let mean = matching.iter().map(|r| r.robust_accuracy).sum::<f64>()
                        / matching.len() as f64;
                    line.push_str(&format!(" {} |", percent(mean)));
                }
            }
        }
        out.push_str(&line);
        out.push('\n');
    }

    out.push_str("\n## Per-seed results\n\n");
    out.push_str("| defense | attack | gamma | seeds | clean | robust |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for row in report.rows() {
        let seeds = row
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(";");
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            row.defense,
            row.attack,
            row.gamma,
            seeds,
            percent(row.clean_accuracy),
            percent(row.robust_accuracy),
        ));
    }
    out
}

/// Writes the report in the requested format. An empty report is an error;
/// no file is created for it.
pub fn emit_report(
    report: &RobustnessReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), ReportIoError> {
    if report.rows().is_empty() {
        return Err(ReportIoError::Empty);
    }
    let text = match format {
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => render_markdown(report),
    };
    std::fs::write(path, text).map_err(|source| ReportIoError::Io {
        path: path.to_path_buf(),
        source,
    })
}
