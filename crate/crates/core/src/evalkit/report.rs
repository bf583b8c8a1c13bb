use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AblationRow, EvalError, MetricsReport};

/// Rendering of an undefined metric.
pub const UNDEFINED: &str = "n/a";

const REPORT_COLUMNS: [&str; 5] = ["Method", "Halluc. Det.", "False Pos.", "F1", "Cost"];
const ABLATION_COLUMNS: [&str; 4] = ["Configuration", "F1", "Precision", "Recall"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(&self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

/// One parsed comparison-table line, at rendered precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub detection_rate: Option<f64>,
    pub false_positive_rate: Option<f64>,
    pub f1: Option<f64>,
    pub cost_multiplier: Option<f64>,
}

fn rate(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.2}"))
}

fn cost(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| format!("{x:.1}x"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn md_field(s: &str) -> String {
    s.replace('|', "\\|")
}

fn render(header: &[&str], rows: &[Vec<String>], fmt: ReportFormat) -> String {
    let mut out = String::new();
    match fmt {
        ReportFormat::Csv => {
            out.push_str(
                &header
                    .iter()
                    .map(|h| csv_field(h))
                    .collect::<Vec<_>>()
                    .join(","),
            );
            out.push('\n');
            for r in rows {
                out.push_str(&r.iter().map(|c| csv_field(c)).collect::<Vec<_>>().join(","));
                out.push('\n');
            }
        }
        ReportFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for r in rows {
                let cells: Vec<String> = r.iter().map(|c| md_field(c)).collect();
                out.push_str(&format!("| {} |\n", cells.join(" | ")));
            }
        }
    }
    out
}

/// Method, detection rate, false-positive rate, F1 (two decimals) and cost
/// multiplier (one decimal, `x` suffix).
pub fn render_report(reports: &[MetricsReport], fmt: ReportFormat) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.clone(),
                rate(r.detection_rate),
                rate(r.false_positive_rate),
                rate(r.f1),
                cost(r.cost_multiplier),
            ]
        })
        .collect();
    render(&REPORT_COLUMNS, &rows, fmt)
}

pub fn render_ablation(rows: &[AblationRow], fmt: ReportFormat) -> String {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.config.clone(),
                rate(r.report.f1),
                rate(r.report.precision),
                rate(r.report.recall),
            ]
        })
        .collect();
    render(&ABLATION_COLUMNS, &cells, fmt)
}

fn write(path: &Path, text: &str) -> Result<(), EvalError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(path, text).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn emit_report(
    reports: &[MetricsReport],
    fmt: ReportFormat,
    path: &Path,
) -> Result<(), EvalError> {
    write(path, &render_report(reports, fmt))
}

pub fn emit_ablation(
    rows: &[AblationRow],
    fmt: ReportFormat,
    path: &Path,
) -> Result<(), EvalError> {
    write(path, &render_ablation(rows, fmt))
}

fn split_md_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|');
    let inner = inner.strip_suffix('|').unwrap_or(inner);
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = inner.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '\\' if chars.peek() == Some(&'|') => {
                cur.push('|');
                chars.next();
            }
            '|' => cells.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    cells.push(cur);
    cells.into_iter().map(|c| c.trim().to_string()).collect()
}

fn parse_cell(cell: &str, suffix: &str, line: usize) -> Result<Option<f64>, EvalError> {
    if cell == UNDEFINED {
        return Ok(None);
    }
    let body = cell.strip_suffix(suffix).unwrap_or(cell);
    body.parse::<f64>().map(Some).map_err(|_| EvalError::Parse {
        line,
        msg: format!("bad number `{cell}`"),
    })
}

/// Parses a markdown comparison table written by [`render_report`].
pub fn parse_markdown_report(text: &str) -> Result<Vec<ReportRow>, EvalError> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(EvalError::Parse {
        line: 1,
        msg: "empty report".into(),
    })?;
    if split_md_row(header) != REPORT_COLUMNS {
        return Err(EvalError::Parse {
            line: 1,
            msg: format!("unexpected header `{header}`"),
        });
    }
    match lines.next() {
        Some((_, sep)) if sep.trim().starts_with("|-") || sep.trim().starts_with("|:") => {}
        _ => {
            return Err(EvalError::Parse {
                line: 2,
                msg: "missing separator row".into(),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        let c = split_md_row(line);
        if c.len() != REPORT_COLUMNS.len() {
            return Err(EvalError::Parse {
                line: n,
                msg: format!("expected {} cells, got {}", REPORT_COLUMNS.len(), c.len()),
            });
        }
        rows.push(ReportRow {
            method: c[0].clone(),
            detection_rate: parse_cell(&c[1], "", n)?,
            false_positive_rate: parse_cell(&c[2], "", n)?,
            f1: parse_cell(&c[3], "", n)?,
            cost_multiplier: parse_cell(&c[4], "x", n)?,
        });
    }
    Ok(rows)
}
