//! CSV and markdown rendering of evaluation results.

use std::fmt::Write;

use crate::error::{Error, Result};
use crate::evaluator::{DoublyRightCounts, TransferTable};

/// Label used in the `train_dataset` column for unprompted baseline rows.
pub const BASELINE_LABEL: &str = "none";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" | "markdown" => Ok(ReportFormat::Markdown),
            other => Err(Error::invalid(format!("unknown report format {other:?}"))),
        }
    }
}

impl ReportFormat {
    /// Format implied by a file extension; CSV unless it ends in `.md`.
    pub fn for_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("md") | Some("markdown") => ReportFormat::Markdown,
            _ => ReportFormat::Csv,
        }
    }
}

/// One named result row.
#[derive(Debug, Clone)]
pub struct ReportRow {
    pub name: Option<String>,
    pub counts: DoublyRightCounts,
}

fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn markdown_table(header: &[&str], right_from: usize, rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).chain([header[c].len(), 3]).max().unwrap_or(3))
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(c, v)| {
                if c >= right_from {
                    format!("{v:>w$}", w = widths[c])
                } else {
                    format!("{v:<w$}", w = widths[c])
                }
            })
            .collect();
        format!("| {} |\n", padded.join(" | "))
    };
    let mut out = line(&header.iter().map(|h| h.to_string()).collect::<Vec<_>>());
    let rule: Vec<String> = widths
        .iter()
        .enumerate()
        .map(|(c, &w)| if c >= right_from { format!("{}:", "-".repeat(w + 1)) } else { "-".repeat(w + 2) })
        .collect();
    out.push_str(&format!("|{}|\n", rule.join("|")));
    for r in rows {
        out.push_str(&line(r));
    }
    out
}

fn count_cells(c: &DoublyRightCounts) -> [String; 4] {
    [pct(c.rr), pct(c.rw), pct(c.wr), pct(c.ww)]
}

/// Renders RR/RW/WR/WW/n rows. A name column is added when any row is named.
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::invalid("no results to report"));
    }
    let named = rows.iter().any(|r| r.name.is_some());
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut v = Vec::with_capacity(6);
            if named {
                v.push(r.name.clone().unwrap_or_default());
            }
            v.extend(count_cells(&r.counts));
            v.push(r.counts.n.to_string());
            v
        })
        .collect();
    Ok(match format {
        ReportFormat::Csv => {
            let mut out = String::from(if named { "name,rr,rw,wr,ww,n\n" } else { "rr,rw,wr,ww,n\n" });
            for mut row in cells {
                if named {
                    row[0] = csv_field(&row[0]);
                }
                writeln!(out, "{}", row.join(",")).expect("string write");
            }
            out
        }
        ReportFormat::Markdown => {
            let header: &[&str] = if named {
                &["name", "**RR**", "RW", "WR", "WW", "n"]
            } else {
                &["**RR**", "RW", "WR", "WW", "n"]
            };
            markdown_table(header, usize::from(named), &cells)
        }
    })
}

/// Long-form transfer rows: baseline rows first (train column
/// [`BASELINE_LABEL`]), then prompted cells sorted by (train, eval).
pub fn render_transfer(table: &TransferTable, format: ReportFormat) -> Result<String> {
    if table.baseline.is_empty() && table.cells.is_empty() {
        return Err(Error::invalid("no transfer results to report"));
    }
    let rows: Vec<Vec<String>> = table
        .baseline
        .iter()
        .map(|(eval, c)| (BASELINE_LABEL, eval.as_str(), c))
        .chain(table.cells.iter().map(|((train, eval), c)| (train.as_str(), eval.as_str(), c)))
        .map(|(train, eval, c)| {
            let mut v = vec![train.to_string(), eval.to_string()];
            v.extend(count_cells(c));
            v
        })
        .collect();
    Ok(match format {
        ReportFormat::Csv => {
            let mut out = String::from("train_dataset,eval_dataset,rr,rw,wr,ww\n");
            for mut row in rows {
                row[0] = csv_field(&row[0]);
                row[1] = csv_field(&row[1]);
                writeln!(out, "{}", row.join(",")).expect("string write");
            }
            out
        }
        ReportFormat::Markdown => markdown_table(&["train_dataset", "eval_dataset", "**RR**", "RW", "WR", "WW"], 2, &rows),
    })
}
