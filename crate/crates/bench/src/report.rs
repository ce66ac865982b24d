//! Result rows and their three renderings: a human-readable table, CSV with
//! byte-stable content for a given config and seed (no wall times), and
//! JSON carrying everything including timing.

use std::fs;
use std::path::Path;

use mgvt_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::experiment::Scores;

pub const RESULTS_VERSION: u32 = 1;

/// Fraction of the reference budget that was cut.
pub fn reduction_ratio(tokens: usize, reference: usize) -> f64 {
    1.0 - tokens as f64 / reference as f64
}

/// Render a reduction ratio at two-decimal precision, as a percentage:
/// 57 tokens against a 576-token reference prints "90%".
pub fn format_rr(tokens: usize, reference: usize) -> String {
    let pct = (reduction_ratio(tokens, reference) * 100.0).round();
    format!("{pct:.0}%")
}

/// One evaluation row. `model` fingerprints the frozen weights the row was
/// measured against, so a results file shows every row came from the same
/// checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRow {
    pub section: String,
    pub name: String,
    pub tokens: usize,
    pub reduction: String,
    /// Accuracies are absent (`None`) for kinds the eval set never asked.
    pub existence: Option<f64>,
    pub count: Option<f64>,
    pub color: Option<f64>,
    pub position: Option<f64>,
    pub macro_avg: Option<f64>,
    pub model: String,
    /// Wall-clock milliseconds for the row's evaluation; JSON only.
    pub wall_ms: u64,
}

impl EvalRow {
    pub fn from_scores(
        section: &str,
        name: &str,
        scores: &Scores,
        tokens: usize,
        reference: usize,
        model_checksum: u64,
        wall_ms: u64,
    ) -> EvalRow {
        EvalRow {
            section: section.to_string(),
            name: name.to_string(),
            tokens,
            reduction: format_rr(tokens, reference),
            existence: finite(scores.existence.acc()),
            count: finite(scores.count.acc()),
            color: finite(scores.color.acc()),
            position: finite(scores.position.acc()),
            macro_avg: finite(scores.macro_avg()),
            model: format!("{model_checksum:016x}"),
            wall_ms,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Results {
    pub version: u32,
    pub rows: Vec<EvalRow>,
    /// Caption exact-match rate on the full bundle, if measured.
    pub caption_exact: Option<f64>,
    pub notes: Vec<String>,
}

impl Results {
    pub fn new() -> Results {
        Results {
            version: RESULTS_VERSION,
            ..Results::default()
        }
    }

    /// Replace every row of `section` with `rows` (sections re-run whole).
    pub fn replace_section(&mut self, section: &str, rows: Vec<EvalRow>) {
        self.rows.retain(|r| r.section != section);
        self.rows.extend(rows);
    }

    pub fn section(&self, section: &str) -> Vec<&EvalRow> {
        self.rows.iter().filter(|r| r.section == section).collect()
    }
}

/// JSON has no NaN; absent measurements become `None` instead.
pub fn finite(v: f64) -> Option<f64> {
    if v.is_nan() {
        None
    } else {
        Some(v)
    }
}

fn fmt_acc(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "-".to_string(),
    }
}

/// Stable column order shared by the CSV and the table.
const COLUMNS: [&str; 10] = [
    "section",
    "name",
    "tokens",
    "reduction",
    "existence",
    "count",
    "color",
    "position",
    "macro",
    "model",
];

/// CSV with fixed columns and four-decimal accuracies. Wall times are
/// deliberately absent so two runs of the same config produce identical
/// bytes.
pub fn to_csv(rows: &[EvalRow]) -> String {
    let mut out = String::new();
    out.push_str(&COLUMNS.join(","));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.section,
            r.name,
            r.tokens,
            r.reduction,
            fmt_acc(r.existence),
            fmt_acc(r.count),
            fmt_acc(r.color),
            fmt_acc(r.position),
            fmt_acc(r.macro_avg),
            r.model,
        ));
    }
    out
}

/// Aligned table for terminals, one block per section.
pub fn human_table(results: &Results) -> String {
    let mut out = String::new();
    let mut sections: Vec<&str> = Vec::new();
    for r in &results.rows {
        if !sections.contains(&r.section.as_str()) {
            sections.push(&r.section);
        }
    }
    let header = [
        "name", "tokens", "reduction", "exist", "count", "color", "position", "macro",
    ];
    for section in sections {
        out.push_str(&format!("== {section} ==\n"));
        let rows: Vec<&EvalRow> = results.section(section);
        let mut cells: Vec<[String; 8]> = vec![header.map(str::to_string)];
        for r in &rows {
            cells.push([
                r.name.clone(),
                r.tokens.to_string(),
                r.reduction.clone(),
                fmt_acc(r.existence),
                fmt_acc(r.count),
                fmt_acc(r.color),
                fmt_acc(r.position),
                fmt_acc(r.macro_avg),
            ]);
        }
        let mut widths = [0usize; 8];
        for row in &cells {
            for (w, c) in widths.iter_mut().zip(row.iter()) {
                *w = (*w).max(c.len());
            }
        }
        for row in &cells {
            let line: Vec<String> = row
                .iter()
                .zip(widths.iter())
                .map(|(c, w)| format!("{c:>w$}", w = w))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        out.push('\n');
    }
    if let Some(c) = results.caption_exact {
        out.push_str(&format!(
            "caption exact match (full bundle): {}\n",
            fmt_acc(Some(c))
        ));
    }
    out
}

pub fn write_results(dir: &Path, results: &Results) -> Result<()> {
    let json = serde_json::to_vec_pretty(results)
        .map_err(|e| Error::Corrupt(format!("results encoding failed: {e}")))?;
    fs::write(dir.join("results.json"), json)?;
    fs::write(dir.join("results.csv"), to_csv(&results.rows))?;
    Ok(())
}

pub fn read_results(dir: &Path) -> Result<Results> {
    let bytes = fs::read(dir.join("results.json"))?;
    let r: Results = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Corrupt(format!("results.json: {e}")))?;
    if r.version != RESULTS_VERSION {
        return Err(Error::Corrupt(format!(
            "results version {} unsupported (expected {RESULTS_VERSION})",
            r.version
        )));
    }
    Ok(r)
}
