//! Summary documents, per-trial records and the console table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::experiment::ExperimentSummary;
use super::HarnessError;
use crate::agent::TrialRecord;

pub const SUMMARY_FILE: &str = "summary.json";
pub const RECORDS_FILE: &str = "trials.jsonl";
pub const TABLE_FILE: &str = "table.txt";

const HEADER: [&str; 4] = ["Method", "Success Rate", "Avg. Planning Steps", "Failure Mode (Po, De, Pl)"];

/// `97% (97/100) | 5.04 | 1, 2, 0`
pub fn render_table_row(summary: &ExperimentSummary) -> String {
    let c = summary.failure_counts;
    format!(
        "{:.0}% ({}/{}) | {:.2} | {}, {}, {}",
        summary.success_rate * 100.0,
        summary.success_count,
        summary.trial_count,
        summary.avg_planning_steps,
        c.po,
        c.de,
        c.pl
    )
}

pub fn render_table(rows: &[(String, ExperimentSummary)]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|(label, s)| {
            let row = render_table_row(s);
            let mut parts = row.split(" | ").map(str::to_string);
            [
                label.clone(),
                parts.next().unwrap_or_default(),
                parts.next().unwrap_or_default(),
                parts.next().unwrap_or_default(),
            ]
        })
        .collect();
    let mut widths = HEADER.map(str::len);
    for row in &cells {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cols: [&str; 4]| {
        let mut s = String::new();
        for (i, (c, w)) in cols.iter().zip(widths).enumerate() {
            if i > 0 {
                s.push_str(" | ");
            }
            let _ = write!(s, "{c:<w$}");
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(HEADER);
    out.push_str(&line(widths.map(|w| "-".repeat(w)).each_ref().map(String::as_str)));
    for row in &cells {
        out.push_str(&line(row.each_ref().map(String::as_str)));
    }
    out
}

pub fn records_jsonl(records: &[TrialRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    out
}

fn write(path: &Path, contents: &str) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(|e| HarnessError::io(path, e))
}

/// Writes the summary document, the line-delimited records and the rendered table into `dir`.
pub fn emit_results(summary: &ExperimentSummary, records: &[TrialRecord], dir: &Path, label: &str) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let doc = serde_json::to_string_pretty(summary).expect("summary serializes") + "\n";
    write(&dir.join(SUMMARY_FILE), &doc)?;
    write(&dir.join(RECORDS_FILE), &records_jsonl(records))?;
    write(&dir.join(TABLE_FILE), &render_table(&[(label.to_string(), summary.clone())]))?;
    Ok(())
}
