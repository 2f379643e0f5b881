use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::run::BenchmarkReport;
use super::{Result, TrainError};

/// Comparative table with the fixed column set
/// `eval_loss, ne_<task>…, time`, each entry a percentage relative to the
/// first row (negative = improvement). The reference row is all zeros.
pub fn render_comparison_table(report: &BenchmarkReport) -> String {
    let mut header = vec!["architecture".to_string(), "eval_loss".to_string()];
    header.extend(report.task_names.iter().map(|t| format!("ne_{t}")));
    header.push("time".to_string());

    let mut rows: Vec<Vec<String>> = vec![header];
    for delta in report.deltas() {
        let mut row = vec![delta.architecture.name().to_string()];
        row.push(format!("{:+.2}%", delta.eval_loss_pct));
        for p in &delta.per_task_ne_pct {
            row.push(format!("{p:+.2}%"));
        }
        row.push(format!("{:+.2}%", delta.time_pct));
        rows.push(row);
    }

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let mut line = String::new();
        for (c, cell) in row.iter().enumerate() {
            if c == 0 {
                line.push_str(&format!("{:<width$}", cell, width = widths[0]));
            } else {
                line.push_str(&format!("  {:>width$}", cell, width = widths[c]));
            }
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

#[derive(Serialize)]
struct DeterministicRow<'a> {
    architecture: &'a str,
    eval_loss: f64,
    per_task_bce: &'a std::collections::BTreeMap<String, f64>,
    per_task_ne: &'a std::collections::BTreeMap<String, f64>,
    attention_flops: u64,
    n_eval_labels: usize,
    n_params: usize,
}

#[derive(Serialize)]
struct DeterministicDelta<'a> {
    architecture: &'a str,
    eval_loss_pct: f64,
    per_task_ne_pct: Vec<f64>,
}

#[derive(Serialize)]
struct DeterministicReport<'a> {
    task_names: &'a [String],
    rows: Vec<DeterministicRow<'a>>,
    deltas: Vec<DeterministicDelta<'a>>,
}

/// Seed-reproducible view of a benchmark: everything except wall-clock
/// timing. Two runs with the same seed serialize to identical bytes.
pub fn deterministic_report(report: &BenchmarkReport) -> Result<String> {
    let doc = DeterministicReport {
        task_names: &report.task_names,
        rows: report
            .rows
            .iter()
            .map(|r| DeterministicRow {
                architecture: r.architecture.name(),
                eval_loss: r.report.eval_loss,
                per_task_bce: &r.report.per_task_bce,
                per_task_ne: &r.report.per_task_ne,
                attention_flops: r.report.attention_flops,
                n_eval_labels: r.report.n_eval_labels,
                n_params: r.n_params,
            })
            .collect(),
        deltas: report
            .deltas()
            .iter()
            .map(|d| DeterministicDelta {
                architecture: d.architecture.name(),
                eval_loss_pct: d.eval_loss_pct,
                per_task_ne_pct: d.per_task_ne_pct.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc)
        .map_err(|e| TrainError::Contract(format!("encoding report: {e}")))
}

/// Appends a titled section to a history file without touching prior
/// content. Creates the file on first use.
pub fn append_history(path: &Path, title: &str, body: &str) -> Result<()> {
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| TrainError::Contract(format!("opening history {}: {e}", path.display())))?;
    writeln!(file, "==== {title} ====")
        .and_then(|_| writeln!(file, "{body}"))
        .map_err(|e| TrainError::Contract(format!("appending history {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_appends_without_clobbering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.txt");
        append_history(&path, "run 1", "body one").unwrap();
        append_history(&path, "run 2", "body two").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("==== run 1 ====") && text.contains("body one"));
        assert!(text.contains("==== run 2 ====") && text.contains("body two"));
        assert!(text.find("run 1").unwrap() < text.find("run 2").unwrap());
    }
}
