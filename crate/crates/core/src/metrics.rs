//! Per-round records, the metrics CSV, and the cross-run summary report.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{FedPruneError, Result};
use crate::schedule::Phase;

/// Column order of the metrics CSV. New columns are only ever appended.
pub const CSV_COLUMNS: [&str; 9] = [
    "round",
    "phase",
    "sparsity",
    "zero_param_ratio",
    "bytes_down",
    "bytes_up",
    "train_loss",
    "eval_accuracy",
    "wall_time_s",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// 0 for the initial evaluation, `r + 1` after training round `r`.
    pub round: u32,
    pub phase: Phase,
    pub sparsity: f64,
    pub zero_param_ratio: f64,
    /// Payload bytes sent to one client.
    pub bytes_down: u64,
    /// Payload bytes returned by one client.
    pub bytes_up: u64,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    /// Zero unless wall-clock recording is switched on, so that equal seeds
    /// give byte-identical files.
    pub wall_time_s: f64,
}

/// `%.6g`-style formatting: six significant digits, trailing zeros trimmed.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mant));
    }
    let decimals = (5 - exp) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_metrics_to<W: Write>(records: &[RoundRecord], out: W) -> Result<()> {
    if records.is_empty() {
        return Err(FedPruneError::Empty("no records to write".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in records {
        w.write_record([
            r.round.to_string(),
            r.phase.as_str().to_string(),
            format_sig6(r.sparsity),
            format_sig6(r.zero_param_ratio),
            r.bytes_down.to_string(),
            r.bytes_up.to_string(),
            format_sig6(r.train_loss),
            format_sig6(r.eval_accuracy),
            format_sig6(r.wall_time_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metrics(records: &[RoundRecord], path: &Path) -> Result<()> {
    let file = File::create(path)?;
    write_metrics_to(records, file)
}

pub fn metrics_csv_string(records: &[RoundRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_metrics_to(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// One row of the summary: the final state of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub sparsity: f64,
    pub final_accuracy: f64,
    pub final_zero_param_ratio: f64,
    pub total_bytes: u64,
    pub rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(0).max(5);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>9}  {:>10}  {:>12}  {:>6}\n",
            "label", "sparsity", "accuracy", "zero_ratio", "total_bytes", "rounds"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<width$}  {:>8.4}  {:>9.4}  {:>10.4}  {:>12}  {:>6}\n",
                r.label, r.sparsity, r.final_accuracy, r.final_zero_param_ratio, r.total_bytes, r.rounds
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn malformed(path: &Path, what: impl std::fmt::Display) -> FedPruneError {
    FedPruneError::Format(format!("{}: {what}", path.display()))
}

/// Label for a metrics file: its directory name when the file is the
/// conventional `metrics.csv`, otherwise the file stem.
fn label_for(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("run");
    if stem == "metrics" {
        if let Some(dir) = path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()) {
            return dir.to_string();
        }
    }
    stem.to_string()
}

pub fn summarize_csv(path: &Path) -> Result<ReportRow> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| malformed(path, format!("missing column `{name}`")))
    };
    let (c_round, c_s, c_zr, c_down, c_up, c_acc) = (
        col("round")?,
        col("sparsity")?,
        col("zero_param_ratio")?,
        col("bytes_down")?,
        col("bytes_up")?,
        col("eval_accuracy")?,
    );
    let mut row = ReportRow {
        label: label_for(path),
        sparsity: 0.0,
        final_accuracy: 0.0,
        final_zero_param_ratio: 0.0,
        total_bytes: 0,
        rounds: 0,
    };
    let mut seen = false;
    for rec in reader.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| malformed(path, "short row"));
        let num = |i: usize| -> Result<f64> { field(i)?.parse::<f64>().map_err(|e| malformed(path, e)) };
        let int = |i: usize| -> Result<u64> { field(i)?.parse::<u64>().map_err(|e| malformed(path, e)) };
        row.rounds = int(c_round)? as u32;
        row.sparsity = row.sparsity.max(num(c_s)?);
        row.final_zero_param_ratio = num(c_zr)?;
        row.final_accuracy = num(c_acc)?;
        row.total_bytes += int(c_down)? + int(c_up)?;
        seen = true;
    }
    if !seen {
        return Err(malformed(path, "no data rows"));
    }
    Ok(row)
}

/// Summary over one or more metrics files, sorted by sparsity then label.
pub fn report(paths: &[PathBuf]) -> Result<Report> {
    if paths.is_empty() {
        return Err(FedPruneError::Empty("report needs at least one CSV".into()));
    }
    let mut rows = paths.iter().map(|p| summarize_csv(p)).collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.sparsity.total_cmp(&b.sparsity).then_with(|| a.label.cmp(&b.label)));
    Ok(Report { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(0.5), "0.5");
        assert_eq!(format_sig6(0.34375), "0.34375");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(2.0 / 3.0), "0.666667");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-5");
        assert_eq!(format_sig6(0.00001), "1e-5");
        assert_eq!(format_sig6(0.00012345678), "0.000123457");
        assert_eq!(format_sig6(-2.5), "-2.5");
        assert_eq!(format_sig6(999999.7), "1e6");
    }

    fn record(round: u32, s: f64, acc: f64) -> RoundRecord {
        RoundRecord {
            round,
            phase: Phase::Refining,
            sparsity: s,
            zero_param_ratio: s,
            bytes_down: 10,
            bytes_up: 5,
            train_loss: 0.5,
            eval_accuracy: acc,
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn csv_layout() {
        let text = metrics_csv_string(&[record(0, 0.0, 0.25), record(1, 0.5, 0.75)]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines[2], "1,refining,0.5,0.5,10,5,0.5,0.75,0");
        assert!(write_metrics_to(&[], Vec::new()).is_err());
    }

    #[test]
    fn report_sorts_and_totals() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (name, s) in [("b", 0.5), ("a", 0.1)] {
            let sub = dir.path().join(name);
            std::fs::create_dir_all(&sub).unwrap();
            let p = sub.join("metrics.csv");
            write_metrics(&[record(0, 0.0, 0.5), record(1, s, 0.9)], &p).unwrap();
            paths.push(p);
        }
        let rep = report(&paths).unwrap();
        assert_eq!(rep.rows.len(), 2);
        assert_eq!(rep.rows[0].label, "a");
        assert_eq!(rep.rows[1].sparsity, 0.5);
        assert_eq!(rep.rows[0].total_bytes, 30);
        assert_eq!(rep.rows[0].rounds, 1);
        assert!(rep.to_text().contains("accuracy"));
        assert!(rep.to_json().contains("\"final_accuracy\""));
    }

    #[test]
    fn malformed_csv_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "round,sparsity\n1,x\n").unwrap();
        assert!(matches!(report(std::slice::from_ref(&p)), Err(FedPruneError::Format(_))));
        std::fs::write(&p, CSV_COLUMNS.join(",") + "\n").unwrap();
        assert!(report(&[p]).is_err());
        assert!(report(&[]).is_err());
    }
}
