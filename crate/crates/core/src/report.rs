//! Run reports and method comparison tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_json;
use crate::error::{Error, Result};
use crate::metrics::CommSummary;
use crate::protocol::{ClientDiagnostics, CurvePoint, EvalMetrics, StageTiming};

pub const REPORT_SCHEMA: u32 = 1;

/// Everything a run produced. `config` echoes every effective setting, so a
/// report can be re-run from it alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema: u32,
    pub run_id: String,
    pub method: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub metrics: EvalMetrics,
    pub comm: CommSummary,
    pub timings: Vec<StageTiming>,
    /// Test metrics during end-to-end rounds, when any ran.
    pub curve: Vec<CurvePoint>,
    pub diagnostics: Vec<ClientDiagnostics>,
}

impl RunReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(self, path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let bad = |e: serde_json::Error| Error::invalid(format!("{}: {e}", path.display()));
        let value: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        let schema = value.get("schema").and_then(serde_json::Value::as_u64);
        if schema != Some(u64::from(REPORT_SCHEMA)) {
            return Err(Error::invalid(format!(
                "{}: not a run report with schema {REPORT_SCHEMA}",
                path.display()
            )));
        }
        serde_json::from_value(value).map_err(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub run_id: String,
    pub method: String,
    pub accuracy: f64,
    pub auc: Option<f64>,
    pub comm_times: usize,
    pub comm_mb: f64,
}

pub fn compare_runs(reports: &[RunReport]) -> Vec<CompareRow> {
    reports
        .iter()
        .map(|r| CompareRow {
            run_id: r.run_id.clone(),
            method: r.method.clone(),
            accuracy: r.metrics.accuracy,
            auc: r.metrics.auc,
            comm_times: r.comm.times(),
            comm_mb: r.comm.total_mb,
        })
        .collect()
}

const HEADER: [&str; 6] = [
    "run_id",
    "method",
    "accuracy",
    "auc",
    "comm_times",
    "comm_mb",
];

fn cells(row: &CompareRow) -> [String; 6] {
    [
        row.run_id.clone(),
        row.method.clone(),
        format!("{:.4}", row.accuracy),
        row.auc
            .map_or_else(|| "-".to_owned(), |a| format!("{a:.4}")),
        row.comm_times.to_string(),
        format!("{:.6}", row.comm_mb),
    ]
}

pub fn write_compare_csv(rows: &[CompareRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for row in rows {
        w.write_record(cells(row))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Column-aligned plain-text rendering of the comparison.
pub fn format_table(rows: &[CompareRow]) -> String {
    let body: Vec<[String; 6]> = rows.iter().map(cells).collect();
    let mut widths = HEADER.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |r: &[String]| {
        r.iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_owned()
    };
    let mut out = line(&HEADER.map(str::to_owned));
    out.push('\n');
    for r in &body {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::comm_summary;
    use crate::protocol::{CommLedger, Payload, PayloadRole};

    fn report(method: &str, acc: f64) -> RunReport {
        let mut ledger = CommLedger::new(4);
        for k in 0..2 {
            ledger.upload(k, vec![Payload::new(PayloadRole::RepsOverlap, 1000 * 8)]);
        }
        RunReport {
            schema: REPORT_SCHEMA,
            run_id: format!("{method}-1"),
            method: method.into(),
            seed: 1,
            config: BTreeMap::from([("method".to_owned(), method.to_owned())]),
            metrics: EvalMetrics {
                accuracy: acc,
                auc: Some(0.1 + acc / 3.0),
            },
            comm: comm_summary(&ledger),
            timings: vec![StageTiming {
                stage: "local_ssl".into(),
                seconds: 0.123456789,
            }],
            curve: Vec::new(),
            diagnostics: Vec::new(),
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report("oneshot", 0.7123456789);
        r.write(&path).unwrap();
        assert_eq!(RunReport::read(&path).unwrap(), r);
    }

    #[test]
    fn rejects_other_documents() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        fs::write(&path, "{\"hello\": 1}").unwrap();
        assert!(RunReport::read(&path).is_err());
    }

    #[test]
    fn three_reports_three_rows() {
        let rows = compare_runs(&[
            report("vanilla", 0.5),
            report("oneshot", 0.7),
            report("fewshot", 0.72),
        ]);
        assert_eq!(rows.len(), 3);
        // 2 x 8000 scalars x 4 bytes
        assert_eq!(rows[0].comm_mb, 64_000.0 / 1_048_576.0);
        let table = format_table(&rows);
        assert_eq!(table.lines().count(), 4);
        assert!(table.starts_with("run_id"));
    }
}
