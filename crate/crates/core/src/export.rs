//! Result-file export: CSV and JSON with deterministic byte-level output.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};

use crate::harness::{ComparisonReport, SweepReport, TrainReport};
use crate::simenv::LoadTestReport;

/// Output file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Json => "json",
        }
    }
}

/// Rounds to six significant digits; the shortest decimal rendering of the
/// rounded value keeps re-exports byte-identical.
pub fn fmt_sig(x: f64) -> String {
    sig6(x).to_string()
}

fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let digits = 5 - x.abs().log10().floor() as i32;
    let factor = 10f64.powi(digits);
    (x * factor).round() / factor
}

/// A result that knows how to render itself as CSV rows or a JSON document.
pub trait Report {
    fn csv(&self) -> String;
    fn json(&self) -> Value;
}

fn load_test_json(r: &LoadTestReport) -> Value {
    json!({
        "throughput_rps": sig6(r.throughput_rps),
        "mean_latency_ms": sig6(r.mean_latency_ms),
        "p95_latency_ms": sig6(r.p95_latency_ms),
        "success_ratio": sig6(r.success_ratio),
        "issued": r.issued,
        "succeeded": r.succeeded,
        "failed": r.failed,
        "failed_mem": r.failed_mem,
        "failed_timeout": r.failed_timeout,
        "avg_cpu_util": sig6(r.resources.avg_cpu_util),
        "avg_mem_util": sig6(r.resources.avg_mem_util),
    })
}

impl Report for SweepReport {
    fn csv(&self) -> String {
        let mut out = String::from(
            "conc,throughput_rps,mean_latency_ms,p95_latency_ms,success_ratio,issued,succeeded,failed,avg_cpu_util,avg_mem_util\n",
        );
        for level in &self.levels {
            let m = &level.mean;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                level.conc,
                fmt_sig(m.throughput_rps),
                fmt_sig(m.mean_latency_ms),
                fmt_sig(m.p95_latency_ms),
                fmt_sig(m.success_ratio),
                fmt_sig(m.issued),
                fmt_sig(m.succeeded),
                fmt_sig(m.failed),
                fmt_sig(m.avg_cpu_util),
                fmt_sig(m.avg_mem_util),
            ));
        }
        out
    }

    fn json(&self) -> Value {
        json!({
            "best_by": {
                "throughput": self.best_by.throughput,
                "mean_latency": self.best_by.mean_latency,
                "p95_latency": self.best_by.p95_latency,
            },
            "correlations": {
                "throughput_mean_latency": self.correlations.throughput_mean_latency.map(sig6),
                "throughput_p95_latency": self.correlations.throughput_p95_latency.map(sig6),
            },
            "levels": self.levels.iter().map(|level| json!({
                "conc": level.conc,
                "mean": {
                    "throughput_rps": sig6(level.mean.throughput_rps),
                    "mean_latency_ms": sig6(level.mean.mean_latency_ms),
                    "p95_latency_ms": sig6(level.mean.p95_latency_ms),
                    "success_ratio": sig6(level.mean.success_ratio),
                    "issued": sig6(level.mean.issued),
                    "succeeded": sig6(level.mean.succeeded),
                    "failed": sig6(level.mean.failed),
                    "avg_cpu_util": sig6(level.mean.avg_cpu_util),
                    "avg_mem_util": sig6(level.mean.avg_mem_util),
                },
                "reps": level.reps.iter().map(load_test_json).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

impl Report for TrainReport {
    fn csv(&self) -> String {
        let mut out = String::from("iteration,conc,action,throughput_rps,reward,epsilon\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.iteration,
                row.conc,
                row.action,
                fmt_sig(row.throughput_rps),
                fmt_sig(row.reward),
                fmt_sig(row.epsilon),
            ));
        }
        out
    }

    fn json(&self) -> Value {
        json!({
            "modal_conc_last_k": self.modal_conc_last_k,
            "window_k": self.window_k,
            "iterations": self.rows.len(),
            "rows": self.rows.iter().map(|row| json!({
                "iteration": row.iteration,
                "conc": row.conc,
                "action": row.action,
                "throughput_rps": sig6(row.throughput_rps),
                "reward": sig6(row.reward),
                "epsilon": sig6(row.epsilon),
            })).collect::<Vec<_>>(),
        })
    }
}

impl Report for ComparisonReport {
    fn csv(&self) -> String {
        let mut out = String::from(
            "iteration,rl_throughput_rps,rl_avg_throughput_rps,default_throughput_rps,default_avg_throughput_rps\n",
        );
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.iteration,
                fmt_sig(row.rl_throughput_rps),
                fmt_sig(row.rl_avg_throughput_rps),
                fmt_sig(row.default_throughput_rps),
                fmt_sig(row.default_avg_throughput_rps),
            ));
        }
        out
    }

    fn json(&self) -> Value {
        json!({
            "final_rl_avg": sig6(self.final_rl_avg),
            "final_default_avg": sig6(self.final_default_avg),
            "rows": self.rows.iter().map(|row| json!({
                "iteration": row.iteration,
                "rl_throughput_rps": sig6(row.rl_throughput_rps),
                "rl_avg_throughput_rps": sig6(row.rl_avg_throughput_rps),
                "default_throughput_rps": sig6(row.default_throughput_rps),
                "default_avg_throughput_rps": sig6(row.default_avg_throughput_rps),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Renders the report and writes it via a temp file renamed into place, so a
/// failed export never leaves a partial result behind.
pub fn export_report<R: Report + ?Sized>(
    report: &R,
    format: ExportFormat,
    path: &Path,
) -> std::io::Result<()> {
    let body = match format {
        ExportFormat::Csv => report.csv(),
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&report.json())?;
            s.push('\n');
            s
        }
    };
    atomic_write(path, body.as_bytes())
}

/// Writes bytes to `path.tmp`, fsyncs, then renames over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    let mut file = fs::File::create(&tmp)?;
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path)
}
