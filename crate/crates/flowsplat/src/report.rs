//! Training logs and evaluation reports on disk.
//!
//! * TrainLog: CSV with one row per iteration (`iteration, motion, ns, div,
//!   boundary, physics, total, lr, elapsed_ms`).
//! * EvalReport: CSV with one row per frame, the run-level metrics repeated
//!   on every row, or JSON lines with one whole report per line.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use flowsplat_core::metrics::EvalReport;
use flowsplat_core::training::{LossReport, TrainLog};

use crate::{FormatError, Result};

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &log.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_train_log(path: &Path) -> Result<Vec<LossReport>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<LossReport>, _>>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub psnr_fluid: f64,
    pub ssim_fluid: f64,
    pub epe: f64,
    pub l1_component: f64,
    pub l1_vector: f64,
    pub mean_abs_divergence: f64,
    pub boundary_violation_rate: f64,
    pub runtime_ms: f64,
}

pub fn eval_rows(report: &EvalReport) -> Vec<EvalRow> {
    (0..report.psnr.len())
        .map(|i| EvalRow {
            frame: i,
            psnr: report.psnr[i],
            ssim: report.ssim[i],
            psnr_fluid: report.psnr_fluid[i],
            ssim_fluid: report.ssim_fluid[i],
            epe: report.epe,
            l1_component: report.l1_component,
            l1_vector: report.l1_vector,
            mean_abs_divergence: report.mean_abs_divergence,
            boundary_violation_rate: report.boundary_violation_rate,
            runtime_ms: report.runtime_ms,
        })
        .collect()
}

pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in eval_rows(report) {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

pub fn read_eval_csv(path: &Path) -> Result<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<EvalRow>, _>>()?)
}

/// Appends one JSON line.
pub fn append_eval_jsonl(path: &Path, report: &EvalReport) -> Result<()> {
    let mut line = serde_json::to_string(report)?;
    line.push('\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| FormatError::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| FormatError::io(path, e))
}

pub fn read_eval_jsonl(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FormatError::from))
        .collect()
}

/// Writes JSON lines for `.jsonl`/`.json` paths, CSV otherwise.
pub fn write_eval(path: &Path, report: &EvalReport) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => append_eval_jsonl(path, report),
        _ => write_eval_csv(path, report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        EvalReport {
            psnr: vec![99.0, 31.25],
            ssim: vec![1.0, 0.875],
            psnr_fluid: vec![99.0, 33.5],
            ssim_fluid: vec![1.0, 0.9],
            epe: 0.0123,
            l1_component: 0.004,
            l1_vector: 0.012,
            mean_abs_divergence: 1.0 / 3.0,
            boundary_violation_rate: 0.0,
            runtime_ms: 0.0,
        }
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        append_eval_jsonl(&p, &report()).unwrap();
        append_eval_jsonl(&p, &report()).unwrap();
        assert_eq!(read_eval_jsonl(&p).unwrap(), vec![report(), report()]);
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_eval(&p, &report()).unwrap();
        let rows = read_eval_csv(&p).unwrap();
        assert_eq!(rows, eval_rows(&report()));
        assert_eq!(rows[1].psnr, 31.25);
        assert_eq!(rows[1].mean_abs_divergence, 1.0 / 3.0);
    }

    #[test]
    fn train_log_round_trip() {
        let rows: Vec<LossReport> = (0..3)
            .map(|i| LossReport {
                iteration: i,
                motion: 1.0 / (i + 1) as f64,
                ns: 0.1,
                div: 0.2,
                boundary: 0.0,
                physics: 0.3,
                total: 1.3,
                lr: 1e-3,
                elapsed_ms: 0.0,
            })
            .collect();
        let log = TrainLog {
            rows: rows.clone(),
            seed: 0,
            config_hash: 1,
            wall_clock_ms: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.csv");
        write_train_log(&p, &log).unwrap();
        assert_eq!(read_train_log(&p).unwrap(), rows);
        let head = fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("iteration,motion,ns,div,boundary,physics,total,lr,elapsed_ms"));
    }
}
