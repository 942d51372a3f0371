//! File outputs: metrics streams and CSV summaries with fixed headers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::gradcheck::CheckOutcome;
use crate::memory::ReductionReport;
use crate::sim::{RoundMetrics, Summary};

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Io(format!("{}: {e}", path.display()))
}

/// Appends one JSON record per line.
pub struct JsonlWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(Self {
            out: create(path)?,
            path: path.to_path_buf(),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::Io(format!("{}: {e}", self.path.display())))?;
        self.out.write_all(b"\n")?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = JsonlWriter::create(path)?;
    for r in records {
        w.write(r)?;
    }
    w.finish()
}

/// One row of `summary.csv` / `compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub mode: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_accuracy: f64,
    pub mean_last10_accuracy: f64,
    pub peak_memory_bytes: u64,
    pub lambda1_max: f64,
    pub lambda2_max: f64,
    pub boundary_width: usize,
}

impl SummaryRow {
    pub fn new(variant: &str, cfg: &crate::config::ExperimentConfig, s: &Summary) -> Self {
        let mode = serde_json::to_value(cfg.plan.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        Self {
            variant: variant.to_string(),
            mode,
            seed: cfg.seed,
            rounds: s.rounds,
            final_accuracy: s.final_accuracy,
            mean_last10_accuracy: s.mean_last10_accuracy,
            peak_memory_bytes: s.peak_memory_bytes,
            lambda1_max: cfg.curriculum.lambda1_max,
            lambda2_max: cfg.curriculum.lambda2_max,
            boundary_width: cfg.plan.boundary_width,
        }
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PlaneRow {
    pub round: usize,
    pub block: usize,
    pub nhsic_x: f64,
    pub nhsic_y: f64,
}

pub fn plane_rows(metrics: &[RoundMetrics]) -> Vec<PlaneRow> {
    metrics
        .iter()
        .flat_map(|m| {
            m.nhsic_plane.iter().map(move |p| PlaneRow {
                round: m.round,
                block: p.block,
                nhsic_x: p.nhsic_x,
                nhsic_y: p.nhsic_y,
            })
        })
        .collect()
}

pub fn write_plane_csv(path: &Path, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in plane_rows(metrics) {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MemRow {
    pub stage: usize,
    pub weights_bytes: u64,
    pub grads_bytes: u64,
    pub optimizer_bytes: u64,
    pub activations_bytes: u64,
    pub total_bytes: u64,
    pub reduction_pct: f64,
}

pub fn mem_rows(report: &ReductionReport) -> Vec<MemRow> {
    report
        .stages
        .iter()
        .map(|s| MemRow {
            stage: s.stage,
            weights_bytes: s.estimate.weights_bytes,
            grads_bytes: s.estimate.grads_bytes,
            optimizer_bytes: s.estimate.optimizer_bytes,
            activations_bytes: s.estimate.activations_bytes,
            total_bytes: s.estimate.total_bytes,
            reduction_pct: s.reduction_pct,
        })
        .collect()
}

pub fn write_mem_csv(path: &Path, report: &ReductionReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in mem_rows(report) {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush()?;
    Ok(())
}

/// Prints one line per check; returns whether every check passed.
pub fn grad_check_report(outcomes: &[CheckOutcome], out: &mut impl Write) -> std::io::Result<bool> {
    for o in outcomes {
        writeln!(out, "{o}")?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    writeln!(out, "{} checks, {failed} failed", outcomes.len())?;
    Ok(failed == 0)
}
