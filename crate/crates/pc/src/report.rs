//! Evaluation reports on disk: the full report as JSON and one CSV row per
//! (subject, prompt) pair. Missing metrics are empty CSV cells.

use std::path::Path;

use pc_core::evaluation::EvalReport;

use crate::{PcError, PcResult};

pub fn report_json(report: &EvalReport) -> PcResult<Vec<u8>> {
    serde_json::to_vec_pretty(report).map_err(|e| PcError::json("evaluation report", e))
}

pub fn report_csv(report: &EvalReport) -> PcResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &report.rows {
        w.serialize(row)
            .map_err(|e| PcError::Config(format!("csv row for '{}': {e}", row.subject_id)))?;
    }
    w.into_inner().map_err(|e| PcError::Config(format!("csv: {e}")))
}

/// Writes `path` (JSON) and the CSV next to it with a `.csv` extension.
pub fn write_report(report: &EvalReport, path: &Path) -> PcResult<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PcError::io(dir, e))?;
    }
    std::fs::write(path, report_json(report)?).map_err(|e| PcError::io(path, e))?;
    let csv_path = path.with_extension("csv");
    std::fs::write(&csv_path, report_csv(report)?).map_err(|e| PcError::io(&csv_path, e))
}
