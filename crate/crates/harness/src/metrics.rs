use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::write_atomic;

pub const METRICS_HEADER: &str = "epoch,presentations,train_loss,train_err_pct,test_err_pct,wall_s";

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub presentations: u64,
    pub train_loss: f64,
    pub train_err_pct: f64,
    /// Absent on epochs where the test split was not evaluated.
    pub test_err_pct: Option<f64>,
    pub wall_s: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let test = self.test_err_pct.map(|e| format!("{e:.4}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{:.4},{},{:.3}",
            self.epoch, self.presentations, self.train_loss, self.train_err_pct, test, self.wall_s
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    write_atomic(path, to_csv(rows).as_bytes())
}
