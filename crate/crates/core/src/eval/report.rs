use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MmaReport;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub const CSV_HEADER: &str = "angle,threshold,mma,variation,ransac,n_pairs,seed,config_hash";

/// Serializes `report`. JSON holds the whole report; CSV has one row per
/// (variation, angle, threshold).
pub fn emit_report(report: &MmaReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)?;
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut s = String::from(CSV_HEADER);
            s.push('\n');
            for grid in &report.by_variation {
                for (angle, row) in report.angles.iter().zip(&grid.mma) {
                    for (t, m) in report.thresholds.iter().zip(row) {
                        writeln!(
                            s,
                            "{angle},{t},{m},{},{},{},{},{}",
                            grid.variation.name(),
                            report.ransac,
                            grid.n_pairs,
                            report.seed,
                            report.config_hash
                        )
                        .expect("writing to a string");
                    }
                }
            }
            s
        }
    };
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
