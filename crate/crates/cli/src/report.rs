//! Evaluation reports (CSV and JSON) and sweep heatmaps.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io, CliError};

/// One (configuration, OOD dataset) evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub config: String,
    pub ood: String,
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
    pub fpr95: f64,
    pub mean: f64,
    pub n_id: usize,
    pub n_ood: usize,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "config,ood,auroc,auprc,fpr80,fpr95,mean,n_id,n_ood,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataProvenance {
    pub name: String,
    pub sha256: String,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub checkpoint_sha256: String,
    pub id: DataProvenance,
    pub ood: Vec<DataProvenance>,
    pub k: usize,
    pub importance_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub orientation: crate::config::Orientation,
    pub rng: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub rows: Vec<ReportRow>,
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn write_report_csv(rows: &[ReportRow], path: &Path) -> Result<(), CliError> {
    let text = if rows.is_empty() { format!("{CSV_HEADER}\n") } else { csv_string(rows)? };
    fs::write(path, text).map_err(io(path))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize().collect::<Result<_, _>>().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Seed-averaged metrics for one OOD dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub ood: String,
    pub auroc: f64,
    pub auprc: f64,
    pub fpr80: f64,
    pub fpr95: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapRow {
    pub config: String,
    pub ratio: Option<f64>,
    pub cells: Vec<HeatmapCell>,
    /// Mean of the cells' normalized means.
    pub mean: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub config: String,
    pub seed: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub id: String,
    pub rows: Vec<HeatmapRow>,
    pub r_star: Option<f64>,
    pub failures: Vec<CellFailure>,
}

impl Heatmap {
    /// Rows are configurations; columns are metric x OOD dataset plus the
    /// overall normalized mean.
    pub fn to_csv(&self) -> String {
        let oods: Vec<&str> = self.rows.first().map(|r| r.cells.iter().map(|c| c.ood.as_str()).collect()).unwrap_or_default();
        let mut header = vec!["config".to_string(), "ratio".to_string()];
        for o in &oods {
            for m in ["auroc", "auprc", "fpr80", "fpr95", "mean"] {
                header.push(format!("{o}_{m}"));
            }
        }
        header.extend(["mean".to_string(), "seeds".to_string()]);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.config.clone(), r.ratio.map(|v| v.to_string()).unwrap_or_default()];
            for c in &r.cells {
                rec.extend([c.auroc, c.auprc, c.fpr80, c.fpr95, c.mean].iter().map(f64::to_string));
            }
            rec.extend([r.mean.to_string(), r.seeds.to_string()]);
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}
