//! Per-round metrics, the run summary, and their on-disk formats.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::SimConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Mean test accuracy of the standard devices' aggregated models.
    pub mean_accuracy: f64,
    /// Per standard device, in index order, joined with ';'.
    pub device_accuracy: String,
    pub detection_tp: usize,
    pub detection_fp: usize,
    pub detection_fn: usize,
    /// (honest receiver, Byzantine sender) pairs where the sender had the
    /// largest statistic and was flagged.
    pub byzantine_max_flagged: usize,
    pub byzantine_observations: usize,
    /// Some pair was observed and every one of them was a flagged maximum.
    pub byzantine_round_ok: bool,
    /// ξ of the round's aggregation matrix restricted to standard devices.
    pub xi: f64,
    pub security_violations: usize,
    pub privacy_violations: usize,
    /// Exposed (device, curious neighbor) pairs.
    pub exposures: usize,
    pub links: usize,
    pub mean_degree: f64,
    pub total_energy_j: f64,
    pub max_delay_s: f64,
    pub byzantine_weight_mean: f64,
    pub byzantine_weight_max: f64,
    /// NaN when no gap was measurable.
    pub median_h: f64,
    pub disagreement: f64,
    pub reward: f64,
}

/// CSV header, in field order.
pub const METRICS_HEADER: [&str; 22] = [
    "round",
    "mean_accuracy",
    "device_accuracy",
    "detection_tp",
    "detection_fp",
    "detection_fn",
    "byzantine_max_flagged",
    "byzantine_observations",
    "byzantine_round_ok",
    "xi",
    "security_violations",
    "privacy_violations",
    "exposures",
    "links",
    "mean_degree",
    "total_energy_j",
    "max_delay_s",
    "byzantine_weight_mean",
    "byzantine_weight_max",
    "median_h",
    "disagreement",
    "reward",
];

fn header() -> &'static [&'static str] {
    &METRICS_HEADER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub rounds: usize,
    pub config: SimConfig,
    pub final_mean_accuracy: Option<f64>,
    pub mean_xi: Option<f64>,
    pub total_security_violations: usize,
    pub total_privacy_violations: usize,
    pub total_exposures: usize,
    pub total_energy_j: f64,
    pub max_delay_s: f64,
    pub detection_tp: usize,
    pub detection_fp: usize,
    pub detection_fn: usize,
    pub final_byzantine_weight_max: Option<f64>,
    pub median_h: Option<f64>,
}

/// Top-level keys of the JSON summary.
pub const SUMMARY_FIELDS: [&str; 15] = [
    "seed",
    "rounds",
    "config",
    "final_mean_accuracy",
    "mean_xi",
    "total_security_violations",
    "total_privacy_violations",
    "total_exposures",
    "total_energy_j",
    "max_delay_s",
    "detection_tp",
    "detection_fp",
    "detection_fn",
    "final_byzantine_weight_max",
    "median_h",
];

impl RunSummary {
    pub fn from_metrics(cfg: &SimConfig, metrics: &[RoundMetrics], h_values: &[f64]) -> Self {
        let last = metrics.last();
        Self {
            seed: cfg.seed,
            rounds: metrics.len(),
            config: cfg.clone(),
            final_mean_accuracy: last.map(|m| m.mean_accuracy),
            mean_xi: (!metrics.is_empty()).then(|| metrics.iter().map(|m| m.xi).sum::<f64>() / metrics.len() as f64),
            total_security_violations: metrics.iter().map(|m| m.security_violations).sum(),
            total_privacy_violations: metrics.iter().map(|m| m.privacy_violations).sum(),
            total_exposures: metrics.iter().map(|m| m.exposures).sum(),
            total_energy_j: metrics.iter().map(|m| m.total_energy_j).sum(),
            max_delay_s: metrics.iter().map(|m| m.max_delay_s).fold(0.0, f64::max),
            detection_tp: metrics.iter().map(|m| m.detection_tp).sum(),
            detection_fp: metrics.iter().map(|m| m.detection_fp).sum(),
            detection_fn: metrics.iter().map(|m| m.detection_fn).sum(),
            final_byzantine_weight_max: last.map(|m| m.byzantine_weight_max),
            median_h: (!h_values.is_empty()).then(|| crate::threat::median(h_values)),
        }
    }
}

pub fn write_csv<W: Write>(out: W, metrics: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header())?;
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if found != header() {
        return Err(Error::Io(format!("unexpected metrics header in {}", path.display())));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Output files of [`emit_metrics`].
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<stem>.csv` and `<stem>.json` under `dir`, creating it if needed.
pub fn emit_metrics(dir: &Path, stem: &str, metrics: &[RoundMetrics], summary: &RunSummary) -> Result<MetricsFiles> {
    std::fs::create_dir_all(dir)?;
    let files = MetricsFiles {
        csv: dir.join(format!("{stem}.csv")),
        summary: dir.join(format!("{stem}.json")),
    };
    write_csv(File::create(&files.csv)?, metrics)?;
    let mut json = serde_json::to_string_pretty(summary).map_err(|e| Error::Io(e.to_string()))?;
    json.push('\n');
    std::fs::write(&files.summary, json)?;
    Ok(files)
}
