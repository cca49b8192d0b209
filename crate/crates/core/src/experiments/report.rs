use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "epoch,protocol,error_rate,loss,seconds";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    /// `train`, `standard`, `balanced`, `shuffled_balanced` or `diverged`.
    pub protocol: String,
    pub error_rate: f64,
    pub loss: f64,
    pub seconds: f64,
}

/// CSV text with LF endings; error rate and loss use six decimals, seconds three.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.3}\n",
            r.epoch, r.protocol, r.error_rate, r.loss, r.seconds
        ));
    }
    out
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Experiment("metrics CSV header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(n, line)| {
            let bad = || Error::Experiment(format!("metrics CSV line {}: '{line}'", n + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(MetricsRow {
                epoch: f[0].parse().map_err(|_| bad())?,
                protocol: f[1].to_string(),
                error_rate: f[2].parse().map_err(|_| bad())?,
                loss: f[3].parse().map_err(|_| bad())?,
                seconds: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Pretty-printed JSON in struct field order, newline-terminated.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_run_is_header_only() {
        assert_eq!(metrics_csv(&[]), "epoch,protocol,error_rate,loss,seconds\n");
        assert!(parse_metrics_csv(&metrics_csv(&[])).unwrap().is_empty());
    }

    #[test]
    fn roundtrip_and_format() {
        let rows = vec![
            MetricsRow {
                epoch: 3,
                protocol: "standard".into(),
                error_rate: 0.125,
                loss: 0.5,
                seconds: 1.25,
            },
            MetricsRow {
                epoch: 3,
                protocol: "balanced".into(),
                error_rate: 0.0625,
                loss: 0.25,
                seconds: 0.0,
            },
        ];
        let text = metrics_csv(&rows);
        assert!(text.contains("3,standard,0.125000,0.500000,1.250\n"));
        assert!(!text.contains('\r'));
        assert_eq!(parse_metrics_csv(&text).unwrap(), rows);
        assert!(parse_metrics_csv("nope\n").is_err());
    }
}
