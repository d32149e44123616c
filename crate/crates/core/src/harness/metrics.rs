//! Metrics CSV and sample-quality distances.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 6] = ["experiment", "S", "policy", "metric", "value", "seconds"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub experiment: String,
    #[serde(rename = "S")]
    pub s: usize,
    pub policy: String,
    pub metric: String,
    pub value: f64,
    pub seconds: f64,
}

/// Appends rows, writing the header only when the file is new or empty.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(Error::Format(format!("unexpected columns {headers:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(e.to_string())))
        .collect()
}

fn mean_pairwise_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let total: f64 = a
        .rows()
        .into_iter()
        .map(|ra| {
            b.rows()
                .into_iter()
                .map(|rb| ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .sum::<f64>()
        })
        .sum();
    total / (a.nrows() * b.nrows()).max(1) as f64
}

/// Energy distance `2E‖X − Y‖ − E‖X − X'‖ − E‖Y − Y'‖` between two sample
/// sets (V-statistic, so it is zero for identical sets and never negative).
pub fn energy_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    2.0 * mean_pairwise_distance(a, b) - mean_pairwise_distance(a, a) - mean_pairwise_distance(b, b)
}

/// Least-squares line `y = slope·x + intercept` and its R².
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::param("a linear fit needs at least two paired points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 {
        return Err(Error::param("x values are all equal"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - intercept).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r_squared = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LinearFit { slope, intercept, r_squared })
}
