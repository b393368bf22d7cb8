//! Per-feature health signals: coverage, stability across repeat runs of
//! the same job, distribution shape, and shift across time windows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dsl::FeatureValue;
use crate::materializer::RawMatrix;

/// Health of one source feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHealth {
    pub feature: String,
    /// Fraction of rows with a usable value; 1 - missing_rate.
    pub coverage: f64,
    /// Mean coefficient of variation across repeat runs of one job.
    /// Infinity flags variation around a zero mean.
    pub stability_cv: f64,
    /// Fisher moment skewness of the pooled numeric values.
    pub skewness: f64,
    /// Population-stability index between the first and last window,
    /// with ten quantile bins fitted on the first window.
    pub shift_psi: f64,
}

/// Health of every column of a raw matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub features: Vec<FeatureHealth>,
}

impl HealthReport {
    pub fn get(&self, feature: &str) -> Option<&FeatureHealth> {
        self.features.iter().find(|f| f.feature == feature)
    }
}

fn numeric(v: Option<&FeatureValue>) -> Option<f64> {
    match v {
        Some(FeatureValue::Num(n)) => Some(*n),
        Some(FeatureValue::Bool(b)) => Some(if *b { 1.0 } else { 0.0 }),
        _ => None,
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Coefficient of variation with the zero-mean convention: no spread
/// around zero is stable (0), any spread around zero is the sentinel.
fn cv(values: &[f64]) -> f64 {
    let (mean, std) = mean_std(values);
    if mean.abs() < 1e-12 {
        if std < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        std / mean.abs()
    }
}

fn skewness(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    if m2 <= 0.0 {
        0.0
    } else {
        m3 / m2.powf(1.5)
    }
}

/// Ten quantile bin edges (nine cut points) from the reference sample.
fn decile_edges(reference: &[f64]) -> Vec<f64> {
    let mut sorted = reference.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (1..10).map(|j| sorted[j * sorted.len() / 10]).collect()
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.iter().take_while(|e| v > **e).count()
}

/// Population stability index between two samples over shared bins.
/// Identical samples always score exactly zero: both sides receive the
/// same smoothing, so every log-ratio collapses to ln(1).
pub fn shift_psi(reference: &[f64], current: &[f64]) -> f64 {
    if reference.is_empty() || current.is_empty() {
        return 0.0;
    }
    let edges = decile_edges(reference);
    let mut p = [0usize; 10];
    let mut q = [0usize; 10];
    for v in reference {
        p[bin_of(&edges, *v)] += 1;
    }
    for v in current {
        q[bin_of(&edges, *v)] += 1;
    }
    const EPS: f64 = 1e-6;
    let pn = reference.len() as f64 + 10.0 * EPS;
    let qn = current.len() as f64 + 10.0 * EPS;
    (0..10)
        .map(|i| {
            let pi = (p[i] as f64 + EPS) / pn;
            let qi = (q[i] as f64 + EPS) / qn;
            (pi - qi) * (pi / qi).ln()
        })
        .sum()
}

/// Assesses every column of `raw`. `job_of` labels each row with its job
/// signature; repeat runs of one job define the stability groups.
/// `windows` lists row indices per time window in chronological order;
/// shift is measured from the first window to the last.
pub fn feature_health(
    raw: &RawMatrix,
    job_of: &[String],
    windows: &[Vec<usize>],
) -> HealthReport {
    let rows = raw.rows.len().max(1);
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, job) in job_of.iter().enumerate().take(raw.rows.len()) {
        groups.entry(job.as_str()).or_default().push(i);
    }
    let features = raw
        .columns
        .iter()
        .map(|column| {
            let value_at = |i: usize| raw.rows[i].values.iter().find(|(n, _)| n == column);
            let present = raw
                .rows
                .iter()
                .filter(|r| {
                    r.values
                        .iter()
                        .any(|(n, v)| n == column && !v.is_missing())
                })
                .count();
            let pooled: Vec<f64> = (0..raw.rows.len())
                .filter_map(|i| numeric(value_at(i).map(|(_, v)| v)))
                .collect();
            let mut cvs = Vec::new();
            for members in groups.values() {
                let vals: Vec<f64> = members
                    .iter()
                    .filter_map(|&i| numeric(value_at(i).map(|(_, v)| v)))
                    .collect();
                if vals.len() >= 2 {
                    cvs.push(cv(&vals));
                }
            }
            let stability_cv = if cvs.is_empty() {
                0.0
            } else {
                cvs.iter().sum::<f64>() / cvs.len() as f64
            };
            let window_values = |w: &Vec<usize>| -> Vec<f64> {
                w.iter()
                    .filter(|i| **i < raw.rows.len())
                    .filter_map(|&i| numeric(value_at(i).map(|(_, v)| v)))
                    .collect()
            };
            let shift_psi = match (windows.first(), windows.last()) {
                (Some(first), Some(last)) => {
                    shift_psi(&window_values(first), &window_values(last))
                }
                _ => 0.0,
            };
            FeatureHealth {
                feature: column.clone(),
                coverage: present as f64 / rows as f64,
                stability_cv,
                skewness: skewness(&pooled),
                shift_psi,
            }
        })
        .collect();
    HealthReport { features }
}
