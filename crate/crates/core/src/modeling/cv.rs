//! Seeded k-fold cross-validation and grid selection.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    metrics, train_candidate, validate_matrix, CandidateSpec, MetricsReport, ModelError,
};
use crate::seed::rng_for;

/// Mean and population standard deviation of one metric across folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAggregate {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(values: impl Iterator<Item = f64> + Clone) -> MetricAggregate {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MetricAggregate { mean, std: var.sqrt() }
}

/// Cross-validated scores of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub spec: CandidateSpec,
    pub fold_metrics: Vec<MetricsReport>,
    pub mae: MetricAggregate,
    pub mape: MetricAggregate,
    pub rmse: MetricAggregate,
    pub r2: MetricAggregate,
}

/// Full cross-validation sweep over a candidate list, in grid order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub candidates: Vec<CandidateResult>,
}

/// Builds the fold assignment: one seeded shuffle of the row indices,
/// then contiguous folds. The first `rows % k` folds take the extra row.
fn fold_slices(rows: usize, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..rows).collect();
    order.shuffle(&mut rng_for(seed, "cv/shuffle"));
    let base = rows / k;
    let extra = rows % k;
    let mut folds = Vec::with_capacity(k);
    let mut at = 0usize;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        folds.push(order[at..at + size].to_vec());
        at += size;
    }
    folds
}

/// Scores every candidate with the same fold assignment.
pub fn cross_validate(
    x: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    candidates: &[CandidateSpec],
    k: usize,
    seed: u64,
) -> Result<CvReport, ModelError> {
    let (rows, _) = validate_matrix(x, y)?;
    if k < 2 || k > rows {
        return Err(ModelError::BadFolds { rows, k });
    }
    let folds = fold_slices(rows, k, seed);
    let mut results = Vec::with_capacity(candidates.len());
    for spec in candidates {
        let mut fold_metrics = Vec::with_capacity(k);
        for held_out in &folds {
            let hold: std::collections::BTreeSet<usize> = held_out.iter().copied().collect();
            let mut train_x = Vec::with_capacity(rows - held_out.len());
            let mut train_y = Vec::with_capacity(rows - held_out.len());
            for i in 0..rows {
                if !hold.contains(&i) {
                    train_x.push(x[i].clone());
                    train_y.push(y[i]);
                }
            }
            let model = train_candidate(&train_x, &train_y, columns, spec)?;
            let mut test_y = Vec::with_capacity(held_out.len());
            let mut preds = Vec::with_capacity(held_out.len());
            for &i in held_out {
                test_y.push(y[i]);
                preds.push(model.predict(&x[i])?);
            }
            fold_metrics.push(metrics(&test_y, &preds)?);
        }
        results.push(CandidateResult {
            spec: spec.clone(),
            mae: aggregate(fold_metrics.iter().map(|m| m.mae)),
            mape: aggregate(fold_metrics.iter().map(|m| m.mape)),
            rmse: aggregate(fold_metrics.iter().map(|m| m.rmse)),
            r2: aggregate(fold_metrics.iter().map(|m| m.r2)),
            fold_metrics,
        });
    }
    Ok(CvReport { k, seed, candidates: results })
}

/// Picks the candidate with the lowest mean MAE; ties go to the earlier
/// grid position. Returns the index into `report.candidates`.
pub fn select_model(report: &CvReport) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, cand) in report.candidates.iter().enumerate() {
        let score = cand.mae.mean;
        if best.map_or(true, |(_, b)| score < b) {
            best = Some((i, score));
        }
    }
    best.map(|(i, _)| i)
}
