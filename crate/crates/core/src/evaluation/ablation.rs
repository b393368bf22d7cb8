//! Group ablations: retrain without one feature group at a time, under
//! identical folds and seeds, and report the metric deltas.

use serde::{Deserialize, Serialize};

use super::utility::source_feature;
use super::EvalError;
use crate::modeling::{cross_validate, CandidateSpec};

/// Cross-validated metric movement caused by removing one group.
/// Deltas are without-minus-baseline, so a positive `delta_mae` and a
/// negative `delta_r2` both mean the group was pulling its weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupDelta {
    pub group: String,
    pub removed_columns: usize,
    pub delta_mae: f64,
    pub delta_rmse: f64,
    pub delta_r2: f64,
}

/// Baseline scores plus one delta row per ablated group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub baseline_mae: f64,
    pub baseline_rmse: f64,
    pub baseline_r2: f64,
    pub groups: Vec<GroupDelta>,
}

impl AblationReport {
    pub fn get(&self, group: &str) -> Option<&GroupDelta> {
        self.groups.iter().find(|g| g.group == group)
    }
}

/// Cross-validates the full matrix, then once more per group with that
/// group's columns removed. `groups` name source features; every encoded
/// column of a named feature is removed with it.
pub fn ablation(
    x: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    groups: &[(String, Vec<String>)],
    candidate: &CandidateSpec,
    k: usize,
    seed: u64,
) -> Result<AblationReport, EvalError> {
    let candidates = [candidate.clone()];
    let baseline = cross_validate(x, y, columns, &candidates, k, seed)?;
    let base = &baseline.candidates[0];
    let mut deltas = Vec::new();
    for (group, members) in groups {
        let keep: Vec<usize> = (0..columns.len())
            .filter(|&j| !members.iter().any(|m| m == source_feature(&columns[j])))
            .collect();
        if keep.is_empty() {
            return Err(EvalError::Shape(format!(
                "ablating group {group} would remove every column"
            )));
        }
        let removed_columns = columns.len() - keep.len();
        if removed_columns == 0 {
            deltas.push(GroupDelta {
                group: group.clone(),
                removed_columns: 0,
                delta_mae: 0.0,
                delta_rmse: 0.0,
                delta_r2: 0.0,
            });
            continue;
        }
        let sub_x: Vec<Vec<f64>> = x
            .iter()
            .map(|row| keep.iter().map(|&j| row[j]).collect())
            .collect();
        let sub_cols: Vec<String> = keep.iter().map(|&j| columns[j].clone()).collect();
        let without = cross_validate(&sub_x, y, &sub_cols, &candidates, k, seed)?;
        let w = &without.candidates[0];
        deltas.push(GroupDelta {
            group: group.clone(),
            removed_columns,
            delta_mae: w.mae.mean - base.mae.mean,
            delta_rmse: w.rmse.mean - base.rmse.mean,
            delta_r2: w.r2.mean - base.r2.mean,
        });
    }
    Ok(AblationReport {
        baseline_mae: base.mae.mean,
        baseline_rmse: base.rmse.mean,
        baseline_r2: base.r2.mean,
        groups: deltas,
    })
}
