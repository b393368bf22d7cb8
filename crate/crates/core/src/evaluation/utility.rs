//! Model-based feature utility: split-gain importance plus correlation
//! screening for redundant columns.

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::modeling::{Model, ModelKind};

/// A pair of encoded columns that move together almost perfectly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundantPair {
    pub a: String,
    pub b: String,
    pub rho: f64,
    /// The lower-importance member, the one feedback may drop.
    pub droppable: String,
}

/// Importance and redundancy of every encoded column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    /// Accumulated squared-error split gain per encoded column.
    pub importances: Vec<(String, f64)>,
    /// Column pairs with |Pearson rho| above 0.95.
    pub redundant_pairs: Vec<RedundantPair>,
}

impl UtilityReport {
    pub fn importance_of(&self, column: &str) -> f64 {
        self.importances
            .iter()
            .find(|(name, _)| name == column)
            .map_or(0.0, |(_, v)| *v)
    }
}

/// Maps an encoded column name back to its source feature: one-hot
/// columns are `feature=value`, numeric columns pass through.
pub fn source_feature(encoded: &str) -> &str {
    encoded.split('=').next().unwrap_or(encoded)
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

const REDUNDANCY_RHO: f64 = 0.95;

/// Reads gains out of a trained tree model and screens the encoded
/// matrix for near-duplicate columns. Constant columns never pair.
pub fn feature_utility(model: &Model, x: &[Vec<f64>]) -> Result<UtilityReport, EvalError> {
    if model.kind() != ModelKind::Gbt {
        return Err(EvalError::NotATreeModel);
    }
    if x.iter().any(|row| row.len() != model.columns.len()) {
        return Err(EvalError::Shape(
            "matrix columns do not match the model schema".into(),
        ));
    }
    let gains = model.importances();
    let importances: Vec<(String, f64)> =
        model.columns.iter().cloned().zip(gains.iter().copied()).collect();
    let cols = model.columns.len();
    let column = |j: usize| -> Vec<f64> { x.iter().map(|row| row[j]).collect() };
    let mut redundant_pairs = Vec::new();
    if !x.is_empty() {
        for i in 0..cols {
            let ci = column(i);
            for j in (i + 1)..cols {
                let Some(rho) = pearson(&ci, &column(j)) else { continue };
                if rho.abs() > REDUNDANCY_RHO {
                    let droppable = if gains[i] < gains[j] {
                        model.columns[i].clone()
                    } else {
                        model.columns[j].clone()
                    };
                    redundant_pairs.push(RedundantPair {
                        a: model.columns[i].clone(),
                        b: model.columns[j].clone(),
                        rho,
                        droppable,
                    });
                }
            }
        }
    }
    Ok(UtilityReport { importances, redundant_pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modeling::{train_gbt, train_linear, GBTParams};

    fn columns(names: &[&str]) -> Vec<String> {
        names.iter().map(|n| n.to_string()).collect()
    }

    /// Deterministic pseudo-noise in [-0.5, 0.5).
    fn wobble(i: usize) -> f64 {
        (((i * 2_654_435_761) % 1000) as f64) / 1000.0 - 0.5
    }

    #[test]
    fn duplicated_column_is_flagged_with_unit_correlation() {
        let x: Vec<Vec<f64>> = (0..20)
            .map(|i| vec![i as f64, i as f64, wobble(i)])
            .collect();
        let y: Vec<f64> = (0..20).map(|i| 3.0 * i as f64).collect();
        let params = GBTParams { n_trees: 20, max_depth: 3, ..GBTParams::default() };
        let model = train_gbt(&x, &y, &columns(&["a", "a_copy", "noise"]), &params).unwrap();
        let report = feature_utility(&model, &x).unwrap();
        let pair = report
            .redundant_pairs
            .iter()
            .find(|p| p.a == "a" && p.b == "a_copy")
            .expect("duplicate columns must pair");
        assert!((pair.rho - 1.0).abs() < 1e-12);
        // Greedy splitting always prefers the earlier tied column, so
        // the copy gathers no gain and is the droppable member.
        assert_eq!(pair.droppable, "a_copy");
    }

    #[test]
    fn unused_column_has_zero_importance() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 7.0]).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let params = GBTParams { n_trees: 10, max_depth: 2, ..GBTParams::default() };
        let model = train_gbt(&x, &y, &columns(&["x", "constant"]), &params).unwrap();
        let report = feature_utility(&model, &x).unwrap();
        assert_eq!(report.importance_of("constant"), 0.0);
        assert!(report.importance_of("x") > 0.0);
        assert!(report.redundant_pairs.is_empty(), "constants never pair");
    }

    #[test]
    fn signal_outranks_noise() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64, wobble(i) * 10.0]).collect();
        let y: Vec<f64> = (0..60).map(|i| 3.0 * i as f64 + wobble(i + 7)).collect();
        let model = train_gbt(&x, &y, &columns(&["signal", "noise"]), &GBTParams::default())
            .unwrap();
        let report = feature_utility(&model, &x).unwrap();
        assert!(report.importance_of("signal") > report.importance_of("noise"));
    }

    #[test]
    fn linear_models_cannot_report_gain() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| 2.0 * i as f64).collect();
        let model = train_linear(&x, &y, &columns(&["x"]), 0.1).unwrap();
        assert!(matches!(
            feature_utility(&model, &x),
            Err(EvalError::NotATreeModel)
        ));
    }

    #[test]
    fn encoded_names_map_back_to_their_source() {
        assert_eq!(source_feature("workers"), "workers");
        assert_eq!(source_feature("instance=m5.xlarge"), "instance");
    }

    #[test]
    fn anticorrelated_columns_also_pair() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, -(i as f64)]).collect();
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let params = GBTParams { n_trees: 5, max_depth: 2, ..GBTParams::default() };
        let model = train_gbt(&x, &y, &columns(&["up", "down"]), &params).unwrap();
        let report = feature_utility(&model, &x).unwrap();
        assert_eq!(report.redundant_pairs.len(), 1);
        assert!((report.redundant_pairs[0].rho + 1.0).abs() < 1e-12);
    }
}
