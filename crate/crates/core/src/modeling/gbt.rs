//! Gradient-boosted regression trees with exact greedy splits.
//!
//! Squared-error boosting: each round fits a depth-bounded tree to the
//! current residuals, leaves predict the mean residual of their region,
//! and predictions accumulate with shrinkage. There is no row or column
//! subsampling, and all tie-breaks are fixed (lower feature index, then
//! lower threshold), so training is deterministic by construction.

use serde::{Deserialize, Serialize};

use super::{data_hash, validate_matrix, GBTParams, Model, ModelError, ModelPayload};

/// One node of a serialized tree. Internal nodes route on
/// `row[feature] <= threshold`; the threshold is the largest training
/// value sent left, so the training partition is reproduced exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub feature: usize,
    pub threshold: f64,
    pub left: usize,
    pub right: usize,
    pub value: f64,
    pub is_leaf: bool,
}

/// A regression tree as an explicit node list; the root is node 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    /// Raw leaf value for one row, before shrinkage.
    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            let node = &self.nodes[at];
            if node.is_leaf {
                return node.value;
            }
            at = if row[node.feature] <= node.threshold { node.left } else { node.right };
        }
    }

    /// Longest root-to-leaf path, counted in splits.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            let node = &nodes[at];
            if node.is_leaf {
                0
            } else {
                1 + walk(nodes, node.left).max(walk(nodes, node.right))
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Trained boosted ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub base_score: f64,
    pub trees: Vec<Tree>,
    pub params: GBTParams,
    /// Accumulated squared-error gain per column.
    pub importances: Vec<f64>,
    /// Sum of all split gains; importances sum to this.
    pub total_gain: f64,
}

impl GbtModel {
    pub fn predict(&self, row: &[f64]) -> f64 {
        let boost: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        self.base_score + self.params.learning_rate * boost
    }
}

/// Per-node working set: member indices kept sorted per feature, so each
/// split is a stable partition and no re-sorting ever happens.
struct NodeSet {
    per_feature: Vec<Vec<usize>>,
}

impl NodeSet {
    fn len(&self) -> usize {
        self.per_feature.first().map_or(0, Vec::len)
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    residual: &'a [f64],
    params: &'a GBTParams,
    nodes: Vec<TreeNode>,
    importances: Vec<f64>,
    total_gain: f64,
}

/// Minimum accepted split gain; blocks numerically-zero splits.
const GAIN_FLOOR: f64 = 1e-12;

impl Builder<'_> {
    fn leaf(&mut self, set: &NodeSet) -> usize {
        let members = &set.per_feature[0];
        let mean = members.iter().map(|&i| self.residual[i]).sum::<f64>() / members.len() as f64;
        self.nodes.push(TreeNode {
            feature: 0,
            threshold: 0.0,
            left: 0,
            right: 0,
            value: mean,
            is_leaf: true,
        });
        self.nodes.len() - 1
    }

    /// Exact greedy search: for each feature, sweep the sorted members
    /// accumulating prefix sums; candidate boundaries sit between
    /// distinct consecutive values. Gain is the variance-reduction form
    /// `S_L^2/n_L + S_R^2/n_R - S_P^2/n_P`, which orders splits
    /// identically to the squared-error decrease.
    fn best_split(&self, set: &NodeSet) -> Option<(usize, f64, f64)> {
        let n = set.len();
        let min_leaf = self.params.min_samples_leaf;
        let total: f64 = set.per_feature[0].iter().map(|&i| self.residual[i]).sum();
        let parent_score = total * total / n as f64;
        let mut best: Option<(usize, f64, f64)> = None;
        for (feature, order) in set.per_feature.iter().enumerate() {
            let mut left_sum = 0.0;
            for (pos, &idx) in order.iter().enumerate().take(n - 1) {
                left_sum += self.residual[idx];
                let here = self.x[idx][feature];
                let next = self.x[order[pos + 1]][feature];
                if here == next {
                    continue;
                }
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < min_leaf || n_right < min_leaf {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / n_right as f64
                    - parent_score;
                if gain > best.map_or(GAIN_FLOOR, |(_, _, g)| g) {
                    best = Some((feature, here, gain));
                }
            }
        }
        best
    }

    fn build(&mut self, set: NodeSet, depth: usize) -> usize {
        if depth >= self.params.max_depth || set.len() < 2 * self.params.min_samples_leaf {
            return self.leaf(&set);
        }
        let Some((feature, threshold, gain)) = self.best_split(&set) else {
            return self.leaf(&set);
        };
        self.importances[feature] += gain;
        self.total_gain += gain;
        let mut left = NodeSet { per_feature: Vec::with_capacity(set.per_feature.len()) };
        let mut right = NodeSet { per_feature: Vec::with_capacity(set.per_feature.len()) };
        for order in &set.per_feature {
            let (l, r): (Vec<usize>, Vec<usize>) =
                order.iter().copied().partition(|&i| self.x[i][feature] <= threshold);
            left.per_feature.push(l);
            right.per_feature.push(r);
        }
        let slot = self.nodes.len();
        self.nodes.push(TreeNode {
            feature,
            threshold,
            left: 0,
            right: 0,
            value: 0.0,
            is_leaf: false,
        });
        let left_id = self.build(left, depth + 1);
        let right_id = self.build(right, depth + 1);
        self.nodes[slot].left = left_id;
        self.nodes[slot].right = right_id;
        slot
    }
}

/// Trains a boosted-tree model. Requires at least `2 * min_samples_leaf`
/// rows so the very first split is feasible in principle.
pub fn train_gbt(
    x: &[Vec<f64>],
    y: &[f64],
    columns: &[String],
    params: &GBTParams,
) -> Result<Model, ModelError> {
    let (rows, cols) = validate_matrix(x, y)?;
    if params.n_trees == 0 {
        return Err(ModelError::BadParams("n_trees must be at least 1".into()));
    }
    if params.max_depth == 0 {
        return Err(ModelError::BadParams("max_depth must be at least 1".into()));
    }
    if params.min_samples_leaf == 0 {
        return Err(ModelError::BadParams("min_samples_leaf must be at least 1".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) {
        return Err(ModelError::BadParams(format!(
            "learning_rate {} outside (0, 1]",
            params.learning_rate
        )));
    }
    if rows < 2 * params.min_samples_leaf {
        return Err(ModelError::TooFewRows { rows, required: 2 * params.min_samples_leaf });
    }

    let base_score = y.iter().sum::<f64>() / rows as f64;
    let mut residual: Vec<f64> = y.iter().map(|v| v - base_score).collect();

    // One global presort per feature; ties order by row index.
    let root_order: Vec<Vec<usize>> = (0..cols)
        .map(|j| {
            let mut idx: Vec<usize> = (0..rows).collect();
            idx.sort_by(|&a, &b| x[a][j].partial_cmp(&x[b][j]).unwrap().then(a.cmp(&b)));
            idx
        })
        .collect();

    let mut trees = Vec::with_capacity(params.n_trees);
    let mut importances = vec![0.0; cols];
    let mut total_gain = 0.0;
    for _ in 0..params.n_trees {
        let mut builder = Builder {
            x,
            residual: &residual,
            params,
            nodes: Vec::new(),
            importances: vec![0.0; cols],
            total_gain: 0.0,
        };
        let root = NodeSet { per_feature: root_order.clone() };
        builder.build(root, 0);
        for (acc, g) in importances.iter_mut().zip(&builder.importances) {
            *acc += g;
        }
        total_gain += builder.total_gain;
        let tree = Tree { nodes: builder.nodes };
        for (ri, row) in residual.iter_mut().zip(x) {
            *ri -= params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
    }

    Ok(Model {
        columns: columns.to_vec(),
        payload: ModelPayload::Gbt(GbtModel {
            base_score,
            trees,
            params: params.clone(),
            importances,
            total_gain,
        }),
        seed: params.seed,
        data_hash: data_hash(x, y),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modeling::metrics;

    fn cols(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn gbt_of(model: &Model) -> &GbtModel {
        match &model.payload {
            ModelPayload::Gbt(m) => m,
            _ => panic!("expected a tree model"),
        }
    }

    /// Cheap deterministic pseudo-noise for test fixtures.
    fn wobble(i: usize) -> f64 {
        ((i as f64 * 12.9898).sin() * 43758.5453).fract()
    }

    #[test]
    fn constant_labels_produce_the_base_score_only() {
        let x: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64]).collect();
        let y = vec![7.0; 8];
        let model = train_gbt(&x, &y, &cols(1), &GBTParams::default()).unwrap();
        let m = gbt_of(&model);
        assert_eq!(m.base_score, 7.0);
        assert_eq!(m.total_gain, 0.0);
        assert!(m.importances.iter().all(|&g| g == 0.0));
        assert_eq!(model.predict(&[3.5]).unwrap(), 7.0);
    }

    #[test]
    fn fits_a_line_to_high_r2() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..40).map(|i| 3.0 * i as f64).collect();
        let params = GBTParams { min_samples_leaf: 1, ..GBTParams::default() };
        let model = train_gbt(&x, &y, &cols(1), &params).unwrap();
        let preds = model.predict_rows(&x).unwrap();
        let report = metrics(&y, &preds).unwrap();
        assert!(report.r2 >= 0.99, "train r2 {}", report.r2);
    }

    #[test]
    fn training_mse_never_increases_across_rounds() {
        let x: Vec<Vec<f64>> = (0..60).map(|i| vec![i as f64, wobble(i)]).collect();
        let y: Vec<f64> = (0..60)
            .map(|i| 2.0 * (i as f64).sqrt() + 5.0 * wobble(i + 1000))
            .collect();
        let params = GBTParams { n_trees: 80, max_depth: 3, ..GBTParams::default() };
        let model = train_gbt(&x, &y, &cols(2), &params).unwrap();
        let m = gbt_of(&model);
        let mut f = vec![m.base_score; y.len()];
        let mse = |f: &[f64]| -> f64 {
            f.iter().zip(&y).map(|(fi, yi)| (fi - yi).powi(2)).sum::<f64>() / y.len() as f64
        };
        let mut last = mse(&f);
        for tree in &m.trees {
            for (fi, row) in f.iter_mut().zip(&x) {
                *fi += m.params.learning_rate * tree.predict(row);
            }
            let cur = mse(&f);
            assert!(cur <= last + 1e-9, "round increased mse: {cur} > {last}");
            last = cur;
        }
    }

    #[test]
    fn importances_are_nonnegative_and_sum_to_total_gain() {
        let x: Vec<Vec<f64>> = (0..50)
            .map(|i| vec![i as f64, wobble(i), (i % 7) as f64])
            .collect();
        let y: Vec<f64> = x.iter().map(|r| 10.0 * r[0] + r[2]).collect();
        let model = train_gbt(&x, &y, &cols(3), &GBTParams::default()).unwrap();
        let m = gbt_of(&model);
        assert!(m.importances.iter().all(|&g| g >= 0.0));
        let sum: f64 = m.importances.iter().sum();
        assert!((sum - m.total_gain).abs() <= 1e-6 * m.total_gain.max(1.0));
        assert!(m.total_gain > 0.0);
        // The dominant driver collects the dominant share of the gain.
        assert!(m.importances[0] > m.importances[1]);
        assert!(m.importances[0] > m.importances[2]);
    }

    #[test]
    fn constant_feature_earns_zero_importance() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![4.0, i as f64]).collect();
        let y: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let model = train_gbt(&x, &y, &cols(2), &GBTParams::default()).unwrap();
        let m = gbt_of(&model);
        assert_eq!(m.importances[0], 0.0);
        assert!(m.importances[1] > 0.0);
    }

    #[test]
    fn tie_breaks_prefer_the_lower_feature_index() {
        // Two identical columns: every split could use either, so the
        // duplicate at index 1 must never be chosen.
        let x: Vec<Vec<f64>> = (0..24).map(|i| vec![i as f64, i as f64]).collect();
        let y: Vec<f64> = (0..24).map(|i| (i * i) as f64).collect();
        let model = train_gbt(&x, &y, &cols(2), &GBTParams::default()).unwrap();
        let m = gbt_of(&model);
        assert!(m.importances[0] > 0.0);
        assert_eq!(m.importances[1], 0.0);
    }

    #[test]
    fn retraining_reproduces_the_model_exactly() {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![wobble(i), wobble(i + 99)]).collect();
        let y: Vec<f64> = (0..40).map(|i| wobble(i + 7) * 10.0).collect();
        let a = train_gbt(&x, &y, &cols(2), &GBTParams::default()).unwrap();
        let b = train_gbt(&x, &y, &cols(2), &GBTParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn depth_and_leaf_size_limits_hold() {
        let params = GBTParams {
            n_trees: 30,
            max_depth: 4,
            min_samples_leaf: 5,
            ..GBTParams::default()
        };
        let x: Vec<Vec<f64>> = (0..64).map(|i| vec![i as f64, wobble(i)]).collect();
        let y: Vec<f64> = (0..64).map(|i| wobble(i + 31) * 100.0).collect();
        let model = train_gbt(&x, &y, &cols(2), &params).unwrap();
        let m = gbt_of(&model);
        for tree in &m.trees {
            assert!(tree.depth() <= 4);
            // Replay training rows through the tree and count per leaf.
            let mut counts = vec![0usize; tree.nodes.len()];
            for row in &x {
                let mut at = 0usize;
                while !tree.nodes[at].is_leaf {
                    let node = &tree.nodes[at];
                    at = if row[node.feature] <= node.threshold { node.left } else { node.right };
                }
                counts[at] += 1;
            }
            for (id, node) in tree.nodes.iter().enumerate() {
                if node.is_leaf {
                    assert!(counts[id] >= 5, "leaf {id} holds {} rows", counts[id]);
                }
            }
        }
    }

    #[test]
    fn parameter_and_shape_validation() {
        let x: Vec<Vec<f64>> = (0..3).map(|i| vec![i as f64]).collect();
        let y = vec![0.0, 1.0, 2.0];
        let too_few = GBTParams { min_samples_leaf: 2, ..GBTParams::default() };
        assert!(matches!(
            train_gbt(&x, &y, &cols(1), &too_few),
            Err(ModelError::TooFewRows { rows: 3, required: 4 })
        ));
        let bad_lr = GBTParams { learning_rate: 0.0, min_samples_leaf: 1, ..GBTParams::default() };
        assert!(matches!(train_gbt(&x, &y, &cols(1), &bad_lr), Err(ModelError::BadParams(_))));
        let no_trees = GBTParams { n_trees: 0, min_samples_leaf: 1, ..GBTParams::default() };
        assert!(matches!(train_gbt(&x, &y, &cols(1), &no_trees), Err(ModelError::BadParams(_))));
    }
}
