//! Depth-limited regression trees and least-squares gradient boosting.
//!
//! Trees use greedy exact split search: at every node, for every feature,
//! candidate thresholds are the midpoints between consecutive distinct
//! sorted values, and the split minimizing total child SSE wins. Ties are
//! broken toward the lowest feature index, then the smallest threshold,
//! which (together with a canonical row ordering established at fit entry)
//! makes fits deterministic and invariant to row permutation. Routing is
//! left iff `feature < threshold`.
//!
//! Boosting fits each tree to the residuals of the running prediction (the
//! squared-loss negative gradient) and adds `learning_rate` times the tree;
//! with shrinkage in (0, 1] the training MSE is non-increasing stage by
//! stage. No feature subsampling, no row subsampling, no early stopping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Boosting hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GbrtHyperParams {
    pub max_depth: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    #[serde(default = "default_min_samples_leaf")]
    pub min_samples_leaf: usize,
}

fn default_min_samples_leaf() -> usize {
    1
}

impl Default for GbrtHyperParams {
    /// Library defaults: depth 2, 50 trees, shrinkage 0.1, leaves of one.
    fn default() -> Self {
        GbrtHyperParams { max_depth: 2, n_estimators: 50, learning_rate: 0.1, min_samples_leaf: 1 }
    }
}

impl GbrtHyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::Parameter("max_depth must be positive".into()));
        }
        if self.n_estimators == 0 {
            return Err(Error::Parameter("n_estimators must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Parameter(format!(
                "learning_rate must be in (0, 1], got {}",
                self.learning_rate
            )));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::Parameter("min_samples_leaf must be positive".into()));
        }
        Ok(())
    }
}

/// One node of a flat-array tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreeNode {
    Internal { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { value: f64, n_samples: usize },
}

/// A fitted regression tree. Every leaf value is the mean of the training
/// targets routed to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                TreeNode::Leaf { value, .. } => return *value,
                TreeNode::Internal { feature, threshold, left, right } => {
                    at = if row[*feature] < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], at: usize) -> usize {
            match &nodes[at] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Internal { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }
}

/// A fitted boosted ensemble: prediction = base_value +
/// learning_rate * sum of tree outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub base_value: f64,
    pub learning_rate: f64,
    pub n_features: usize,
    pub feature_names: Vec<String>,
    pub trees: Vec<RegressionTree>,
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct VersionedModel {
    version: u32,
    #[serde(flatten)]
    model: GbrtModel,
}

impl GbrtModel {
    /// Serializes to a versioned JSON document; round-trips are bit-faithful
    /// for predictions.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VersionedModel {
            version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        })?)
    }

    pub fn from_json(json: &str) -> Result<GbrtModel> {
        let v: VersionedModel = serde_json::from_str(json)?;
        if v.version != MODEL_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "unsupported model format version {} (expected {MODEL_FORMAT_VERSION})",
                v.version
            )));
        }
        Ok(v.model)
    }
}

fn validate_matrix(features: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if features.is_empty() || targets.is_empty() {
        return Err(Error::Fit("empty training data".into()));
    }
    if features.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} feature rows vs {} targets",
            features.len(),
            targets.len()
        )));
    }
    let ncols = features[0].len();
    for row in features {
        if row.len() != ncols {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite target value".into()));
    }
    Ok(ncols)
}

#[derive(Clone, Copy, PartialEq, Debug)]
struct SplitCandidate {
    sse: f64,
    feature: usize,
    threshold: f64,
}

impl SplitCandidate {
    /// Strictly better under (lower SSE, then lower feature, then lower
    /// threshold).
    fn beats(&self, other: &SplitCandidate) -> bool {
        if self.sse != other.sse {
            return self.sse < other.sse;
        }
        if self.feature != other.feature {
            return self.feature < other.feature;
        }
        self.threshold < other.threshold
    }
}

/// Best split of `rows` on feature `j`, if any candidate satisfies the leaf
/// minimum. Scanning thresholds in increasing order and keeping strict
/// improvements makes the per-feature winner the smallest qualifying
/// threshold.
fn best_split_on_feature(
    features: &[Vec<f64>],
    targets: &[f64],
    rows: &[usize],
    j: usize,
    min_samples_leaf: usize,
) -> Option<SplitCandidate> {
    let mut order: Vec<usize> = rows.to_vec();
    order.sort_by(|&a, &b| features[a][j].partial_cmp(&features[b][j]).unwrap());

    let n = order.len();
    let total_sum: f64 = order.iter().map(|&i| targets[i]).sum();
    let total_sq: f64 = order.iter().map(|&i| targets[i] * targets[i]).sum();

    let mut best: Option<SplitCandidate> = None;
    let mut left_sum = 0.0;
    let mut left_sq = 0.0;
    for pos in 0..n - 1 {
        let i = order[pos];
        left_sum += targets[i];
        left_sq += targets[i] * targets[i];
        let v = features[i][j];
        let next = features[order[pos + 1]][j];
        if v == next {
            continue; // not a boundary between distinct values
        }
        let n_left = pos + 1;
        let n_right = n - n_left;
        if n_left < min_samples_leaf || n_right < min_samples_leaf {
            continue;
        }
        let threshold = v + (next - v) / 2.0;
        let right_sum = total_sum - left_sum;
        let right_sq = total_sq - left_sq;
        let sse_left = left_sq - left_sum * left_sum / n_left as f64;
        let sse_right = right_sq - right_sum * right_sum / n_right as f64;
        let cand = SplitCandidate { sse: sse_left + sse_right, feature: j, threshold };
        if best.map_or(true, |b| cand.sse < b.sse) {
            best = Some(cand);
        }
    }
    best
}

fn build_node(
    features: &[Vec<f64>],
    targets: &[f64],
    rows: &[usize],
    depth_left: usize,
    min_samples_leaf: usize,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let n = rows.len();
    let mean = rows.iter().map(|&i| targets[i]).sum::<f64>() / n as f64;
    let pure = rows.iter().all(|&i| targets[i] == targets[rows[0]]);

    if depth_left == 0 || pure || n < 2 * min_samples_leaf {
        nodes.push(TreeNode::Leaf { value: mean, n_samples: n });
        return nodes.len() - 1;
    }

    let ncols = features[0].len();
    // Per-feature scans are independent; the sequential reduction below
    // preserves the tie-break order regardless of how they were scheduled.
    let candidates: Vec<Option<SplitCandidate>> = (0..ncols)
        .into_par_iter()
        .map(|j| best_split_on_feature(features, targets, rows, j, min_samples_leaf))
        .collect();
    let mut best: Option<SplitCandidate> = None;
    for cand in candidates.into_iter().flatten() {
        if best.map_or(true, |b| cand.beats(&b)) {
            best = Some(cand);
        }
    }

    let Some(split) = best else {
        nodes.push(TreeNode::Leaf { value: mean, n_samples: n });
        return nodes.len() - 1;
    };

    // Partitioning preserves the canonical row order within children.
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| features[i][split.feature] < split.threshold);

    let at = nodes.len();
    nodes.push(TreeNode::Leaf { value: mean, n_samples: n }); // placeholder
    let left = build_node(features, targets, &left_rows, depth_left - 1, min_samples_leaf, nodes);
    let right = build_node(features, targets, &right_rows, depth_left - 1, min_samples_leaf, nodes);
    nodes[at] =
        TreeNode::Internal { feature: split.feature, threshold: split.threshold, left, right };
    at
}

/// Canonical row order: lexicographic by feature vector, then target. Fitting
/// through this order makes the result independent of input row order.
fn canonical_order(features: &[Vec<f64>], targets: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..features.len()).collect();
    idx.sort_by(|&a, &b| {
        for (fa, fb) in features[a].iter().zip(&features[b]) {
            match fa.partial_cmp(fb).unwrap() {
                std::cmp::Ordering::Equal => continue,
                ord => return ord,
            }
        }
        targets[a].partial_cmp(&targets[b]).unwrap()
    });
    idx
}

/// Fits a single depth-limited regression tree by greedy exact split search.
pub fn fit_tree(
    features: &[Vec<f64>],
    targets: &[f64],
    max_depth: usize,
    min_samples_leaf: usize,
) -> Result<RegressionTree> {
    validate_matrix(features, targets)?;
    if min_samples_leaf == 0 {
        return Err(Error::Parameter("min_samples_leaf must be positive".into()));
    }
    let rows = canonical_order(features, targets);
    let mut nodes = Vec::new();
    build_node(features, targets, &rows, max_depth, min_samples_leaf, &mut nodes);
    Ok(RegressionTree { nodes })
}

/// Fits a boosted ensemble of `hyper.n_estimators` trees on squared loss.
pub fn fit_gbrt(
    features: &[Vec<f64>],
    targets: &[f64],
    hyper: &GbrtHyperParams,
) -> Result<GbrtModel> {
    fit_gbrt_named(features, targets, hyper, Vec::new())
}

/// [`fit_gbrt`] with feature names recorded in the model metadata.
pub fn fit_gbrt_named(
    features: &[Vec<f64>],
    targets: &[f64],
    hyper: &GbrtHyperParams,
    feature_names: Vec<String>,
) -> Result<GbrtModel> {
    hyper.validate()?;
    let ncols = validate_matrix(features, targets)?;
    if !feature_names.is_empty() && feature_names.len() != ncols {
        return Err(Error::Shape("feature_names length differs from feature count".into()));
    }

    let n = targets.len();
    let base_value = targets.iter().sum::<f64>() / n as f64;
    let mut prediction = vec![base_value; n];
    let mut residuals = vec![0.0; n];
    let mut trees = Vec::with_capacity(hyper.n_estimators);
    for _ in 0..hyper.n_estimators {
        for i in 0..n {
            residuals[i] = targets[i] - prediction[i];
        }
        let tree = fit_tree(features, &residuals, hyper.max_depth, hyper.min_samples_leaf)?;
        for i in 0..n {
            prediction[i] += hyper.learning_rate * tree.predict_row(&features[i]);
        }
        trees.push(tree);
    }
    Ok(GbrtModel {
        base_value,
        learning_rate: hyper.learning_rate,
        n_features: ncols,
        feature_names,
        trees,
    })
}

fn check_width(model: &GbrtModel, features: &[Vec<f64>]) -> Result<()> {
    for row in features {
        if row.len() != model.n_features {
            return Err(Error::Shape(format!(
                "row has {} features, model expects {}",
                row.len(),
                model.n_features
            )));
        }
    }
    Ok(())
}

/// Ensemble prediction: base_value + learning_rate * sum of tree outputs.
pub fn predict(model: &GbrtModel, features: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_width(model, features)?;
    Ok(features
        .iter()
        .map(|row| {
            let s: f64 = model.trees.iter().map(|t| t.predict_row(row)).sum();
            model.base_value + model.learning_rate * s
        })
        .collect())
}

/// Prediction truncated to the first `upto_m` trees.
pub fn staged_predict(model: &GbrtModel, features: &[Vec<f64>], upto_m: usize) -> Result<Vec<f64>> {
    if upto_m > model.trees.len() {
        return Err(Error::Range(format!(
            "stage {upto_m} exceeds the {} fitted trees",
            model.trees.len()
        )));
    }
    check_width(model, features)?;
    Ok(features
        .iter()
        .map(|row| {
            let s: f64 = model.trees[..upto_m].iter().map(|t| t.predict_row(row)).sum();
            model.base_value + model.learning_rate * s
        })
        .collect())
}

/// Training MSE after each boosting stage (stage 0 = base value only),
/// accumulated in fitting order so it reproduces the in-fit trajectory.
pub fn training_mse_by_stage(
    model: &GbrtModel,
    features: &[Vec<f64>],
    targets: &[f64],
) -> Result<Vec<f64>> {
    check_width(model, features)?;
    if features.len() != targets.len() {
        return Err(Error::Shape("feature/target length mismatch".into()));
    }
    let n = targets.len();
    let mut prediction = vec![model.base_value; n];
    let mut out = Vec::with_capacity(model.trees.len() + 1);
    let mse = |pred: &[f64]| -> f64 {
        pred.iter().zip(targets).map(|(p, y)| (y - p) * (y - p)).sum::<f64>() / n as f64
    };
    out.push(mse(&prediction));
    for tree in &model.trees {
        for (i, row) in features.iter().enumerate() {
            prediction[i] += model.learning_rate * tree.predict_row(row);
        }
        out.push(mse(&prediction));
    }
    Ok(out)
}
