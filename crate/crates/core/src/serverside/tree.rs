//! CART trees, bagged forests, and gradient boosting, implemented natively
//! for determinism: fixed traversal order, first-strictly-better split
//! selection, and seeded bootstraps make every fit reproducible.

use serde::{Deserialize, Serialize};

use crate::numkit::matrix::Matrix;
use crate::numkit::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        /// class counts for classification, single value for regression
        distribution: Vec<f64>,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn leaf_for<'a>(&'a self, x: &[f64]) -> &'a [f64] {
        match self {
            Node::Leaf { distribution } => distribution,
            Node::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.leaf_for(x)
                } else {
                    right.leaf_for(x)
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

fn gini(counts: &[f64], total: f64) -> f64 {
    if total <= 0.0 {
        return 0.0;
    }
    let mut g = 1.0;
    for &c in counts {
        let p = c / total;
        g -= p * p;
    }
    g
}

/// Candidate split: feature, threshold, and weighted impurity. Chosen splits
/// must be strictly better than the incumbent, so the first (lowest feature
/// index, lowest threshold) among equals wins.
struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

/// Grow a classification tree with gini impurity.
///
/// `feature_pool` is the per-node candidate count (`sqrt(d)` for forests,
/// all features when `None`).
pub fn grow_classification_tree(
    x: &Matrix<f64>,
    y: &[usize],
    rows: &[usize],
    n_classes: usize,
    max_depth: usize,
    feature_subsample: Option<usize>,
    rng: &mut Rng,
) -> Node {
    let mut counts = vec![0.0f64; n_classes];
    for &r in rows {
        counts[y[r]] += 1.0;
    }
    let total = rows.len() as f64;
    let parent_gini = gini(&counts, total);
    if max_depth == 0 || rows.len() < 2 || parent_gini == 0.0 {
        return Node::Leaf { distribution: counts };
    }
    let d = x.cols();
    let features: Vec<usize> = match feature_subsample {
        Some(k) if k < d => {
            // sorted deterministic subset drawn without replacement
            let mut pool: Vec<usize> = (0..d).collect();
            let mut picked = Vec::with_capacity(k);
            for _ in 0..k {
                let i = rng.next_below(pool.len());
                picked.push(pool.swap_remove(i));
            }
            picked.sort_unstable();
            picked
        }
        _ => (0..d).collect(),
    };
    let mut best: Option<BestSplit> = None;
    for &f in &features {
        let mut vals: Vec<(f64, usize)> = rows.iter().map(|&r| (x.get(r, f), y[r])).collect();
        vals.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        let mut left_counts = vec![0.0f64; n_classes];
        let mut left_total = 0.0;
        for i in 0..vals.len() - 1 {
            left_counts[vals[i].1] += 1.0;
            left_total += 1.0;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let right_total = total - left_total;
            let mut right_counts = counts.clone();
            for (rc, lc) in right_counts.iter_mut().zip(&left_counts) {
                *rc -= lc;
            }
            let score = (left_total * gini(&left_counts, left_total)
                + right_total * gini(&right_counts, right_total))
                / total;
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: 0.5 * (vals[i].0 + vals[i + 1].0),
                    score,
                });
            }
        }
    }
    let Some(best) = best else {
        return Node::Leaf { distribution: counts };
    };
    if best.score >= parent_gini {
        return Node::Leaf { distribution: counts };
    }
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&r| x.get(r, best.feature) <= best.threshold);
    if left_rows.is_empty() || right_rows.is_empty() {
        return Node::Leaf { distribution: counts };
    }
    let left = grow_classification_tree(x, y, &left_rows, n_classes, max_depth - 1, feature_subsample, rng);
    let right =
        grow_classification_tree(x, y, &right_rows, n_classes, max_depth - 1, feature_subsample, rng);
    Node::Split { feature: best.feature, threshold: best.threshold, left: Box::new(left), right: Box::new(right) }
}

/// Grow a regression tree on `(target, weight)` pairs; leaves store the
/// Newton-step value `sum(target) / sum(weight)` (floored denominator).
pub fn grow_regression_tree(
    x: &Matrix<f64>,
    target: &[f64],
    weight: &[f64],
    rows: &[usize],
    max_depth: usize,
) -> Node {
    let sum_t: f64 = rows.iter().map(|&r| target[r]).sum();
    let sum_w: f64 = rows.iter().map(|&r| weight[r]).sum();
    let leaf_value = sum_t / sum_w.max(1e-12);
    if max_depth == 0 || rows.len() < 2 {
        return Node::Leaf { distribution: vec![leaf_value] };
    }
    // squared-error criterion on the raw targets
    let total = rows.len() as f64;
    let mean = rows.iter().map(|&r| target[r]).sum::<f64>() / total;
    let parent_sse: f64 = rows.iter().map(|&r| (target[r] - mean).powi(2)).sum();
    if parent_sse <= 1e-12 {
        return Node::Leaf { distribution: vec![leaf_value] };
    }
    let mut best: Option<BestSplit> = None;
    for f in 0..x.cols() {
        let mut vals: Vec<(f64, f64)> = rows.iter().map(|&r| (x.get(r, f), target[r])).collect();
        vals.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        let total_sum: f64 = vals.iter().map(|v| v.1).sum();
        let mut left_sum = 0.0;
        let mut left_n = 0.0;
        for i in 0..vals.len() - 1 {
            left_sum += vals[i].1;
            left_n += 1.0;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let right_n = total - left_n;
            let right_sum = total_sum - left_sum;
            // maximizing between-group separation == minimizing SSE
            let score = -(left_sum * left_sum / left_n + right_sum * right_sum / right_n);
            if best.as_ref().is_none_or(|b| score < b.score) {
                best = Some(BestSplit {
                    feature: f,
                    threshold: 0.5 * (vals[i].0 + vals[i + 1].0),
                    score,
                });
            }
        }
    }
    let Some(best) = best else {
        return Node::Leaf { distribution: vec![leaf_value] };
    };
    let (left_rows, right_rows): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&r| x.get(r, best.feature) <= best.threshold);
    if left_rows.is_empty() || right_rows.is_empty() {
        return Node::Leaf { distribution: vec![leaf_value] };
    }
    let left = grow_regression_tree(x, target, weight, &left_rows, max_depth - 1);
    let right = grow_regression_tree(x, target, weight, &right_rows, max_depth - 1);
    Node::Split { feature: best.feature, threshold: best.threshold, left: Box::new(left), right: Box::new(right) }
}

/// Bagged CART forest with sqrt-feature subsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<Node>,
    pub n_classes: usize,
}

impl Forest {
    pub fn fit(
        x: &Matrix<f64>,
        y: &[usize],
        rows: &[usize],
        n_classes: usize,
        n_trees: usize,
        max_depth: usize,
        seed: u64,
    ) -> Self {
        let master = Rng::new(seed);
        let k = ((x.cols() as f64).sqrt().round() as usize).max(1);
        let trees = (0..n_trees)
            .map(|t| {
                let mut rng = master.derive(t as u64);
                let boot: Vec<usize> =
                    (0..rows.len()).map(|_| rows[rng.next_below(rows.len())]).collect();
                grow_classification_tree(x, y, &boot, n_classes, max_depth, Some(k), &mut rng)
            })
            .collect();
        Forest { trees, n_classes }
    }

    /// Majority vote over per-tree leaf distributions; ties break toward
    /// the lower class id.
    pub fn predict(&self, x: &[f64]) -> usize {
        let mut votes = vec![0.0f64; self.n_classes];
        for tree in &self.trees {
            let dist = tree.leaf_for(x);
            let total: f64 = dist.iter().sum();
            if total > 0.0 {
                for (v, &c) in votes.iter_mut().zip(dist) {
                    *v += c / total;
                }
            }
        }
        argmax_lowest(&votes)
    }
}

/// Multiclass gradient boosting with softmax loss: one regression tree per
/// class per round on the gradient residuals, Newton leaf values, shrinkage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbt {
    /// `rounds x n_classes` trees
    pub trees: Vec<Vec<Node>>,
    pub n_classes: usize,
    pub shrinkage: f64,
}

impl Gbt {
    pub fn fit(
        x: &Matrix<f64>,
        y: &[usize],
        rows: &[usize],
        n_classes: usize,
        rounds: usize,
        max_depth: usize,
        shrinkage: f64,
    ) -> Self {
        let n = rows.len();
        let k = n_classes;
        let mut scores = vec![vec![0.0f64; k]; n];
        let mut trees = Vec::with_capacity(rounds);
        let mut target = vec![0.0f64; x.rows()];
        let mut weight = vec![0.0f64; x.rows()];
        for _ in 0..rounds {
            let mut round_trees = Vec::with_capacity(k);
            // softmax probabilities per boosted row
            let probs: Vec<Vec<f64>> = scores.iter().map(|s| softmax(s)).collect();
            for class in 0..k {
                for (slot, &r) in rows.iter().enumerate() {
                    let yk = if y[r] == class { 1.0 } else { 0.0 };
                    let p = probs[slot][class];
                    target[r] = yk - p;
                    weight[r] = (p * (1.0 - p)).max(1e-12);
                }
                let factor = (k as f64 - 1.0) / k as f64;
                let mut tree = grow_regression_tree(x, &target, &weight, rows, max_depth);
                scale_leaves(&mut tree, factor);
                for (slot, &r) in rows.iter().enumerate() {
                    scores[slot][class] += shrinkage * tree.leaf_for(x.row(r))[0];
                }
                round_trees.push(tree);
            }
            trees.push(round_trees);
        }
        Gbt { trees, n_classes: k, shrinkage }
    }

    pub fn decision_scores(&self, x: &[f64]) -> Vec<f64> {
        let mut scores = vec![0.0f64; self.n_classes];
        for round in &self.trees {
            for (class, tree) in round.iter().enumerate() {
                scores[class] += self.shrinkage * tree.leaf_for(x)[0];
            }
        }
        scores
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax_lowest(&self.decision_scores(x))
    }
}

fn scale_leaves(node: &mut Node, factor: f64) {
    match node {
        Node::Leaf { distribution } => {
            for v in distribution.iter_mut() {
                *v *= factor;
            }
        }
        Node::Split { left, right, .. } => {
            scale_leaves(left, factor);
            scale_leaves(right, factor);
        }
    }
}

fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// First index attaining the maximum (ties go to the lower class id).
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0usize;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
