//! Squared-error gradient boosting over depth-limited regression trees.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GbtError {
    #[error("need at least 2 training rows, got {0}")]
    TooFewRows(usize),
    #[error("rows and target differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("row has {got} features, model expects {expected}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("shrinkage must lie in (0, 1], got {0}")]
    BadShrinkage(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
    pub min_leaf: usize,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            trees: 100,
            depth: 3,
            shrinkage: 0.1,
            min_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    /// Root at index 0.
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            Node::Split { .. } => None,
        })
    }

    /// Greedy variance-reduction tree on `residual` over the rows in `idx`.
    fn fit(rows: &[Vec<f64>], residual: &[f64], idx: Vec<usize>, depth: usize, min_leaf: usize) -> Self {
        let mut tree = Self { nodes: Vec::new() };
        tree.grow(rows, residual, idx, depth, min_leaf.max(1));
        tree
    }

    fn grow(&mut self, rows: &[Vec<f64>], residual: &[f64], idx: Vec<usize>, depth: usize, min_leaf: usize) -> usize {
        let at = self.nodes.len();
        let mean = idx.iter().map(|&i| residual[i]).sum::<f64>() / idx.len() as f64;
        self.nodes.push(Node::Leaf { value: mean });
        if depth == 0 || idx.len() < 2 * min_leaf {
            return at;
        }
        let Some((feature, threshold)) = best_split(rows, residual, &idx, min_leaf) else {
            return at;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| rows[i][feature] <= threshold);
        let left = self.grow(rows, residual, l, depth - 1, min_leaf);
        let right = self.grow(rows, residual, r, depth - 1, min_leaf);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }
}

/// Split maximizing the reduction in squared error; ties keep the first
/// (lowest feature, lowest threshold) candidate.
fn best_split(rows: &[Vec<f64>], residual: &[f64], idx: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    let n = idx.len();
    let total: f64 = idx.iter().map(|&i| residual[i]).sum();
    let dims = rows[idx[0]].len();
    let mut best: Option<(f64, usize, f64)> = None;
    let mut order = idx.to_vec();
    for f in 0..dims {
        order.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
        let mut left_sum = 0.0;
        for pos in 0..n - 1 {
            left_sum += residual[order[pos]];
            let (lo, hi) = (rows[order[pos]][f], rows[order[pos + 1]][f]);
            let n_left = pos + 1;
            if lo == hi || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let right_sum = total - left_sum;
            // SSE reduction relative to a single leaf.
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64
                - total * total / n as f64;
            if gain > 1e-15 && best.is_none_or(|(g, _, _)| gain > g) {
                best = Some((gain, f, lo + (hi - lo) / 2.0));
            }
        }
    }
    best.map(|(_, f, t)| (f, t))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostedTreeModel {
    pub base: f64,
    pub shrinkage: f64,
    pub trees: Vec<RegressionTree>,
    pub seed: u64,
    /// Training mean squared error after 0, 1, ..., trees.len() trees.
    pub train_mse: Vec<f64>,
}

impl BoostedTreeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.base + self.shrinkage * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn all_leaves_finite(&self) -> bool {
        self.trees.iter().all(|t| t.leaf_values().all(f64::is_finite))
    }
}

/// Boosting on squared error: start from the target mean, then each tree fits
/// the residual of the running prediction and is added with `shrinkage`.
/// A constant target yields the mean model with zero trees.
pub fn gbt_fit(rows: &[Vec<f64>], target: &[f64], cfg: &GbtConfig, seed: u64) -> Result<BoostedTreeModel, GbtError> {
    if rows.len() != target.len() {
        return Err(GbtError::LengthMismatch(rows.len(), target.len()));
    }
    if rows.len() < 2 {
        return Err(GbtError::TooFewRows(rows.len()));
    }
    if !(cfg.shrinkage > 0.0 && cfg.shrinkage <= 1.0) {
        return Err(GbtError::BadShrinkage(cfg.shrinkage));
    }
    let dims = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dims) {
        return Err(GbtError::ArityMismatch {
            expected: dims,
            got: bad.len(),
        });
    }
    let n = rows.len() as f64;
    let constant = target.iter().all(|&t| t == target[0]);
    let base = if constant { target[0] } else { target.iter().sum::<f64>() / n };
    let mut model = BoostedTreeModel {
        base,
        shrinkage: cfg.shrinkage,
        trees: Vec::new(),
        seed,
        train_mse: Vec::new(),
    };
    let mut pred = vec![base; rows.len()];
    let mse = |pred: &[f64]| target.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / n;
    model.train_mse.push(mse(&pred));
    if constant {
        return Ok(model);
    }
    let all: Vec<usize> = (0..rows.len()).collect();
    for _ in 0..cfg.trees {
        let residual: Vec<f64> = target.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let tree = RegressionTree::fit(rows, &residual, all.clone(), cfg.depth, cfg.min_leaf);
        for (p, x) in pred.iter_mut().zip(rows) {
            *p += cfg.shrinkage * tree.predict(x);
        }
        model.trees.push(tree);
        model.train_mse.push(mse(&pred));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_target_is_mean_model() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let m = gbt_fit(&rows, &[0.4; 10], &GbtConfig::default(), 0).unwrap();
        assert!(m.trees.is_empty());
        assert_eq!(m.predict(&[3.0]), 0.4);
        assert_eq!(m.predict(&[-100.0]), 0.4);
    }

    #[test]
    fn stump_reproduces_group_means() {
        let rows: Vec<Vec<f64>> = (0..12).map(|i| vec![(i % 2) as f64, (i * 7 % 5) as f64 * 0.0]).collect();
        let target: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.1 + 0.01 * (i as f64) } else { 0.7 }).collect();
        let mean0 = (0..12).step_by(2).map(|i| target[i]).sum::<f64>() / 6.0;
        let cfg = GbtConfig {
            trees: 1,
            depth: 1,
            shrinkage: 1.0,
            min_leaf: 1,
        };
        let m = gbt_fit(&rows, &target, &cfg, 0).unwrap();
        assert_eq!(m.trees.len(), 1);
        assert_eq!(m.trees[0].depth(), 1);
        assert!((m.predict(&[0.0, 0.0]) - mean0).abs() < 1e-12);
        assert!((m.predict(&[1.0, 0.0]) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn training_error_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let rows: Vec<Vec<f64>> = (0..80)
                .map(|_| (0..4).map(|_| rng.random_range(0..6) as f64).collect())
                .collect();
            let target: Vec<f64> = rows
                .iter()
                .map(|r| (r[0] * 0.1 - r[2] * 0.05).sin() + rng.random_range(-0.1..0.1))
                .collect();
            let m = gbt_fit(&rows, &target, &GbtConfig::default(), 0).unwrap();
            assert!(m.train_mse.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            assert!(m.trees.iter().all(|t| t.depth() <= 3));
            assert!(m.all_leaves_finite());
        }
    }

    #[test]
    fn input_errors() {
        assert_eq!(
            gbt_fit(&[vec![1.0]], &[0.5], &GbtConfig::default(), 0),
            Err(GbtError::TooFewRows(1))
        );
        assert!(gbt_fit(&[vec![1.0], vec![2.0]], &[0.5], &GbtConfig::default(), 0).is_err());
        let cfg = GbtConfig {
            shrinkage: 0.0,
            ..GbtConfig::default()
        };
        assert!(gbt_fit(&[vec![1.0], vec![2.0]], &[0.5, 0.2], &cfg, 0).is_err());
    }
}
