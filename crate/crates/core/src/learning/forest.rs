//! Shallow random forest with Gini splits.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::LearningError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_trees: 40, max_depth: 3, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { p_viable: f64 },
}

/// Nodes in preorder; samples with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_probability(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf { p_viable } => return p_viable,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[feature] <= threshold { left } else { right };
                }
            }
        }
    }

    pub fn votes_viable(&self, x: &[f64]) -> bool {
        self.leaf_probability(x) > 0.5
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], at: usize) -> usize {
            match nodes[at] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(nodes, left).max(go(nodes, right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub n_features: usize,
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    /// Decision threshold on [`predict_proba`](Self::predict_proba); 0.5 until calibrated.
    pub threshold: f64,
}

impl ForestModel {
    /// Fraction of trees voting viable.
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let votes = self.trees.iter().filter(|t| t.votes_viable(x)).count();
        votes as f64 / self.trees.len() as f64
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.predict_proba(x) >= self.threshold
    }
}

fn gini(pos: usize, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = pos as f64 / n as f64;
    2.0 * p * (1.0 - p)
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [bool],
    max_depth: usize,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Builder<'_> {
    fn best_split(&self, idx: &[usize], rng: &mut ChaCha8Rng) -> Option<(usize, f64, f64)> {
        let k = self.x[0].len();
        let n = idx.len();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut sorted: Vec<(f64, bool)> = Vec::with_capacity(n);
        for feature in sample(rng, k, self.mtry).into_iter() {
            sorted.clear();
            sorted.extend(idx.iter().map(|&i| (self.x[i][feature], self.y[i])));
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let total_pos = sorted.iter().filter(|s| s.1).count();
            let mut left_pos = 0;
            for s in 0..n - 1 {
                left_pos += sorted[s].1 as usize;
                if sorted[s].0 == sorted[s + 1].0 {
                    continue;
                }
                let nl = s + 1;
                let imp = (nl as f64 * gini(left_pos, nl) + (n - nl) as f64 * gini(total_pos - left_pos, n - nl)) / n as f64;
                if best.is_none_or(|b| imp < b.2) {
                    best = Some((feature, 0.5 * (sorted[s].0 + sorted[s + 1].0), imp));
                }
            }
        }
        best
    }

    fn grow(&mut self, idx: &[usize], depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let pos = idx.iter().filter(|&&i| self.y[i]).count();
        let at = self.nodes.len();
        let leaf = Node::Leaf { p_viable: pos as f64 / idx.len() as f64 };
        self.nodes.push(leaf.clone());
        if depth >= self.max_depth || pos == 0 || pos == idx.len() {
            return at;
        }
        let parent = gini(pos, idx.len());
        let Some((feature, threshold, imp)) = self.best_split(idx, rng) else {
            return at;
        };
        if imp >= parent {
            return at;
        }
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.x[i][feature] <= threshold);
        let left = self.grow(&l, depth + 1, rng);
        let right = self.grow(&r, depth + 1, rng);
        self.nodes[at] = Node::Split { feature, threshold, left, right };
        at
    }
}

/// Fits `config.n_trees` trees on bootstrap samples, `⌊√k⌋` candidate features per split.
///
/// Tree `i` draws from its own ChaCha stream `i` of `config.seed`, so the
/// result does not depend on thread scheduling.
pub fn fit_forest(x: &[Vec<f64>], y: &[bool], config: &ForestConfig) -> Result<ForestModel, LearningError> {
    let n = x.len();
    if n != y.len() {
        return Err(LearningError::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < 4 {
        return Err(LearningError::TooFewSamples(n));
    }
    let pos = y.iter().filter(|v| **v).count();
    if pos == 0 || pos == n {
        return Err(LearningError::SingleClass);
    }
    if config.n_trees == 0 {
        return Err(LearningError::InvalidConfig("zero trees".into()));
    }
    let k = x[0].len();
    if k == 0 || x.iter().any(|r| r.len() != k) {
        return Err(LearningError::DimensionMismatch { expected: k, got: 0 });
    }
    let mtry = ((k as f64).sqrt().floor() as usize).max(1);
    let trees = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let boot: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut b = Builder { x, y, max_depth: config.max_depth, mtry, nodes: Vec::new() };
            b.grow(&boot, 0, &mut rng);
            Tree { nodes: b.nodes }
        })
        .collect();
    Ok(ForestModel { n_features: k, config: *config, trees, threshold: 0.5 })
}
