//! Bagged regression trees (CART with variance-reduction splits).
//!
//! Each tree is grown on a bootstrap resample drawn from its own ChaCha
//! stream, so the fitted ensemble depends only on the data and the seed,
//! never on thread scheduling.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Scale on which splits and leaf means are computed. Leaves always store
/// microseconds; `Log` leaves hold the geometric mean of their targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetScale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    /// Features considered per split; `None` considers all of them.
    #[serde(default)]
    pub max_features: Option<usize>,
    pub seed: u64,
    pub target_scale: TargetScale,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_trees: 100,
            max_depth: 12,
            min_samples_leaf: 2,
            max_features: None,
            seed: 0,
            target_scale: TargetScale::Log,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split { feature_index: usize, threshold: f64, left: u32, right: u32 },
    Leaf { value_us: f64 },
}

/// A binary regression tree stored as a flat node array rooted at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value_us } => return *value_us,
                Node::Split { feature_index, threshold, left, right } => {
                    i = if x[*feature_index] <= *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(t, *left as usize).max(go(t, *right as usize)),
            }
        }
        go(self, 0)
    }

    /// Structural checks for trees read from untrusted files.
    pub fn check(&self, n_features: usize) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err("empty tree".into());
        }
        for (i, n) in self.nodes.iter().enumerate() {
            match n {
                Node::Leaf { value_us } if !(value_us.is_finite() && *value_us > 0.0) => {
                    return Err(format!("node {i}: leaf value must be positive and finite"))
                }
                Node::Split { feature_index, left, right, threshold } => {
                    if *feature_index >= n_features || !threshold.is_finite() {
                        return Err(format!("node {i}: bad split"));
                    }
                    // Children always follow their parent, which rules out cycles.
                    for c in [*left as usize, *right as usize] {
                        if c <= i || c >= self.nodes.len() {
                            return Err(format!("node {i}: child {c} out of order"));
                        }
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Training output for one tree: the tree and which rows were in its bag.
pub(crate) struct GrownTree {
    pub tree: Tree,
    pub in_bag: Vec<bool>,
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [f64],
    hp: &'a Hyperparams,
    n_features: usize,
    nodes: Vec<Node>,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn leaf_value(&self, idx: &[usize]) -> f64 {
        let mean = idx.iter().map(|&i| self.y[i]).sum::<f64>() / idx.len() as f64;
        match self.hp.target_scale {
            TargetScale::Linear => mean,
            TargetScale::Log => mean.exp(),
        }
    }

    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let min_leaf = self.hp.min_samples_leaf.max(1);
        let total: f64 = idx.iter().map(|&i| self.y[i]).sum();
        let parent = total * total / n as f64;
        let features: Vec<usize> = match self.hp.max_features {
            Some(k) if k < self.n_features => {
                let mut f = index::sample(&mut self.rng, self.n_features, k.max(1)).into_vec();
                f.sort_unstable();
                f
            }
            _ => (0..self.n_features).collect(),
        };
        let mut best: Option<(usize, f64, f64)> = None;
        let mut pairs: Vec<(f64, usize)> = Vec::with_capacity(n);
        for f in features {
            pairs.clear();
            pairs.extend(idx.iter().map(|&i| (self.x[i][f], i)));
            pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut left_sum = 0.0;
            for j in 0..n - 1 {
                left_sum += self.y[pairs[j].1];
                let n_left = j + 1;
                if n_left < min_leaf || n - n_left < min_leaf || pairs[j].0 == pairs[j + 1].0 {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64;
                if best.is_none_or(|b| score > b.2) {
                    let (lo, hi) = (pairs[j].0, pairs[j + 1].0);
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if !(threshold >= lo && threshold < hi) {
                        threshold = lo;
                    }
                    best = Some((f, threshold, score));
                }
            }
        }
        let gain_floor = 1e-12 * parent.abs().max(1.0);
        best.filter(|b| b.2 - parent > gain_floor)
    }

    fn grow(&mut self, idx: &mut [usize], depth: usize) -> u32 {
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf { value_us: 0.0 });
        let first = self.y[idx[0]];
        let splittable = depth < self.hp.max_depth
            && idx.len() >= 2 * self.hp.min_samples_leaf.max(1)
            && idx.iter().any(|&i| self.y[i] != first);
        let split = if splittable { self.best_split(idx) } else { None };
        match split {
            None => {
                self.nodes[id as usize] = Node::Leaf { value_us: self.leaf_value(idx) };
            }
            Some((feature_index, threshold, _)) => {
                let x = self.x;
                let mut mid = 0;
                for j in 0..idx.len() {
                    if x[idx[j]][feature_index] <= threshold {
                        idx.swap(mid, j);
                        mid += 1;
                    }
                }
                let (l, r) = idx.split_at_mut(mid);
                let left = self.grow(l, depth + 1);
                let right = self.grow(r, depth + 1);
                self.nodes[id as usize] = Node::Split { feature_index, threshold, left, right };
            }
        }
        id
    }
}

fn tree_rng(seed: u64, tree: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tree as u64);
    rng
}

/// Grows `hp.n_trees` trees on bootstrap resamples. `y` must already be on
/// the scale named by `hp.target_scale`.
pub(crate) fn grow_forest(x: &[Vec<f64>], y: &[f64], hp: &Hyperparams) -> Vec<GrownTree> {
    assert!(!x.is_empty() && x.len() == y.len());
    let n_features = x[0].len();
    (0..hp.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = tree_rng(hp.seed, t);
            let n = x.len();
            let mut idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            for &i in &idx {
                in_bag[i] = true;
            }
            let mut b = Builder { x, y, hp, n_features, nodes: Vec::new(), rng };
            b.grow(&mut idx, 0);
            GrownTree { tree: Tree { nodes: b.nodes }, in_bag }
        })
        .collect()
}

/// Mean of per-tree predictions, summed in tree order.
pub fn ensemble_predict(trees: &[Tree], x: &[f64]) -> f64 {
    trees.iter().map(|t| t.predict(x)).sum::<f64>() / trees.len() as f64
}
