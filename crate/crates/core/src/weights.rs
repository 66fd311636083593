//! Supervised feature weighting: random-forest training (shared by the
//! learned-weights and proximity pipelines) and k-nearest-neighbour mutual
//! information weights.
//!
//! The forest is a plain classification forest: Gini splitting, bootstrap
//! resampling per tree, a fixed number of candidate features per split, and
//! deterministic tie-breaking (lowest feature index, then lowest threshold).
//! Proximity between two patients is the fraction of trees in which they
//! share a terminal node.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matchcore::DistanceMatrix;
use crate::rng::{indexed_seed, seeded_rng};
use crate::stats::digamma;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub bootstrap: bool,
    pub seed: u64,
}

/// Leaf-size floor: max(5, floor(0.01 n)).
pub fn min_samples_leaf_floor(n: usize) -> usize {
    5.max(n / 100)
}

impl ForestConfig {
    /// The published hyperparameters for a cohort of size n.
    pub fn standard(n: usize, seed: u64) -> Self {
        ForestConfig {
            n_trees: 300,
            max_depth: 8,
            min_samples_leaf: min_samples_leaf_floor(n),
            features_per_split: 3,
            bootstrap: true,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split { feature: usize, threshold: f64, left: u32, right: u32 },
    Leaf {
        id: u32,
        value: f64,
        // read by the leaf-floor test through leaf_train_counts
        #[allow(dead_code)]
        train_count: u32,
    },
}

#[derive(Debug, Clone)]
pub struct Tree {
    nodes: Vec<Node>,
    n_leaves: u32,
    /// Raw (unnormalized) impurity decrease accumulated per feature.
    importance: Vec<f64>,
}

impl Tree {
    /// Terminal-node id for one feature row.
    pub fn leaf_of(&self, row: &[f64]) -> u32 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left as usize } else { *right as usize };
                }
                Node::Leaf { id, .. } => return *id,
            }
        }
    }

    fn value_of(&self, row: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split { feature, threshold, left, right } => {
                    at = if row[*feature] <= *threshold { *left as usize } else { *right as usize };
                }
                Node::Leaf { value, .. } => return *value,
            }
        }
    }

    #[cfg(test)]
    fn leaf_train_counts(&self) -> Vec<u32> {
        let mut counts = vec![0; self.n_leaves as usize];
        for node in &self.nodes {
            if let Node::Leaf { id, train_count, .. } = node {
                counts[*id as usize] = *train_count;
            }
        }
        counts
    }
}

#[derive(Debug, Clone)]
pub struct ForestModel {
    pub config: ForestConfig,
    pub p: usize,
    pub trees: Vec<Tree>,
}

struct TreeBuilder<'a> {
    features: &'a [f64],
    labels: &'a [bool],
    p: usize,
    config: &'a ForestConfig,
    rng: rand_chacha::ChaCha8Rng,
    nodes: Vec<Node>,
    n_leaves: u32,
    importance: Vec<f64>,
    n_root: usize,
    feature_pool: Vec<usize>,
    scratch: Vec<(f64, bool)>,
}

impl TreeBuilder<'_> {
    fn leaf(&mut self, samples: &[u32]) -> u32 {
        let positives = samples.iter().filter(|&&i| self.labels[i as usize]).count();
        let id = self.n_leaves;
        self.n_leaves += 1;
        self.nodes.push(Node::Leaf {
            id,
            value: positives as f64 / samples.len() as f64,
            train_count: samples.len() as u32,
        });
        (self.nodes.len() - 1) as u32
    }

    fn grow(&mut self, samples: &mut Vec<u32>, depth: usize) -> u32 {
        let m = samples.len();
        let positives = samples.iter().filter(|&&i| self.labels[i as usize]).count();
        let pure = positives == 0 || positives == m;
        if depth >= self.config.max_depth || pure || m < 2 * self.config.min_samples_leaf {
            return self.leaf(samples);
        }

        // candidate features without replacement, scanned in ascending order
        // so equal-quality splits resolve to the lowest feature index
        let k = self.config.features_per_split.min(self.p);
        for slot in 0..k {
            let pick = slot + (self.rng.gen::<f64>() * (self.p - slot) as f64) as usize;
            self.feature_pool.swap(slot, pick.min(self.p - 1));
        }
        let mut candidates: Vec<usize> = self.feature_pool[..k].to_vec();
        candidates.sort_unstable();

        let parent_gini = gini(positives, m);
        let mut best: Option<(f64, usize, f64)> = None; // (decrease, feature, threshold)
        for &feature in &candidates {
            self.scratch.clear();
            self.scratch.extend(
                samples.iter().map(|&i| {
                    (self.features[i as usize * self.p + feature], self.labels[i as usize])
                }),
            );
            self.scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("NaN feature"));
            let mut left_n = 0usize;
            let mut left_pos = 0usize;
            for cut in 0..m - 1 {
                left_n += 1;
                left_pos += usize::from(self.scratch[cut].1);
                if self.scratch[cut].0 == self.scratch[cut + 1].0 {
                    continue;
                }
                let right_n = m - left_n;
                if left_n < self.config.min_samples_leaf || right_n < self.config.min_samples_leaf {
                    continue;
                }
                let right_pos = positives - left_pos;
                let weighted = (left_n as f64 * gini(left_pos, left_n)
                    + right_n as f64 * gini(right_pos, right_n))
                    / m as f64;
                let decrease = parent_gini - weighted;
                if decrease > 1e-12 && best.map_or(true, |(b, _, _)| decrease > b + 1e-15) {
                    let threshold = 0.5 * (self.scratch[cut].0 + self.scratch[cut + 1].0);
                    best = Some((decrease, feature, threshold));
                }
            }
        }

        let Some((decrease, feature, threshold)) = best else {
            return self.leaf(samples);
        };
        self.importance[feature] += decrease * m as f64 / self.n_root as f64;

        let mut left: Vec<u32> = Vec::with_capacity(m / 2);
        let mut right: Vec<u32> = Vec::with_capacity(m / 2);
        for &i in samples.iter() {
            if self.features[i as usize * self.p + feature] <= threshold {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        samples.clear();
        samples.shrink_to_fit();

        let slot = self.nodes.len();
        self.nodes.push(Node::Split { feature, threshold, left: 0, right: 0 });
        let left_child = self.grow(&mut left, depth + 1);
        let right_child = self.grow(&mut right, depth + 1);
        let Node::Split { left: l, right: r, .. } = &mut self.nodes[slot] else { unreachable!() };
        *l = left_child;
        *r = right_child;
        slot as u32
    }
}

fn gini(positives: usize, total: usize) -> f64 {
    let p = positives as f64 / total as f64;
    2.0 * p * (1.0 - p)
}

/// Trains a classification forest; deterministic given (data, seed) and
/// independent of thread count.
pub fn train_forest(features: &[f64], labels: &[bool], p: usize, config: &ForestConfig) -> Result<ForestModel> {
    let n = labels.len();
    assert_eq!(features.len(), n * p);
    assert!(config.n_trees >= 1 && config.max_depth >= 1);
    if n < 2 * config.min_samples_leaf {
        return Err(Error::Degenerate(format!(
            "forest needs at least {} samples, got {n}",
            2 * config.min_samples_leaf
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(Error::Degenerate("single-class outcome, forest would be trivial".into()));
    }

    let trees: Vec<Tree> = (0..config.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = seeded_rng(indexed_seed(config.seed, t as u64));
            let mut samples: Vec<u32> = if config.bootstrap {
                (0..n).map(|_| (rng.gen::<f64>() * n as f64) as u32).collect()
            } else {
                (0..n as u32).collect()
            };
            let mut builder = TreeBuilder {
                features,
                labels,
                p,
                config,
                rng,
                nodes: Vec::new(),
                n_leaves: 0,
                importance: vec![0.0; p],
                n_root: samples.len(),
                feature_pool: (0..p).collect(),
                scratch: Vec::with_capacity(n),
            };
            let root = builder.grow(&mut samples, 0);
            debug_assert_eq!(root, 0);
            Tree { nodes: builder.nodes, n_leaves: builder.n_leaves, importance: builder.importance }
        })
        .collect();

    Ok(ForestModel { config: *config, p, trees })
}

/// Mean over trees of the per-feature impurity decrease, normalized to sum 1.
pub fn gini_importances(model: &ForestModel) -> Vec<f64> {
    let mut gamma = vec![0.0; model.p];
    for tree in &model.trees {
        for (g, imp) in gamma.iter_mut().zip(&tree.importance) {
            *g += imp;
        }
    }
    let total: f64 = gamma.iter().sum();
    if total > 0.0 {
        for g in &mut gamma {
            *g /= total;
        }
    } else {
        gamma.fill(1.0 / model.p as f64);
    }
    gamma
}

/// Mean predicted positive-class probability across trees.
pub fn predict_proba(model: &ForestModel, row: &[f64]) -> f64 {
    let sum: f64 = model.trees.iter().map(|t| t.value_of(row)).sum();
    sum / model.trees.len() as f64
}

/// 1 - (fraction of trees in which two panel members share a terminal node),
/// counted per leaf bucket rather than per pair of trees-times-patients.
pub fn rf_dissimilarity(model: &ForestModel, panel_features: &[f64], physician_id: usize) -> DistanceMatrix {
    let p = model.p;
    let nj = panel_features.len() / p;
    assert_eq!(panel_features.len(), nj * p);
    let t_total = model.trees.len();
    let mut shared = vec![0u32; nj * nj];
    let mut buckets: Vec<Vec<u32>> = Vec::new();
    for tree in &model.trees {
        buckets.iter_mut().for_each(|b| b.clear());
        buckets.resize_with(tree.n_leaves as usize, Vec::new);
        for i in 0..nj {
            let leaf = tree.leaf_of(&panel_features[i * p..(i + 1) * p]);
            buckets[leaf as usize].push(i as u32);
        }
        for bucket in &buckets {
            for (offset, &a) in bucket.iter().enumerate() {
                for &b in &bucket[offset + 1..] {
                    shared[a as usize * nj + b as usize] += 1;
                }
            }
        }
    }
    let mut values = vec![0.0; nj * nj];
    for a in 0..nj {
        for b in (a + 1)..nj {
            let d = 1.0 - shared[a * nj + b] as f64 / t_total as f64;
            values[a * nj + b] = d;
            values[b * nj + a] = d;
        }
    }
    DistanceMatrix { physician_id, n: nj, values }
}

/// Per-feature mutual information with a binary outcome, clamped at zero and
/// normalized to sum 1. Features with more than two distinct values use the
/// k-nearest-neighbour estimator for a continuous variable against a discrete
/// one; one- or two-valued features use the exact plug-in estimator. A tiny
/// seeded jitter breaks the ties that integer-valued covariates would
/// otherwise inject into the neighbour counts.
pub fn mi_weights(z: &[f64], y: &[bool], p: usize, k: usize, seed: u64) -> Vec<f64> {
    let n = y.len();
    assert_eq!(z.len(), n * p);
    assert!(n >= k + 1, "MI estimator needs more samples than neighbours");
    let mut raw = vec![0.0; p];
    for feature in 0..p {
        let column: Vec<f64> = (0..n).map(|i| z[i * p + feature]).collect();
        raw[feature] = mi_estimate(&column, y, k, indexed_seed(seed, feature as u64)).max(0.0);
    }
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        raw.iter_mut().for_each(|w| *w /= total);
    } else {
        raw.fill(1.0 / p as f64);
    }
    raw
}

/// Mutual information, in nats, between one feature column and the binary
/// outcome: exact plug-in when the column takes at most two values, the
/// k-nearest-neighbour estimator otherwise.
pub fn mi_estimate(column: &[f64], y: &[bool], k: usize, seed: u64) -> f64 {
    assert_eq!(column.len(), y.len());
    let mut distinct = column.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("NaN covariate"));
    distinct.dedup();
    if distinct.len() <= 2 {
        plugin_mi_binary(column, y, &distinct)
    } else {
        knn_mi_continuous_discrete(column, y, k, seed)
    }
}

/// Exact plug-in MI for a feature taking at most two values.
fn plugin_mi_binary(column: &[f64], y: &[bool], distinct: &[f64]) -> f64 {
    if distinct.len() < 2 {
        return 0.0;
    }
    let n = column.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for (&v, &label) in column.iter().zip(y) {
        let a = usize::from(v == distinct[1]);
        joint[a][usize::from(label)] += 1.0;
    }
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            let pab = joint[a][b] / n;
            if pab > 0.0 {
                let pa = (joint[a][0] + joint[a][1]) / n;
                let pb = (joint[0][b] + joint[1][b]) / n;
                mi += pab * (pab / (pa * pb)).ln();
            }
        }
    }
    mi
}

fn next_toward_zero(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else {
        0.0
    }
}

/// kNN estimator of I(continuous; discrete): radius from the k-th same-class
/// neighbour, neighbour counts over the whole sample, digamma identity.
fn knn_mi_continuous_discrete(column: &[f64], y: &[bool], k: usize, jitter_seed: u64) -> f64 {
    let max_abs = column.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut rng = seeded_rng(jitter_seed);
    let x: Vec<f64> = column
        .iter()
        .map(|&v| v + 1e-10 * max_abs * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
        .collect();

    // per-class sorted values for the same-class k-th neighbour radius
    let mut class_sorted: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for (&v, &label) in x.iter().zip(y) {
        class_sorted[usize::from(label)].push(v);
    }
    class_sorted.iter_mut().for_each(|c| c.sort_by(|a, b| a.partial_cmp(b).unwrap()));
    let counts = [class_sorted[0].len(), class_sorted[1].len()];

    let mut all_sorted = x.clone();
    all_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut n_used = 0usize;
    let mut sum_digamma_k = 0.0;
    let mut sum_digamma_count = 0.0;
    let mut sum_digamma_m = 0.0;
    for (&v, &label) in x.iter().zip(y) {
        let class = &class_sorted[usize::from(label)];
        let count = counts[usize::from(label)];
        if count <= 1 {
            continue;
        }
        let k_eff = k.min(count - 1);
        let radius = next_toward_zero(kth_neighbor_distance_sorted(class, v, k_eff));
        // closed-ball count over the full sample, the query point included.
        // compare distances, not interval endpoints: v + radius rounds away
        // the one-ulp shrink and would re-admit the k-th neighbour
        let lo = all_sorted.partition_point(|&u| v - u > radius);
        let hi = all_sorted.partition_point(|&u| u - v <= radius);
        let m = hi - lo;
        n_used += 1;
        sum_digamma_k += digamma(k_eff as f64);
        sum_digamma_count += digamma(count as f64);
        sum_digamma_m += digamma(m as f64);
    }
    if n_used == 0 {
        return 0.0;
    }
    let inv = 1.0 / n_used as f64;
    digamma(n_used as f64) + sum_digamma_k * inv - sum_digamma_count * inv - sum_digamma_m * inv
}

/// Distance from `v` to its k-th nearest neighbour within ascending-sorted
/// `sorted`, the query point itself excluded (v is a member of the array).
fn kth_neighbor_distance_sorted(sorted: &[f64], v: f64, k: usize) -> f64 {
    // position of v in the sorted order; ties resolved to the first match
    let t = sorted.partition_point(|&u| u < v);
    debug_assert!(t < sorted.len() && sorted[t] == v);
    let len = sorted.len();
    // windows of k+1 consecutive elements containing position t: the k-th
    // neighbour distance is the smallest max-side span over those windows
    let lo_start = t.saturating_sub(k);
    let hi_start = t.min(len - 1 - k);
    let mut best = f64::INFINITY;
    for start in lo_start..=hi_start {
        let span = (v - sorted[start]).max(sorted[start + k] - v);
        if span < best {
            best = span;
        }
    }
    best
}
