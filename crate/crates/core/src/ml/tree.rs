//! Binary decision trees and the split-finding engine shared by the forest
//! and boosting learners.
//!
//! Every node keeps, per feature, its rows in ascending feature order. A
//! split scans those lists once and partitions them stably into the two
//! children, so no re-sorting happens below the root.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeafValue {
    /// Weighted class counts of a classification leaf.
    Counts { n0: f64, n1: f64 },
    /// Raw additive score of a boosted leaf, before the learning rate.
    Score { value: f64 },
}

impl LeafValue {
    /// Class-1 fraction for count leaves, the raw score otherwise.
    pub fn output(&self) -> f64 {
        match *self {
            LeafValue::Counts { n0, n1 } => n1 / (n0 + n1),
            LeafValue::Score { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        /// Sample weight reaching the node.
        cover: f64,
        /// Impurity decrease (forests) or loss reduction (boosting) of the split.
        gain: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
    Leaf {
        value: LeafValue,
    },
}

impl TreeNode {
    /// Rows go left iff `row[feature] <= threshold`.
    pub fn leaf_for(&self, row: &[f64]) -> &LeafValue {
        let mut node = self;
        loop {
            match node {
                TreeNode::Leaf { value } => return value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    node = if row[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.leaf_for(row).output()
    }

    pub fn depth(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 0,
            TreeNode::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    pub fn n_leaves(&self) -> usize {
        match self {
            TreeNode::Leaf { .. } => 1,
            TreeNode::Split { left, right, .. } => left.n_leaves() + right.n_leaves(),
        }
    }

    /// Visits every split node as `(feature, cover, gain)`.
    pub fn for_each_split(&self, f: &mut impl FnMut(usize, f64, f64)) {
        if let TreeNode::Split {
            feature,
            cover,
            gain,
            left,
            right,
            ..
        } = self
        {
            f(*feature, *cover, *gain);
            left.for_each_split(f);
            right.for_each_split(f);
        }
    }
}

/// Column-major training matrix with per-feature ascending row orders.
#[derive(Debug, Clone)]
pub struct Presorted {
    pub columns: Vec<Vec<f64>>,
    pub order: Vec<Vec<u32>>,
    pub n_rows: usize,
}

impl Presorted {
    pub fn new(rows: &[Vec<f64>], n_features: usize) -> Self {
        let n_rows = rows.len();
        let columns: Vec<Vec<f64>> = (0..n_features)
            .map(|j| rows.iter().map(|r| r[j]).collect())
            .collect();
        let order = columns
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..n_rows as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Presorted {
            columns,
            order,
            n_rows,
        }
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    /// Per-feature sorted lists restricted to rows with positive weight.
    pub fn root_lists(&self, weights: &[f64]) -> Vec<Vec<u32>> {
        self.order
            .iter()
            .map(|o| o.iter().copied().filter(|&r| weights[r as usize] > 0.0).collect())
            .collect()
    }
}

/// Additive sufficient statistics of a node.
pub trait NodeStats: Copy + Default {
    fn add(&mut self, other: &Self);
    fn sub(&self, other: &Self) -> Self;
    /// Sample weight used for `min_samples_leaf`-style limits and cover.
    fn cover(&self) -> f64;
}

pub trait Criterion: Sync {
    type Stats: NodeStats + Send;
    fn row_stats(&self, row: usize) -> Self::Stats;
    /// Quality of splitting `parent` into `left` and `right`; `None` when the
    /// split violates a child constraint.
    fn gain(&self, parent: &Self::Stats, left: &Self::Stats, right: &Self::Stats) -> Option<f64>;
    fn leaf(&self, stats: &Self::Stats) -> LeafValue;
    /// Nodes for which no split can help.
    fn is_terminal(&self, stats: &Self::Stats) -> bool;
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassStats {
    pub w0: f64,
    pub w1: f64,
}

impl NodeStats for ClassStats {
    fn add(&mut self, o: &Self) {
        self.w0 += o.w0;
        self.w1 += o.w1;
    }
    fn sub(&self, o: &Self) -> Self {
        ClassStats {
            w0: self.w0 - o.w0,
            w1: self.w1 - o.w1,
        }
    }
    fn cover(&self) -> f64 {
        self.w0 + self.w1
    }
}

pub fn gini(s: &ClassStats) -> f64 {
    let n = s.w0 + s.w1;
    if n <= 0.0 {
        return 0.0;
    }
    let (p0, p1) = (s.w0 / n, s.w1 / n);
    1.0 - p0 * p0 - p1 * p1
}

/// Weighted Gini impurity decrease of a split.
pub fn gini_gain(parent: &ClassStats, left: &ClassStats, right: &ClassStats) -> f64 {
    let n = parent.cover();
    gini(parent) - (left.cover() / n) * gini(left) - (right.cover() / n) * gini(right)
}

pub struct GiniCriterion<'a> {
    pub labels: &'a [u8],
    pub weights: &'a [f64],
    pub min_samples_leaf: f64,
}

impl Criterion for GiniCriterion<'_> {
    type Stats = ClassStats;

    fn row_stats(&self, row: usize) -> ClassStats {
        let w = self.weights[row];
        if self.labels[row] == 1 {
            ClassStats { w0: 0.0, w1: w }
        } else {
            ClassStats { w0: w, w1: 0.0 }
        }
    }

    fn gain(&self, parent: &ClassStats, left: &ClassStats, right: &ClassStats) -> Option<f64> {
        if left.cover() < self.min_samples_leaf || right.cover() < self.min_samples_leaf {
            return None;
        }
        Some(gini_gain(parent, left, right))
    }

    fn leaf(&self, s: &ClassStats) -> LeafValue {
        LeafValue::Counts { n0: s.w0, n1: s.w1 }
    }

    fn is_terminal(&self, s: &ClassStats) -> bool {
        s.w0 == 0.0 || s.w1 == 0.0 || s.cover() < 2.0 * self.min_samples_leaf
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GradStats {
    pub g: f64,
    pub h: f64,
    pub n: f64,
}

impl NodeStats for GradStats {
    fn add(&mut self, o: &Self) {
        self.g += o.g;
        self.h += o.h;
        self.n += o.n;
    }
    fn sub(&self, o: &Self) -> Self {
        GradStats {
            g: self.g - o.g,
            h: self.h - o.h,
            n: self.n - o.n,
        }
    }
    fn cover(&self) -> f64 {
        self.n
    }
}

/// `½[G_L²/(H_L+λ) + G_R²/(H_R+λ) − G²/(H+λ)] − γ`.
pub fn second_order_gain(
    parent: &GradStats,
    left: &GradStats,
    right: &GradStats,
    lambda: f64,
    gamma: f64,
) -> f64 {
    let score = |s: &GradStats| s.g * s.g / (s.h + lambda);
    0.5 * (score(left) + score(right) - score(parent)) - gamma
}

/// `−G/(H+λ)`.
pub fn leaf_weight(s: &GradStats, lambda: f64) -> f64 {
    let w = -s.g / (s.h + lambda);
    if w.is_finite() {
        w
    } else {
        0.0
    }
}

pub struct GradCriterion<'a> {
    pub grad: &'a [f64],
    pub hess: &'a [f64],
    pub lambda: f64,
    pub gamma: f64,
    pub min_child_weight: f64,
}

impl Criterion for GradCriterion<'_> {
    type Stats = GradStats;

    fn row_stats(&self, row: usize) -> GradStats {
        GradStats {
            g: self.grad[row],
            h: self.hess[row],
            n: 1.0,
        }
    }

    fn gain(&self, parent: &GradStats, left: &GradStats, right: &GradStats) -> Option<f64> {
        if left.h < self.min_child_weight || right.h < self.min_child_weight {
            return None;
        }
        Some(second_order_gain(parent, left, right, self.lambda, self.gamma))
    }

    fn leaf(&self, s: &GradStats) -> LeafValue {
        LeafValue::Score {
            value: leaf_weight(s, self.lambda),
        }
    }

    fn is_terminal(&self, s: &GradStats) -> bool {
        s.n < 2.0 || s.h < 2.0 * self.min_child_weight
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdRule {
    /// Exact scan over midpoints of consecutive distinct values.
    Exhaustive,
    /// One uniform threshold per feature within the node's value range.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub gain: f64,
}

/// Midpoint of two distinct consecutive values, nudged down when rounding
/// would put it on the upper value.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = lo + (hi - lo) / 2.0;
    if m < hi {
        m
    } else {
        lo
    }
}

/// Node state during construction.
pub struct NodeRows<S> {
    pub lists: Vec<Vec<u32>>,
    pub stats: S,
    pub depth: usize,
}

pub struct Engine<'a, C: Criterion> {
    pub data: &'a Presorted,
    pub criterion: C,
    pub rule: ThresholdRule,
}

impl<C: Criterion> Engine<'_, C> {
    pub fn node_stats(&self, list: &[u32]) -> C::Stats {
        let mut s = C::Stats::default();
        for &r in list {
            s.add(&self.criterion.row_stats(r as usize));
        }
        s
    }

    /// Best split of a node over the candidate features (ascending order).
    /// Strictly positive gain is required. Equal gains keep the lowest
    /// feature index, then the lowest threshold.
    pub fn best_split<R: Rng>(
        &self,
        node: &NodeRows<C::Stats>,
        features: &[usize],
        rng: &mut R,
    ) -> Option<SplitCandidate> {
        let mut best: Option<SplitCandidate> = None;
        let mut consider = |cand: SplitCandidate| {
            if cand.gain > 0.0 && best.is_none_or(|b| cand.gain > b.gain) {
                best = Some(cand);
            }
        };
        for &f in features {
            let list = &node.lists[f];
            let col = &self.data.columns[f];
            if list.len() < 2 {
                continue;
            }
            match self.rule {
                ThresholdRule::Exhaustive => {
                    let mut left = C::Stats::default();
                    for k in 0..list.len() - 1 {
                        let r = list[k] as usize;
                        left.add(&self.criterion.row_stats(r));
                        let (v, next) = (col[r], col[list[k + 1] as usize]);
                        if v == next {
                            continue;
                        }
                        let right = node.stats.sub(&left);
                        if let Some(gain) = self.criterion.gain(&node.stats, &left, &right) {
                            consider(SplitCandidate {
                                feature: f,
                                threshold: midpoint(v, next),
                                gain,
                            });
                        }
                    }
                }
                ThresholdRule::Random => {
                    let lo = col[list[0] as usize];
                    let hi = col[list[list.len() - 1] as usize];
                    if lo >= hi {
                        continue;
                    }
                    let mut threshold = rng.random_range(lo..hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    let mut left = C::Stats::default();
                    for &r in list {
                        if col[r as usize] > threshold {
                            break;
                        }
                        left.add(&self.criterion.row_stats(r as usize));
                    }
                    let right = node.stats.sub(&left);
                    if let Some(gain) = self.criterion.gain(&node.stats, &left, &right) {
                        consider(SplitCandidate {
                            feature: f,
                            threshold,
                            gain,
                        });
                    }
                }
            }
        }
        best
    }

    /// Stable partition of every feature list by the split.
    pub fn partition(
        &self,
        node: NodeRows<C::Stats>,
        split: &SplitCandidate,
        goes_left: &mut [bool],
    ) -> (NodeRows<C::Stats>, NodeRows<C::Stats>) {
        let col = &self.data.columns[split.feature];
        for &r in &node.lists[split.feature] {
            goes_left[r as usize] = col[r as usize] <= split.threshold;
        }
        let mut left_lists = Vec::with_capacity(node.lists.len());
        let mut right_lists = Vec::with_capacity(node.lists.len());
        for list in node.lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&r| goes_left[r as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        let left_stats = self.node_stats(&left_lists[split.feature]);
        let right_stats = node.stats.sub(&left_stats);
        (
            NodeRows {
                lists: left_lists,
                stats: left_stats,
                depth: node.depth + 1,
            },
            NodeRows {
                lists: right_lists,
                stats: right_stats,
                depth: node.depth + 1,
            },
        )
    }

    /// Depth-first growth. `features_for_node` picks the candidate features
    /// of each node (ascending).
    pub fn grow_depthwise<R: Rng>(
        &self,
        root: NodeRows<C::Stats>,
        max_depth: usize,
        rng: &mut R,
        features_for_node: &mut impl FnMut(&mut R) -> Vec<usize>,
    ) -> TreeNode {
        let mut goes_left = vec![false; self.data.n_rows];
        self.grow_node(root, max_depth, rng, features_for_node, &mut goes_left)
    }

    fn grow_node<R: Rng>(
        &self,
        node: NodeRows<C::Stats>,
        max_depth: usize,
        rng: &mut R,
        features_for_node: &mut impl FnMut(&mut R) -> Vec<usize>,
        goes_left: &mut [bool],
    ) -> TreeNode {
        if node.depth >= max_depth || self.criterion.is_terminal(&node.stats) {
            return TreeNode::Leaf {
                value: self.criterion.leaf(&node.stats),
            };
        }
        let features = features_for_node(rng);
        let Some(split) = self.best_split(&node, &features, rng) else {
            return TreeNode::Leaf {
                value: self.criterion.leaf(&node.stats),
            };
        };
        let cover = node.stats.cover();
        let (l, r) = self.partition(node, &split, goes_left);
        let left = self.grow_node(l, max_depth, rng, features_for_node, goes_left);
        let right = self.grow_node(r, max_depth, rng, features_for_node, goes_left);
        TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            cover,
            gain: split.gain,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    /// Best-first growth: repeatedly split the live leaf with the highest
    /// positive gain until `max_leaves` leaves exist. Equal gains go to the
    /// leaf created first.
    pub fn grow_leafwise<R: Rng>(
        &self,
        root: NodeRows<C::Stats>,
        max_leaves: usize,
        max_depth: usize,
        features: &[usize],
        rng: &mut R,
    ) -> TreeNode {
        enum Slot<S> {
            Open(NodeRows<S>, Option<SplitCandidate>),
            Split(SplitCandidate, f64, usize, usize),
            Closed(LeafValue),
        }
        let mut goes_left = vec![false; self.data.n_rows];
        let evaluate = |node: &NodeRows<C::Stats>, rng: &mut R| {
            if node.depth >= max_depth || self.criterion.is_terminal(&node.stats) {
                None
            } else {
                self.best_split(node, features, rng)
            }
        };
        let root_split = evaluate(&root, rng);
        let mut slots: Vec<Slot<C::Stats>> = vec![Slot::Open(root, root_split)];
        let mut leaves = 1;
        while leaves < max_leaves {
            let mut pick: Option<(usize, f64)> = None;
            for (i, s) in slots.iter().enumerate() {
                if let Slot::Open(_, Some(c)) = s {
                    if pick.is_none_or(|(_, g)| c.gain > g) {
                        pick = Some((i, c.gain));
                    }
                }
            }
            let Some((i, _)) = pick else { break };
            let Slot::Open(node, Some(split)) =
                std::mem::replace(&mut slots[i], Slot::Closed(LeafValue::Score { value: 0.0 }))
            else {
                unreachable!("picked slot is open with a split");
            };
            let cover = node.stats.cover();
            let (l, r) = self.partition(node, &split, &mut goes_left);
            let ls = evaluate(&l, rng);
            let rs = evaluate(&r, rng);
            let (li, ri) = (slots.len(), slots.len() + 1);
            slots.push(Slot::Open(l, ls));
            slots.push(Slot::Open(r, rs));
            slots[i] = Slot::Split(split, cover, li, ri);
            leaves += 1;
        }
        for s in slots.iter_mut() {
            if let Slot::Open(node, _) = s {
                *s = Slot::Closed(self.criterion.leaf(&node.stats));
            }
        }
        fn assemble<S>(slots: &[Slot<S>], i: usize) -> TreeNode {
            match &slots[i] {
                Slot::Closed(v) => TreeNode::Leaf { value: v.clone() },
                Slot::Split(c, cover, l, r) => TreeNode::Split {
                    feature: c.feature,
                    threshold: c.threshold,
                    cover: *cover,
                    gain: c.gain,
                    left: Box::new(assemble(slots, *l)),
                    right: Box::new(assemble(slots, *r)),
                },
                Slot::Open(..) => unreachable!("open slots are closed before assembly"),
            }
        }
        assemble(&slots, 0)
    }
}

/// `k` distinct features out of `n`, ascending.
pub fn sample_features<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut v = sample(rng, n, k).into_vec();
    v.sort_unstable();
    v
}

/// `⌈fraction · n⌉`, at least 1 and at most `n`.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_weight_formula() {
        let s = GradStats { g: -2.0, h: 4.0, n: 4.0 };
        assert!((leaf_weight(&s, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn zero_gain_split() {
        let parent = GradStats { g: -2.0, h: 4.0, n: 4.0 };
        let half = GradStats { g: -1.0, h: 2.0, n: 2.0 };
        assert_eq!(second_order_gain(&parent, &half, &half, 0.0, 0.0), 0.0);
    }

    #[test]
    fn gini_values() {
        assert_eq!(gini(&ClassStats { w0: 2.0, w1: 2.0 }), 0.5);
        assert_eq!(gini(&ClassStats { w0: 3.0, w1: 0.0 }), 0.0);
        let p = ClassStats { w0: 2.0, w1: 2.0 };
        let l = ClassStats { w0: 2.0, w1: 0.0 };
        let r = ClassStats { w0: 0.0, w1: 2.0 };
        assert_eq!(gini_gain(&p, &l, &r), 0.5);
    }

    #[test]
    fn midpoint_stays_below_upper() {
        let lo = 1.0f64;
        let hi = f64::from_bits(lo.to_bits() + 1);
        assert_eq!(midpoint(lo, hi), lo);
        assert_eq!(midpoint(1.0, 2.0), 1.5);
    }

    #[test]
    fn fraction_counts() {
        assert_eq!(fraction_count(0.6283, 24), 16);
        assert_eq!(fraction_count(0.01, 5), 1);
        assert_eq!(fraction_count(1.0, 5), 5);
    }
}
