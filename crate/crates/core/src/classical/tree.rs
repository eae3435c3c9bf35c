//! CART classification tree grown on Gini impurity.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::FeatureTable;
use crate::tiling::argmax_lowest;

/// Gini impurity `1 - sum (n_c / n)^2`.
pub fn gini(class_counts: &[usize]) -> Result<f64> {
    let n: usize = class_counts.iter().sum();
    if n == 0 {
        return Err(Error::Empty("gini of an empty node".into()));
    }
    let n = n as f64;
    Ok(1.0 - class_counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub min_leaf: usize,
    pub max_depth: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_leaf: 5,
            max_depth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        histogram: Vec<usize>,
    },
}

/// Flattened binary tree; node 0 is the root. Rows with `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
    pub params: TreeParams,
    pub n_features: usize,
    pub n_classes: usize,
}

impl DecisionTree {
    fn leaf(&self, row: &[f64]) -> &[usize] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { histogram } => return histogram,
            }
        }
    }

    /// Majority class of the reached leaf; ties go to the lowest class id.
    pub fn predict(&self, row: &[f64]) -> u8 {
        argmax_lowest(self.leaf(row).iter().copied()) as u8
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| matches!(n, Node::Leaf { .. }))
            .count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &DecisionTree, i: usize) -> usize {
            match &t.nodes[i] {
                Node::Split { left, right, .. } => 1 + go(t, *left).max(go(t, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(self, 0)
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> Vec<bool> {
        let mut used = vec![false; self.n_features];
        for n in &self.nodes {
            if let Node::Split { feature, .. } = n {
                used[*feature] = true;
            }
        }
        used
    }
}

/// Grows a CART tree on every row of `table`.
pub fn cart_train(table: &FeatureTable, params: TreeParams) -> Result<DecisionTree> {
    let rows: Vec<usize> = (0..table.n_rows()).collect();
    grow(
        table,
        &rows,
        table.n_classes(),
        params,
        table.n_features(),
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
}

pub fn cart_predict(tree: &DecisionTree, row: &[f64]) -> u8 {
    tree.predict(row)
}

struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

/// Grows a tree on `rows` (duplicates allowed, as in a bootstrap), considering
/// `mtry` randomly chosen features at every split. With `mtry == n_features`
/// no randomness is drawn.
pub(crate) fn grow<R: Rng + ?Sized>(
    table: &FeatureTable,
    rows: &[usize],
    n_classes: usize,
    params: TreeParams,
    mtry: usize,
    rng: &mut R,
) -> Result<DecisionTree> {
    let d = table.n_features();
    if rows.is_empty() {
        return Err(Error::Empty("cannot grow a tree on zero rows".into()));
    }
    if d == 0 {
        return Err(Error::invalid("cannot grow a tree without features"));
    }
    let k = n_classes.max(table.n_classes());
    let mtry = mtry.clamp(1, d);
    let min_leaf = params.min_leaf.max(1);
    let n = rows.len();
    let label = |slot: u32| table.labels[rows[slot as usize]] as usize;
    let value = |slot: u32, f: usize| table.value(rows[slot as usize], f);

    // Per feature, slots sorted by value; every node owns the same [lo, hi)
    // range in each list.
    let mut order: Vec<Vec<u32>> = (0..d)
        .map(|f| {
            let mut o: Vec<u32> = (0..n as u32).collect();
            o.sort_by(|&a, &b| value(a, f).total_cmp(&value(b, f)).then(a.cmp(&b)));
            o
        })
        .collect();

    let mut nodes: Vec<Node> = Vec::new();
    let mut goes_left = vec![false; n];
    let mut scratch: Vec<u32> = Vec::with_capacity(n);
    // (node id, lo, hi, depth)
    let mut stack = vec![(0usize, 0usize, n, 0usize)];
    nodes.push(Node::Leaf { histogram: vec![] });

    while let Some((id, lo, hi, depth)) = stack.pop() {
        let size = hi - lo;
        let mut counts = vec![0usize; k];
        for &s in &order[0][lo..hi] {
            counts[label(s)] += 1;
        }
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_capped = params.max_depth.is_some_and(|m| depth >= m);
        if pure || size < 2 * min_leaf || depth_capped {
            nodes[id] = Node::Leaf { histogram: counts };
            continue;
        }

        let features: Vec<usize> = if mtry == d {
            (0..d).collect()
        } else {
            let mut f = sample(rng, d, mtry).into_vec();
            f.sort_unstable();
            f
        };

        let sum_sq: u64 = counts.iter().map(|&c| (c * c) as u64).sum();
        let parent = size as f64 - sum_sq as f64 / size as f64;
        let mut best: Option<Candidate> = None;
        let mut left = vec![0usize; k];
        for &f in &features {
            left.iter_mut().for_each(|c| *c = 0);
            let seg = &order[f][lo..hi];
            let (mut sl, mut sr) = (0u64, sum_sq);
            for i in 0..size - 1 {
                let c = label(seg[i]);
                sl += 2 * left[c] as u64 + 1;
                sr -= 2 * (counts[c] - left[c]) as u64 - 1;
                left[c] += 1;
                let nl = i + 1;
                let nr = size - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (va, vb) = (value(seg[i], f), value(seg[i + 1], f));
                if va >= vb {
                    continue;
                }
                let child = (nl as f64 - sl as f64 / nl as f64) + (nr as f64 - sr as f64 / nr as f64);
                let gain = parent - child;
                if best.as_ref().is_none_or(|b| gain > b.gain + 1e-12) {
                    let mid = va + (vb - va) / 2.0;
                    let threshold = if mid < vb { mid } else { va };
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        threshold,
                    });
                }
            }
        }

        let Some(split) = best.filter(|b| b.gain > 1e-12) else {
            nodes[id] = Node::Leaf { histogram: counts };
            continue;
        };

        let mut n_left = 0;
        for &s in &order[split.feature][lo..hi] {
            let l = value(s, split.feature) <= split.threshold;
            goes_left[s as usize] = l;
            n_left += l as usize;
        }
        for list in order.iter_mut() {
            scratch.clear();
            let seg = &mut list[lo..hi];
            scratch.extend(seg.iter().copied().filter(|&s| goes_left[s as usize]));
            scratch.extend(seg.iter().copied().filter(|&s| !goes_left[s as usize]));
            seg.copy_from_slice(&scratch);
        }
        let left_id = nodes.len();
        let right_id = left_id + 1;
        nodes.push(Node::Leaf { histogram: vec![] });
        nodes.push(Node::Leaf { histogram: vec![] });
        nodes[id] = Node::Split {
            feature: split.feature,
            threshold: split.threshold,
            left: left_id,
            right: right_id,
        };
        // right pushed first so the left subtree is expanded first
        stack.push((right_id, lo + n_left, hi, depth + 1));
        stack.push((left_id, lo, lo + n_left, depth + 1));
    }

    Ok(DecisionTree {
        nodes,
        params,
        n_features: d,
        n_classes: k,
    })
}
