//! Random forest: bootstrap-bagged CART trees with per-split feature
//! subsampling, out-of-bag error, and permutation importance.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::tree::{grow, DecisionTree, TreeParams};
use crate::error::{Error, Result};
use crate::sampling::FeatureTable;
use crate::tiling::argmax_lowest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    /// Features tried per split; `None` means `ceil(sqrt(d))`.
    pub mtry: Option<usize>,
    pub tree: TreeParams,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 300,
            mtry: None,
            tree: TreeParams::default(),
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub mtry: usize,
    /// Seed of every tree's bootstrap draw and feature subsampling.
    pub tree_seeds: Vec<u64>,
    /// Rows in the training table; needed to replay the bootstrap draws.
    pub n_train: usize,
    pub n_classes: usize,
    pub oob_error: f64,
}

/// Default `mtry` for `d` features.
pub fn default_mtry(d: usize) -> usize {
    (d as f64).sqrt().ceil() as usize
}

fn bootstrap_rows(rng: &mut ChaCha8Rng, n: usize, bootstrap: bool) -> Vec<usize> {
    if bootstrap {
        (0..n).map(|_| rng.gen_range(0..n)).collect()
    } else {
        (0..n).collect()
    }
}

impl Forest {
    /// In-bag row indices of tree `t`, replayed from its seed.
    pub fn in_bag(&self, t: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.tree_seeds[t]);
        bootstrap_rows(&mut rng, self.n_train, self.params.bootstrap)
    }

    /// Rows never drawn into tree `t`'s bootstrap.
    pub fn oob_rows(&self, t: usize) -> Vec<usize> {
        let mut seen = vec![false; self.n_train];
        for i in self.in_bag(t) {
            seen[i] = true;
        }
        (0..self.n_train).filter(|&i| !seen[i]).collect()
    }

    pub fn oob_fraction(&self, t: usize) -> f64 {
        self.oob_rows(t).len() as f64 / self.n_train as f64
    }

    /// Majority vote and vote fractions; ties go to the lowest class id.
    pub fn predict(&self, row: &[f64]) -> (u8, Vec<f64>) {
        let mut votes = vec![0usize; self.n_classes];
        for t in &self.trees {
            votes[t.predict(row) as usize] += 1;
        }
        let n = self.trees.len() as f64;
        (
            argmax_lowest(votes.iter().copied()) as u8,
            votes.iter().map(|&v| v as f64 / n).collect(),
        )
    }
}

/// Trains `params.n_trees` trees, each on a bootstrap resample with its own seed.
pub fn rf_train(table: &FeatureTable, params: ForestParams, seed: u64) -> Result<Forest> {
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::Empty("cannot train a forest on zero rows".into()));
    }
    if params.n_trees == 0 {
        return Err(Error::invalid("forest needs at least one tree"));
    }
    let d = table.n_features();
    let mtry = params.mtry.unwrap_or_else(|| default_mtry(d)).clamp(1, d);
    let k = table.n_classes();
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let tree_seeds: Vec<u64> = (0..params.n_trees).map(|_| master.gen()).collect();

    let trees = tree_seeds
        .par_iter()
        .map(|&s| {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let rows = bootstrap_rows(&mut rng, n, params.bootstrap);
            grow(table, &rows, k, params.tree, mtry, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut forest = Forest {
        trees,
        params,
        mtry,
        tree_seeds,
        n_train: n,
        n_classes: k,
        oob_error: f64::NAN,
    };
    forest.oob_error = oob_error(&forest, table);
    Ok(forest)
}

pub fn rf_predict(forest: &Forest, row: &[f64]) -> (u8, Vec<f64>) {
    forest.predict(row)
}

/// Error of the out-of-bag vote: every row is predicted only by the trees that
/// did not see it. Rows that were in every bootstrap are skipped; `NaN` when
/// no row has an out-of-bag tree.
fn oob_error(forest: &Forest, table: &FeatureTable) -> f64 {
    let n = table.n_rows();
    let per_tree: Vec<Vec<(usize, u8)>> = (0..forest.trees.len())
        .into_par_iter()
        .map(|t| {
            forest
                .oob_rows(t)
                .into_iter()
                .map(|i| (i, forest.trees[t].predict(table.row(i))))
                .collect()
        })
        .collect();
    let mut votes = vec![vec![0usize; forest.n_classes]; n];
    for preds in &per_tree {
        for &(i, c) in preds {
            votes[i][c as usize] += 1;
        }
    }
    let (mut wrong, mut seen) = (0usize, 0usize);
    for (i, v) in votes.iter().enumerate() {
        if v.iter().sum::<usize>() == 0 {
            continue;
        }
        seen += 1;
        if argmax_lowest(v.iter().copied()) as u8 != table.labels[i] {
            wrong += 1;
        }
    }
    if seen == 0 {
        f64::NAN
    } else {
        wrong as f64 / seen as f64
    }
}

/// Permutation importance: for each feature, the mean over trees of the
/// increase in out-of-bag error when that feature is shuffled among the tree's
/// out-of-bag rows. `table` must be the training table.
pub fn rf_importance(forest: &Forest, table: &FeatureTable) -> Result<Vec<f64>> {
    let d = table.n_features();
    if forest.trees.first().is_some_and(|t| t.n_features != d) {
        return Err(Error::invalid(format!(
            "forest was trained on {} features, table has {d}",
            forest.trees[0].n_features
        )));
    }
    if table.n_rows() != forest.n_train {
        return Err(Error::invalid(format!(
            "forest was trained on {} rows, table has {}",
            forest.n_train,
            table.n_rows()
        )));
    }
    let per_tree: Vec<Option<Vec<f64>>> = (0..forest.trees.len())
        .into_par_iter()
        .map(|t| {
            let tree = &forest.trees[t];
            let oob = forest.oob_rows(t);
            if oob.is_empty() {
                return None;
            }
            let m = oob.len() as f64;
            let base = oob
                .iter()
                .filter(|&&i| tree.predict(table.row(i)) != table.labels[i])
                .count() as f64
                / m;
            let used = tree.used_features();
            let mut deltas = vec![0.0; d];
            let mut row = vec![0.0; d];
            for f in 0..d {
                if !used[f] {
                    continue;
                }
                let mut rng = ChaCha8Rng::seed_from_u64(forest.tree_seeds[t] ^ (0x5EED_0000 + f as u64));
                let mut perm = oob.clone();
                perm.shuffle(&mut rng);
                let wrong = oob
                    .iter()
                    .zip(&perm)
                    .filter(|(&i, &j)| {
                        row.copy_from_slice(table.row(i));
                        row[f] = table.value(j, f);
                        tree.predict(&row) != table.labels[i]
                    })
                    .count() as f64;
                deltas[f] = wrong / m - base;
            }
            Some(deltas)
        })
        .collect();
    let counted: Vec<&Vec<f64>> = per_tree.iter().flatten().collect();
    if counted.is_empty() {
        return Err(Error::invalid("no tree has out-of-bag rows"));
    }
    let mut imp = vec![0.0; d];
    for deltas in &counted {
        for (a, b) in imp.iter_mut().zip(deltas.iter()) {
            *a += b;
        }
    }
    let nt = counted.len() as f64;
    Ok(imp.into_iter().map(|v| v / nt).collect())
}
