//! RBF support vector machine trained by SMO with second-order working-set
//! selection, combined one-vs-one for multiclass.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampling::FeatureTable;
use crate::tiling::argmax_lowest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmParams {
    pub c: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 300.0,
            gamma: 0.1,
            tol: 1e-3,
            max_iter: 10_000_000,
        }
    }
}

/// Binary machine separating `positive` (y = +1) from `negative` (y = -1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairModel {
    pub positive: u8,
    pub negative: u8,
    /// Standardized support vectors, row-major.
    pub support: Vec<f64>,
    /// `alpha_i * y_i` per support vector.
    pub coef: Vec<f64>,
    /// Decision is `sum coef_i K(sv_i, x) + bias`.
    pub bias: f64,
    /// Maximal KKT violation when the solver stopped.
    pub kkt_gap: f64,
    /// `sum alpha_i y_i` over all training rows.
    pub dual_residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmModel {
    pub params: SvmParams,
    pub n_features: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub classes: Vec<u8>,
    pub pairs: Vec<PairModel>,
}

pub fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

impl PairModel {
    pub fn decision(&self, x: &[f64], gamma: f64) -> f64 {
        let d = x.len();
        self.coef
            .iter()
            .zip(self.support.chunks_exact(d))
            .map(|(a, sv)| a * rbf(sv, x, gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn n_support(&self) -> usize {
        self.coef.len()
    }
}

impl SvmModel {
    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    /// One-vs-one vote; ties go to the lowest class id.
    pub fn predict(&self, row: &[f64]) -> u8 {
        if self.classes.len() == 1 {
            return self.classes[0];
        }
        let x = self.standardize(row);
        let max = *self.classes.iter().max().unwrap() as usize;
        let mut votes = vec![0usize; max + 1];
        for p in &self.pairs {
            let winner = if p.decision(&x, self.params.gamma) > 0.0 {
                p.positive
            } else {
                p.negative
            };
            votes[winner as usize] += 1;
        }
        argmax_lowest(votes) as u8
    }

    /// Decision value of the pair `(a, b)` on a raw row, positive toward `a`.
    pub fn pair_decision(&self, a: u8, b: u8, row: &[f64]) -> Option<f64> {
        let x = self.standardize(row);
        self.pairs.iter().find_map(|p| {
            if (p.positive, p.negative) == (a, b) {
                Some(p.decision(&x, self.params.gamma))
            } else if (p.positive, p.negative) == (b, a) {
                Some(-p.decision(&x, self.params.gamma))
            } else {
                None
            }
        })
    }
}

pub fn svm_predict(model: &SvmModel, row: &[f64]) -> u8 {
    model.predict(row)
}

/// Trains one binary machine per pair of classes present in `table`. Features
/// are standardized with the population mean and standard deviation first.
pub fn svm_train(table: &FeatureTable, params: SvmParams) -> Result<SvmModel> {
    if table.n_rows() == 0 {
        return Err(Error::Empty("cannot train an SVM on zero rows".into()));
    }
    if !(params.c > 0.0 && params.gamma > 0.0 && params.tol > 0.0) {
        return Err(Error::invalid("SVM needs C, gamma and tol > 0"));
    }
    let (n, d) = (table.n_rows(), table.n_features());
    let mut mean = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for f in 0..d {
        mean[f] = (0..n).map(|i| table.value(i, f)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (table.value(i, f) - mean[f]).powi(2)).sum::<f64>() / n as f64;
        scale[f] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let x: Vec<f64> = table
        .features
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(mean.iter().zip(&scale)).map(|(v, (m, s))| (v - m) / s))
        .collect();

    let mut counts = vec![0usize; 256];
    for &l in &table.labels {
        counts[l as usize] += 1;
    }
    let classes: Vec<u8> = (0..=255u8).filter(|&c| counts[c as usize] > 0).collect();
    let pair_ids: Vec<(u8, u8)> = classes
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| classes[i + 1..].iter().map(move |&b| (a, b)))
        .collect();

    let pairs = pair_ids
        .par_iter()
        .map(|&(a, b)| {
            let rows: Vec<usize> = (0..n).filter(|&i| table.labels[i] == a || table.labels[i] == b).collect();
            let y: Vec<f64> = rows.iter().map(|&i| if table.labels[i] == a { 1.0 } else { -1.0 }).collect();
            let px: Vec<f64> = rows.iter().flat_map(|&i| x[i * d..(i + 1) * d].iter().copied()).collect();
            let sol = smo(&px, &y, d, params);
            let mut support = Vec::new();
            let mut coef = Vec::new();
            for (k, &al) in sol.alpha.iter().enumerate() {
                if al > 0.0 {
                    support.extend_from_slice(&px[k * d..(k + 1) * d]);
                    coef.push(al * y[k]);
                }
            }
            PairModel {
                positive: a,
                negative: b,
                support,
                coef,
                bias: -sol.rho,
                kkt_gap: sol.gap,
                dual_residual: sol.alpha.iter().zip(&y).map(|(a, y)| a * y).sum(),
                iterations: sol.iterations,
            }
        })
        .collect();

    Ok(SvmModel {
        params,
        n_features: d,
        mean,
        scale,
        classes,
        pairs,
    })
}

struct Solution {
    alpha: Vec<f64>,
    rho: f64,
    gap: f64,
    iterations: usize,
}

const TAU: f64 = 1e-12;
const PRECOMPUTE_LIMIT: usize = 4096;

enum Kernel<'a> {
    Full(Vec<f64>),
    OnDemand { x: &'a [f64], d: usize, gamma: f64 },
}

impl Kernel<'_> {
    fn column(&self, i: usize, n: usize, out: &mut [f64]) {
        match self {
            Kernel::Full(k) => out.copy_from_slice(&k[i * n..(i + 1) * n]),
            Kernel::OnDemand { x, d, gamma } => {
                let xi = &x[i * d..(i + 1) * d];
                for (j, o) in out.iter_mut().enumerate() {
                    *o = rbf(xi, &x[j * d..(j + 1) * d], *gamma);
                }
            }
        }
    }
}

/// Solves `min 1/2 a'Qa - e'a` subject to `0 <= a <= C`, `y'a = 0`, where
/// `Q_ij = y_i y_j K(x_i, x_j)`.
fn smo(x: &[f64], y: &[f64], d: usize, p: SvmParams) -> Solution {
    let n = y.len();
    let c = p.c;
    let kernel = if n <= PRECOMPUTE_LIMIT {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in i..n {
                let v = rbf(&x[i * d..(i + 1) * d], &x[j * d..(j + 1) * d], p.gamma);
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
        }
        Kernel::Full(k)
    } else {
        Kernel::OnDemand { x, d, gamma: p.gamma }
    };
    // RBF diagonal is always 1
    let kdiag = 1.0;
    let mut alpha = vec![0.0; n];
    let mut g = vec![-1.0; n];
    let mut ki = vec![0.0; n];
    let mut kj = vec![0.0; n];
    let up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut iterations = 0;
    let mut gap;
    loop {
        let mut gmax = f64::NEG_INFINITY;
        let mut i = usize::MAX;
        for t in 0..n {
            if up(alpha[t], y[t]) && -y[t] * g[t] > gmax {
                gmax = -y[t] * g[t];
                i = t;
            }
        }
        let mut gmax2 = f64::NEG_INFINITY;
        for t in 0..n {
            if low(alpha[t], y[t]) {
                gmax2 = gmax2.max(y[t] * g[t]);
            }
        }
        gap = gmax + gmax2;
        if i == usize::MAX || gap < p.tol || iterations >= p.max_iter {
            if i == usize::MAX || gmax2 == f64::NEG_INFINITY {
                gap = 0.0;
            }
            break;
        }
        kernel.column(i, n, &mut ki);
        let mut j = usize::MAX;
        let mut best = f64::INFINITY;
        for t in 0..n {
            if !low(alpha[t], y[t]) {
                continue;
            }
            let b = gmax + y[t] * g[t];
            if b > 0.0 {
                let a = kdiag + kdiag - 2.0 * ki[t];
                let a = if a > 0.0 { a } else { TAU };
                let obj = -(b * b) / a;
                if obj < best {
                    best = obj;
                    j = t;
                }
            }
        }
        if j == usize::MAX {
            break;
        }
        kernel.column(j, n, &mut kj);
        iterations += 1;

        let (ai_old, aj_old) = (alpha[i], alpha[j]);
        let (mut ai, mut aj) = (ai_old, aj_old);
        if y[i] != y[j] {
            let quad = (2.0 * kdiag - 2.0 * ki[j]).max(TAU);
            let delta = (-g[i] - g[j]) / quad;
            let diff = ai - aj;
            ai += delta;
            aj += delta;
            if diff > 0.0 {
                if aj < 0.0 {
                    aj = 0.0;
                    ai = diff;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = -diff;
            }
            if diff > 0.0 {
                if ai > c {
                    ai = c;
                    aj = c - diff;
                }
            } else if aj > c {
                aj = c;
                ai = c + diff;
            }
        } else {
            let quad = (2.0 * kdiag - 2.0 * ki[j]).max(TAU);
            let delta = (g[i] - g[j]) / quad;
            let sum = ai + aj;
            ai -= delta;
            aj += delta;
            if sum > c {
                if ai > c {
                    ai = c;
                    aj = sum - c;
                }
            } else if aj < 0.0 {
                aj = 0.0;
                ai = sum;
            }
            if sum > c {
                if aj > c {
                    aj = c;
                    ai = sum - c;
                }
            } else if ai < 0.0 {
                ai = 0.0;
                aj = sum;
            }
        }
        alpha[i] = ai;
        alpha[j] = aj;
        let (di, dj) = (alpha[i] - ai_old, alpha[j] - aj_old);
        for t in 0..n {
            g[t] += y[t] * (y[i] * ki[t] * di + y[j] * kj[t] * dj);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut n_free) = (0.0, 0usize);
    for t in 0..n {
        let yg = y[t] * g[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            n_free += 1;
            free_sum += yg;
        }
    }
    let rho = if n_free > 0 {
        free_sum / n_free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else {
        0.0
    };
    Solution {
        alpha,
        rho,
        gap,
        iterations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[Vec<f64>], labels: &[u8]) -> FeatureTable {
        let names = (0..rows[0].len()).map(|i| format!("f{i}")).collect();
        FeatureTable::from_rows(names, rows, labels.to_vec()).unwrap()
    }

    fn blobs(n: usize, seed: u64, k: u8) -> FeatureTable {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % k as usize) as u8;
            let cx = 4.0 * c as f64;
            rows.push(vec![cx + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            labels.push(c);
        }
        table(&rows, &labels)
    }

    #[test]
    fn rbf_is_one_at_zero_distance() {
        assert_eq!(rbf(&[1.5, -2.0, 7.0], &[1.5, -2.0, 7.0], 0.1), 1.0);
        assert!((rbf(&[0.0], &[2.0], 0.1) - (-0.4f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn two_point_problem_matches_hand_solution() {
        let t = table(&[vec![-1.0], vec![1.0]], &[0, 1]);
        let m = svm_train(&t, SvmParams { c: 1e6, ..Default::default() }).unwrap();
        let p = &m.pairs[0];
        assert_eq!(p.n_support(), 2);
        // alpha = 1 / (1 - exp(-0.4)) for both points
        let expect = 1.0 / (1.0 - (-0.4f64).exp());
        assert!((p.coef[0] - expect).abs() < 1e-9, "{:?}", p.coef);
        assert!((p.coef[1] + expect).abs() < 1e-9);
        assert!(m.pair_decision(0, 1, &[0.0]).unwrap().abs() < 1e-9);
        assert!(m.pair_decision(0, 1, &[-0.01]).unwrap() > 0.0);
        assert_eq!(m.predict(&[-0.2]), 0);
        assert_eq!(m.predict(&[0.2]), 1);
    }

    #[test]
    fn dual_feasibility_and_kkt() {
        let t = blobs(150, 4, 3);
        let m = svm_train(&t, SvmParams::default()).unwrap();
        assert_eq!(m.pairs.len(), 3);
        for p in &m.pairs {
            assert!(p.kkt_gap <= 1e-3);
            assert!(p.dual_residual.abs() <= 1e-3);
            for c in &p.coef {
                assert!(c.abs() > 0.0 && c.abs() <= 300.0 + 1e-9);
            }
        }
        let correct = (0..t.n_rows()).filter(|&i| m.predict(t.row(i)) == t.labels[i]).count();
        assert!(correct as f64 / t.n_rows() as f64 > 0.97);
    }

    #[test]
    fn duplicated_rows_keep_decision_signs() {
        let t = blobs(40, 9, 2);
        let dup = t.select_rows(&(0..t.n_rows()).chain(0..t.n_rows()).collect::<Vec<_>>());
        let a = svm_train(&t, SvmParams::default()).unwrap();
        let b = svm_train(&dup, SvmParams::default()).unwrap();
        for gx in -20..=60 {
            for gy in -10..=10 {
                let row = [gx as f64 * 0.1, gy as f64 * 0.1];
                let (fa, fb) = (
                    a.pair_decision(0, 1, &row).unwrap(),
                    b.pair_decision(0, 1, &row).unwrap(),
                );
                if fa.abs() > 1e-2 {
                    assert_eq!(fa > 0.0, fb > 0.0, "at {row:?}: {fa} vs {fb}");
                }
            }
        }
    }

    #[test]
    fn single_class_predicts_it() {
        let t = table(&[vec![1.0], vec![2.0]], &[3, 3]);
        let m = svm_train(&t, SvmParams::default()).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.predict(&[9.0]), 3);
    }

    #[test]
    fn constant_feature_does_not_break_scaling() {
        let t = table(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![8.0, 5.0], vec![9.0, 5.0]], &[0, 0, 1, 1]);
        let m = svm_train(&t, SvmParams::default()).unwrap();
        assert_eq!(m.scale[1], 1.0);
        assert_eq!(m.predict(&[1.5, 5.0]), 0);
        assert_eq!(m.predict(&[8.5, 5.0]), 1);
    }

    #[test]
    fn vote_ties_go_to_lowest_class() {
        // three classes on a line; the rigged pairs vote once for each class
        let t = blobs(30, 1, 3);
        let mut m = svm_train(&t, SvmParams::default()).unwrap();
        for p in &mut m.pairs {
            p.coef.clear();
            p.support.clear();
            p.bias = match (p.positive, p.negative) {
                (0, 1) => 1.0,
                (0, 2) => -1.0,
                _ => 1.0,
            };
        }
        assert_eq!(m.predict(&[0.0, 0.0]), 0);
    }

    #[test]
    fn training_is_deterministic() {
        let t = blobs(90, 2, 3);
        assert_eq!(svm_train(&t, SvmParams::default()).unwrap(), svm_train(&t, SvmParams::default()).unwrap());
    }
}
