//! Label-preserving augmentation, inverse-area class weights, and stratified
//! pixel sampling for the pixel classifiers.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassLegend, LabelRaster, Raster, NODATA};

pub const DEFAULT_SAMPLES_PER_CLASS: usize = 2000;

/// Geometric augmentations of a square patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Augmentation {
    /// Rotate -90 degrees (clockwise).
    RotateCw,
    /// Rotate +90 degrees (counter-clockwise).
    RotateCcw,
    /// Up-down flip.
    Flip,
    /// Left-right mirror.
    Mirror,
}

impl Augmentation {
    pub const ALL: [Augmentation; 4] = [
        Augmentation::RotateCw,
        Augmentation::RotateCcw,
        Augmentation::Flip,
        Augmentation::Mirror,
    ];

    /// Source `(row, col)` read by output pixel `(r, c)` in an `n x n` patch.
    #[inline]
    pub fn source(self, r: usize, c: usize, n: usize) -> (usize, usize) {
        match self {
            Augmentation::RotateCcw => (c, n - 1 - r),
            Augmentation::RotateCw => (n - 1 - c, r),
            Augmentation::Flip => (n - 1 - r, c),
            Augmentation::Mirror => (r, n - 1 - c),
        }
    }

    /// Applies the transform to one row-major `n x n` grid.
    pub fn apply_grid<T: Copy>(self, grid: &[T], n: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for c in 0..n {
                let (sr, sc) = self.source(r, c, n);
                out.push(grid[sr * n + sc]);
            }
        }
        out
    }

    pub fn apply(self, raster: &Raster, labels: &LabelRaster) -> Result<(Raster, LabelRaster)> {
        let n = raster.width();
        if raster.height() != n || labels.dims() != (n, n) {
            return Err(Error::invalid(format!(
                "augmentation needs square, matching patches; got {:?} and {:?}",
                raster.dims(),
                labels.dims()
            )));
        }
        let data = raster
            .bands()
            .iter()
            .map(|b| self.apply_grid(b, n))
            .collect();
        let valid = self.apply_grid(raster.mask(), n);
        let r = Raster::new(n, n, raster.band_names().to_vec(), data, valid)?;
        let l = LabelRaster::new(n, n, self.apply_grid(labels.labels(), n))?;
        Ok((r, l))
    }
}

/// The four augmented copies: rotate -90, rotate +90, flip, mirror.
pub fn augment(raster: &Raster, labels: &LabelRaster) -> Result<Vec<(Raster, LabelRaster)>> {
    Augmentation::ALL
        .iter()
        .map(|a| a.apply(raster, labels))
        .collect()
}

/// Per-class loss weights, reciprocal of area share, mean 1 over present classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    /// Classes with no pixels; their weight is 0.
    pub absent: Vec<bool>,
}

impl ClassWeights {
    pub fn uniform(k: usize) -> Self {
        ClassWeights {
            weights: vec![1.0; k],
            absent: vec![false; k],
        }
    }

    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("no labelled pixels for class weights".into()));
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| {
                if n == 0 {
                    0.0
                } else {
                    total as f64 / n as f64
                }
            })
            .collect();
        let absent: Vec<bool> = counts.iter().map(|&n| n == 0).collect();
        let present = absent.iter().filter(|&&a| !a).count();
        let mean = raw.iter().sum::<f64>() / present as f64;
        for (c, _) in absent.iter().enumerate().filter(|(_, &a)| a) {
            log::warn!("class {c} has no pixels in the training area; weight set to 0");
        }
        Ok(ClassWeights {
            weights: raw.iter().map(|w| w / mean).collect(),
            absent,
        })
    }
}

/// Class weights from the pixel counts of a label map.
pub fn class_weights(labels: &LabelRaster, legend: &ClassLegend) -> Result<ClassWeights> {
    ClassWeights::from_counts(&labels.class_counts(legend.len()))
}

/// Row-major feature matrix with one class id per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub feature_names: Vec<String>,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
}

impl FeatureTable {
    pub fn new(feature_names: Vec<String>, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if feature_names.is_empty() {
            return Err(Error::invalid("feature table needs at least one feature"));
        }
        if features.len() != labels.len() * feature_names.len() {
            return Err(Error::shape(format!(
                "{} values for {} rows of {} features",
                features.len(),
                labels.len(),
                feature_names.len()
            )));
        }
        Ok(FeatureTable {
            feature_names,
            features,
            labels,
        })
    }

    pub fn from_rows(feature_names: Vec<String>, rows: &[Vec<f64>], labels: Vec<u8>) -> Result<Self> {
        let features = rows.iter().flatten().copied().collect();
        Self::new(feature_names, features, labels)
    }

    pub fn n_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    #[inline]
    pub fn value(&self, i: usize, f: usize) -> f64 {
        self.features[i * self.n_features() + f]
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().map(|&c| c as usize + 1).max().unwrap_or(0)
    }

    /// Table restricted to the listed feature columns.
    pub fn select_features(&self, cols: &[usize]) -> Result<FeatureTable> {
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.n_features()) {
            return Err(Error::invalid(format!("feature index {bad} out of range")));
        }
        let names = cols.iter().map(|&c| self.feature_names[c].clone()).collect();
        let mut features = Vec::with_capacity(cols.len() * self.n_rows());
        for i in 0..self.n_rows() {
            features.extend(cols.iter().map(|&c| self.value(i, c)));
        }
        FeatureTable::new(names, features, self.labels.clone())
    }

    /// Table restricted to the listed rows.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureTable {
        let mut features = Vec::with_capacity(rows.len() * self.n_features());
        for &i in rows {
            features.extend_from_slice(self.row(i));
        }
        FeatureTable {
            feature_names: self.feature_names.clone(),
            features,
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// CSV with the feature names followed by `class_id` as header.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push("class_id".into());
        w.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<FeatureTable> {
        let mut rdr = csv::Reader::from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header.last().map(String::as_str) != Some("class_id") || header.len() < 2 {
            return Err(Error::invalid("feature CSV must end with a class_id column"));
        }
        let d = header.len() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            for v in rec.iter().take(d) {
                features.push(
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::invalid(format!("bad feature value {v:?}: {e}")))?,
                );
            }
            let c = rec.get(d).unwrap_or("");
            labels.push(
                c.trim()
                    .parse::<u8>()
                    .map_err(|e| Error::invalid(format!("bad class id {c:?}: {e}")))?,
            );
        }
        FeatureTable::new(header[..d].to_vec(), features, labels)
    }
}

/// Stratified pixel sample and the number of rows actually drawn per class.
#[derive(Debug, Clone)]
pub struct StratifiedSample {
    pub table: FeatureTable,
    /// Row-major pixel index of every table row.
    pub positions: Vec<usize>,
    pub sampled_per_class: Vec<usize>,
}

/// Draws up to `n_per_class` valid pixels of each class without replacement.
pub fn stratified_sample(
    r: &Raster,
    l: &LabelRaster,
    k: usize,
    n_per_class: usize,
    seed: u64,
) -> Result<StratifiedSample> {
    if r.dims() != l.dims() {
        return Err(Error::GeometryMismatch {
            expected: r.dims(),
            found: l.dims(),
        });
    }
    if n_per_class == 0 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, (&lab, &ok)) in l.labels().iter().zip(r.mask()).enumerate() {
        if ok && lab != NODATA && (lab as usize) < k {
            pools[lab as usize].push(i);
        }
    }
    let mut positions = Vec::new();
    let mut labels = Vec::new();
    let mut sampled = vec![0usize; k];
    for (c, pool) in pools.iter().enumerate() {
        let take = n_per_class.min(pool.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0xC1A5_5000 + c as u64));
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), take)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        sampled[c] = take;
        labels.extend(std::iter::repeat_n(c as u8, take));
        positions.extend(picked);
    }
    let mut features = Vec::with_capacity(positions.len() * r.n_bands());
    for &i in &positions {
        features.extend(r.bands().iter().map(|b| b[i] as f64));
    }
    let table = FeatureTable::new(r.band_names().to_vec(), features, labels)?;
    Ok(StratifiedSample {
        table,
        positions,
        sampled_per_class: sampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patch(values: Vec<u8>, n: usize) -> (Raster, LabelRaster) {
        let r = Raster::single_band("b", n, n, values.iter().map(|&v| v as f32).collect()).unwrap();
        (r, LabelRaster::new(n, n, values).unwrap())
    }

    #[test]
    fn orientation_conventions() {
        let (r, l) = patch(vec![1, 2, 3, 4], 2);
        let out = augment(&r, &l).unwrap();
        let labels: Vec<Vec<u8>> = out.iter().map(|(_, l)| l.labels().to_vec()).collect();
        assert_eq!(labels[0], vec![3, 1, 4, 2]); // rotate -90
        assert_eq!(labels[1], vec![2, 4, 1, 3]); // rotate +90
        assert_eq!(labels[2], vec![3, 4, 1, 2]); // flip
        assert_eq!(labels[3], vec![2, 1, 4, 3]); // mirror
        for (ar, al) in &out {
            let from_raster: Vec<u8> = ar.band(0).iter().map(|&v| v as u8).collect();
            assert_eq!(from_raster, al.labels());
        }
    }

    #[test]
    fn constant_patch_is_fixed() {
        let (r, l) = patch(vec![5; 9], 3);
        for (ar, al) in augment(&r, &l).unwrap() {
            assert_eq!(ar, r);
            assert_eq!(al, l);
        }
    }

    #[test]
    fn non_square_rejected() {
        let r = Raster::single_band("b", 2, 1, vec![0.0; 2]).unwrap();
        let l = LabelRaster::new(2, 1, vec![0; 2]).unwrap();
        assert!(augment(&r, &l).is_err());
    }

    #[test]
    fn weight_examples() {
        let w = ClassWeights::from_counts(&[2, 1, 1]).unwrap();
        for (a, b) in w.weights.iter().zip([0.6, 1.2, 1.2]) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = ClassWeights::from_counts(&[7, 7, 7, 7]).unwrap();
        assert!(w.weights.iter().all(|&x| (x - 1.0).abs() < 1e-15));
        let w = ClassWeights::from_counts(&[3, 0, 1]).unwrap();
        assert_eq!(w.weights[1], 0.0);
        assert_eq!(w.absent, vec![false, true, false]);
        assert!(ClassWeights::from_counts(&[0, 0]).is_err());
    }

    #[test]
    fn weights_from_label_map() {
        let l = LabelRaster::new(4, 1, vec![0, 0, 1, NODATA]).unwrap();
        let w = class_weights(&l, &ClassLegend::new([("a", [0; 3]), ("b", [0; 3])]).unwrap()).unwrap();
        // proportions 2/3, 1/3 -> raw 1.5, 3 -> mean 2.25
        assert!((w.weights[0] - 1.5 / 2.25).abs() < 1e-12);
        assert!((w.weights[1] - 3.0 / 2.25).abs() < 1e-12);
    }

    fn sample_scene() -> (Raster, LabelRaster) {
        let (w, h) = (20, 10);
        let labels: Vec<u8> = (0..w * h)
            .map(|i| match i {
                0..=2 => 2,
                _ if i % 7 == 0 => NODATA,
                _ => (i % 2) as u8,
            })
            .collect();
        let mut r = Raster::new(
            w,
            h,
            vec!["x".into(), "y".into()],
            vec![
                (0..w * h).map(|i| i as f32).collect(),
                (0..w * h).map(|i| -(i as f32)).collect(),
            ],
            vec![true; w * h],
        )
        .unwrap();
        r.mask_mut()[5] = false;
        (r, LabelRaster::new(w, h, labels).unwrap())
    }

    #[test]
    fn stratified_counts_and_exhaustion() {
        let (r, l) = sample_scene();
        let s = stratified_sample(&r, &l, 4, 10, 3).unwrap();
        assert_eq!(s.sampled_per_class, vec![10, 10, 3, 0]);
        let rows_c2: Vec<usize> = s
            .positions
            .iter()
            .zip(&s.table.labels)
            .filter(|(_, &c)| c == 2)
            .map(|(&p, _)| p)
            .collect();
        assert_eq!(rows_c2, vec![0, 1, 2]);
        for (i, &p) in s.positions.iter().enumerate() {
            assert!(r.mask()[p]);
            assert_ne!(l.labels()[p], NODATA);
            assert_eq!(s.table.value(i, 0), p as f64);
        }
        let mut uniq = s.positions.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), s.positions.len());
    }

    #[test]
    fn stratified_is_deterministic() {
        let (r, l) = sample_scene();
        let a = stratified_sample(&r, &l, 4, 10, 3).unwrap();
        let b = stratified_sample(&r, &l, 4, 10, 3).unwrap();
        assert_eq!(a.positions, b.positions);
        let c = stratified_sample(&r, &l, 4, 10, 4).unwrap();
        assert_ne!(a.positions, c.positions);
    }

    #[test]
    fn feature_csv_round_trip() {
        let t = FeatureTable::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![1.5, -2.0], vec![0.1, 1e-7]],
            vec![3, 0],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        t.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("a,b,class_id\n"));
        assert_eq!(FeatureTable::read_csv(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn augmentations_are_bijections(n in 1usize..9, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid: Vec<u16> = (0..n * n).map(|_| rng.gen_range(0..6)).collect();
            let idx: Vec<usize> = (0..n * n).collect();
            for a in Augmentation::ALL {
                let mut moved = a.apply_grid(&idx, n);
                moved.sort_unstable();
                prop_assert_eq!(&moved, &idx);
                let mut m1 = a.apply_grid(&grid, n);
                let mut m0 = grid.clone();
                m1.sort_unstable();
                m0.sort_unstable();
                prop_assert_eq!(m0, m1);
            }
            let mirror2 = Augmentation::Mirror.apply_grid(&Augmentation::Mirror.apply_grid(&grid, n), n);
            let flip2 = Augmentation::Flip.apply_grid(&Augmentation::Flip.apply_grid(&grid, n), n);
            let rot = Augmentation::RotateCcw.apply_grid(&Augmentation::RotateCw.apply_grid(&grid, n), n);
            prop_assert_eq!(&mirror2, &grid);
            prop_assert_eq!(&flip2, &grid);
            prop_assert_eq!(&rot, &grid);
        }

        #[test]
        fn weights_have_unit_mean(counts in prop::collection::vec(0usize..1000, 1..8)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let w = ClassWeights::from_counts(&counts).unwrap();
            let present: Vec<f64> = w.weights.iter().zip(&w.absent).filter(|(_, &a)| !a).map(|(&x, _)| x).collect();
            let mean = present.iter().sum::<f64>() / present.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
            let total: usize = counts.iter().sum();
            let psum: f64 = counts.iter().map(|&c| c as f64 / total as f64).sum();
            prop_assert!((psum - 1.0).abs() < 1e-12);
        }
    }
}
