//! Confusion-matrix accuracy assessment and probability-map ensembling.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{ClassLegend, GroundPointSet, LabelRaster, NODATA};
use crate::tiling::ProbMap;

/// Rows are reference classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::shape(format!("{} counts for a {k}x{k} matrix", counts.len())));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn n_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_total(&self, c: usize) -> u64 {
        (0..self.k).map(|j| self.get(c, j)).sum()
    }

    pub fn col_total(&self, c: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, c)).sum()
    }

    /// Counts one pair; nodata on either side is skipped.
    pub fn add(&mut self, reference: u8, predicted: u8) -> Result<()> {
        if reference == NODATA || predicted == NODATA {
            return Ok(());
        }
        for c in [reference, predicted] {
            if c as usize >= self.k {
                return Err(Error::IllegalClassId(c));
            }
        }
        self.counts[reference as usize * self.k + predicted as usize] += 1;
        Ok(())
    }

    pub fn accumulate_raster(&mut self, reference: &LabelRaster, predicted: &LabelRaster) -> Result<()> {
        if reference.dims() != predicted.dims() {
            return Err(Error::GeometryMismatch {
                expected: reference.dims(),
                found: predicted.dims(),
            });
        }
        for (&r, &p) in reference.labels().iter().zip(predicted.labels()) {
            self.add(r, p)?;
        }
        Ok(())
    }

    pub fn accumulate_points(&mut self, reference: &GroundPointSet, predicted: &LabelRaster) -> Result<()> {
        let (w, h) = predicted.dims();
        for p in &reference.points {
            if p.row >= h || p.col >= w {
                return Err(Error::invalid(format!(
                    "point ({}, {}) outside {w}x{h} prediction",
                    p.row, p.col
                )));
            }
            self.add(p.class_id, predicted.get(p.row, p.col))?;
        }
        Ok(())
    }

    /// Element-wise sum of partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("cannot merge {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn overall_accuracy(&self) -> Result<f64> {
        let n = self.total();
        if n == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        Ok((0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / n as f64)
    }

    pub fn class_metrics(&self, c: usize) -> Result<ClassMetrics> {
        if self.total() == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        let d = self.get(c, c) as f64;
        let (col, row) = (self.col_total(c), self.row_total(c));
        let ua = if col > 0 { Some(d / col as f64) } else { None };
        let pa = if row > 0 { Some(d / row as f64) } else { None };
        let f1 = f1_score(ua.unwrap_or(0.0), pa.unwrap_or(0.0));
        Ok(ClassMetrics {
            ua: ua.unwrap_or(0.0),
            pa: pa.unwrap_or(0.0),
            f1: f1.unwrap_or(0.0),
            ua_undefined: ua.is_none(),
            pa_undefined: pa.is_none(),
            f1_undefined: f1.is_none(),
        })
    }

    /// Mean F1 over the classes that occur in the reference or the prediction.
    pub fn macro_f1(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut n = 0;
        for c in 0..self.k {
            if self.row_total(c) + self.col_total(c) > 0 {
                sum += self.class_metrics(c)?.f1;
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Empty("confusion matrix has no counts".into()));
        }
        Ok(sum / n as f64)
    }

    /// Header `reference,0,1,...` followed by one row per reference class.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["reference".to_string()];
        header.extend((0..self.k).map(|c| c.to_string()));
        w.write_record(&header)?;
        for r in 0..self.k {
            let mut row = vec![r.to_string()];
            row.extend((0..self.k).map(|c| self.get(r, c).to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let k = rdr.headers()?.len().saturating_sub(1);
        let mut counts = Vec::with_capacity(k * k);
        for rec in rdr.records() {
            let rec = rec?;
            for v in rec.iter().skip(1) {
                counts.push(
                    v.trim()
                        .parse::<u64>()
                        .map_err(|e| Error::invalid(format!("bad count {v:?}: {e}")))?,
                );
            }
        }
        Self::from_counts(k, counts)
    }
}

/// User's accuracy (precision), producer's accuracy (recall) and F1 of one
/// class. Undefined values are reported as 0 with the flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ua: f64,
    pub pa: f64,
    pub f1: f64,
    pub ua_undefined: bool,
    pub pa_undefined: bool,
    pub f1_undefined: bool,
}

/// `2 * UA * PA / (UA + PA)`; `None` when both are zero.
pub fn f1_score(ua: f64, pa: f64) -> Option<f64> {
    if ua + pa > 0.0 {
        Some(ua * pa / (ua + pa) * 2.0)
    } else {
        None
    }
}

/// Rounds half away from zero at `decimals` places.
pub fn round_half_up(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u8,
    pub name: String,
    /// Reference pixels or points of this class.
    pub count: u64,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model_id: String,
    pub dataset_id: String,
    pub overall_accuracy: f64,
    pub overall_f1: f64,
    pub total: u64,
    pub classes: Vec<ClassReport>,
}

pub fn report(cm: &ConfusionMatrix, legend: &ClassLegend, model_id: &str, dataset_id: &str) -> Result<MetricsReport> {
    if cm.n_classes() != legend.len() {
        return Err(Error::shape(format!(
            "{}-class matrix with a {}-class legend",
            cm.n_classes(),
            legend.len()
        )));
    }
    let classes = legend
        .entries()
        .iter()
        .map(|e| {
            Ok(ClassReport {
                class_id: e.class_id,
                name: e.name.clone(),
                count: cm.row_total(e.class_id as usize),
                metrics: cm.class_metrics(e.class_id as usize)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        model_id: model_id.to_string(),
        dataset_id: dataset_id.to_string(),
        overall_accuracy: cm.overall_accuracy()?,
        overall_f1: cm.macro_f1()?,
        total: cm.total(),
        classes,
    })
}

impl MetricsReport {
    /// Aligned `Category Count precision recall f1-score` table with two decimals.
    pub fn render_table(&self) -> String {
        let width = self.classes.iter().map(|c| c.name.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$} {:>8} {:>9} {:>6} {:>8}", "Category", "Count", "precision", "recall", "f1-score");
        let cell = |v: f64, undefined: bool| {
            if undefined {
                "-".to_string()
            } else {
                format!("{:.2}", round_half_up(v, 2))
            }
        };
        for c in &self.classes {
            let m = &c.metrics;
            let _ = writeln!(
                s,
                "{:<width$} {:>8} {:>9} {:>6} {:>8}",
                c.name,
                c.count,
                cell(m.ua, m.ua_undefined),
                cell(m.pa, m.pa_undefined),
                cell(m.f1, m.f1_undefined)
            );
        }
        let _ = writeln!(s, "{:<width$} {:>8} {:>9} {:>6} {:>8.2}", "Overall", self.total, "", "", round_half_up(self.overall_f1, 2));
        let _ = writeln!(s, "OA {:.2}", round_half_up(self.overall_accuracy, 2));
        s
    }
}

/// Element-wise mean of probability maps with identical geometry.
pub fn ensemble_average(maps: &[&ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::invalid("nothing to ensemble"))?;
    for m in maps {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::GeometryMismatch {
                expected: (first.width, first.height),
                found: (m.width, m.height),
            });
        }
        if m.classes != first.classes {
            return Err(Error::shape(format!(
                "cannot ensemble {} and {} classes",
                first.classes, m.classes
            )));
        }
    }
    let n = maps.len() as f64;
    let probs = (0..first.probs.len())
        .map(|i| maps.iter().map(|m| m.probs[i]).sum::<f64>() / n)
        .collect();
    ProbMap::new(first.width, first.height, first.classes, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GroundPoint;
    use proptest::prelude::*;

    fn cm(k: usize, c: &[u64]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(k, c.to_vec()).unwrap()
    }

    #[test]
    fn accumulate_examples() {
        let r = LabelRaster::new(2, 2, vec![0, 1, 1, NODATA]).unwrap();
        let mut m = ConfusionMatrix::new(2);
        m.accumulate_raster(&r, &r).unwrap();
        assert_eq!(m, cm(2, &[1, 0, 0, 2]));

        let mut m = ConfusionMatrix::new(2);
        let a = LabelRaster::filled(5, 4, 0).unwrap();
        let b = LabelRaster::filled(5, 4, 1).unwrap();
        m.accumulate_raster(&a, &b).unwrap();
        assert_eq!(m.get(0, 1), 20);
        assert!(m.accumulate_raster(&a, &LabelRaster::filled(4, 5, 1).unwrap()).is_err());

        // 40 hits and 10 misses of class 0, 20 misses and 30 hits of class 1
        let reference: Vec<u8> = (0..100).map(|i| (i >= 50) as u8).collect();
        let predicted: Vec<u8> = (0..100)
            .map(|i| match i {
                0..=39 => 0,
                40..=49 => 1,
                50..=69 => 0,
                _ => 1,
            })
            .collect();
        let mut m = ConfusionMatrix::new(2);
        m.accumulate_raster(
            &LabelRaster::new(10, 10, reference).unwrap(),
            &LabelRaster::new(10, 10, predicted).unwrap(),
        )
        .unwrap();
        assert_eq!(m, cm(2, &[40, 10, 20, 30]));
        assert!((m.overall_accuracy().unwrap() - 0.70).abs() < 1e-15);
    }

    #[test]
    fn points_accumulate() {
        let legend = ClassLegend::six_class();
        let pred = LabelRaster::new(2, 2, vec![0, 1, 2, 3]).unwrap();
        let pts = GroundPointSet::new(
            vec![
                GroundPoint { row: 0, col: 1, class_id: 1 },
                GroundPoint { row: 1, col: 1, class_id: 2 },
            ],
            (2, 2),
            &legend,
        )
        .unwrap();
        let mut m = ConfusionMatrix::new(6);
        m.accumulate_points(&pts, &pred).unwrap();
        assert_eq!((m.get(1, 1), m.get(2, 3), m.total()), (1, 1, 2));
    }

    #[test]
    fn accuracy_edge_cases() {
        assert_eq!(cm(2, &[5, 0, 0, 3]).overall_accuracy().unwrap(), 1.0);
        assert_eq!(cm(2, &[0, 5, 3, 0]).overall_accuracy().unwrap(), 0.0);
        assert!(ConfusionMatrix::new(3).overall_accuracy().is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(round_half_up(f1_score(0.87, 0.32).unwrap(), 2), 0.47);
        assert_eq!(round_half_up(f1_score(0.67, 0.05).unwrap(), 2), 0.09);
        assert!((f1_score(0.4, 0.4).unwrap() - 0.4).abs() < 1e-15);
        assert_eq!(f1_score(0.0, 0.0), None);
    }

    #[test]
    fn empty_marginals_are_flagged() {
        // class 2 never referenced nor predicted, class 1 predicted but never right
        let m = cm(3, &[3, 1, 0, 2, 0, 0, 0, 0, 0]);
        let c1 = m.class_metrics(1).unwrap();
        assert_eq!((c1.ua, c1.pa, c1.f1), (0.0, 0.0, 0.0));
        assert!(!c1.ua_undefined && !c1.pa_undefined && c1.f1_undefined);
        let c2 = m.class_metrics(2).unwrap();
        assert!(c2.ua_undefined && c2.pa_undefined && c2.f1_undefined);
        assert!((m.macro_f1().unwrap() - m.class_metrics(0).unwrap().f1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip_and_report() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.csv");
        let m = cm(2, &[40, 10, 20, 30]);
        m.write_csv(&p).unwrap();
        assert_eq!(ConfusionMatrix::read_csv(&p).unwrap(), m);
        let legend = ClassLegend::new([("Tree cover", [0, 0, 0]), ("Water body", [0, 0, 255])]).unwrap();
        let r = report(&m, &legend, "rf", "scene").unwrap();
        assert_eq!(r.classes[0].count, 50);
        let table = r.render_table();
        assert!(table.starts_with("Category"));
        assert!(table.contains("Water body"));
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(serde_json::from_str::<MetricsReport>(&json).unwrap(), r);
        assert!(report(&m, &ClassLegend::six_class(), "", "").is_err());
    }

    #[test]
    fn ensemble_examples() {
        let a = ProbMap::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let b = ProbMap::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let e = ensemble_average(&[&a, &b]).unwrap();
        assert_eq!(e.probs, vec![0.5, 0.5]);
        assert_eq!(e.argmax().labels(), &[0]);
        assert_eq!(ensemble_average(&[&a, &a]).unwrap(), a);

        // 2x2 image, 2 classes
        let m1 = ProbMap::new(2, 2, 2, vec![0.2, 0.5, 0.9, 0.4, 0.8, 0.5, 0.1, 0.6]).unwrap();
        let m2 = ProbMap::new(2, 2, 2, vec![0.6, 0.3, 0.3, 1.0, 0.4, 0.7, 0.7, 0.0]).unwrap();
        let m3 = ProbMap::new(2, 2, 2, vec![0.1, 0.1, 0.6, 0.1, 0.9, 0.9, 0.4, 0.9]).unwrap();
        let e = ensemble_average(&[&m1, &m2, &m3]).unwrap();
        let hand = [0.3, 0.3, 0.6, 0.5, 0.7, 0.7, 0.4, 0.5];
        for (x, h) in e.probs.iter().zip(hand) {
            assert!((x - h).abs() < 1e-15);
        }
        assert!(ensemble_average(&[&a, &m1]).is_err());
    }

    fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
        (2usize..6).prop_flat_map(|k| {
            prop::collection::vec(0u64..50, k * k).prop_map(move |c| ConfusionMatrix::from_counts(k, c).unwrap())
        })
    }

    proptest! {
        #[test]
        fn micro_pa_equals_oa(m in matrix()) {
            prop_assume!(m.total() > 0);
            let n = m.total() as f64;
            let micro: f64 = (0..m.n_classes())
                .map(|c| m.class_metrics(c).unwrap().pa * m.row_total(c) as f64 / n)
                .sum();
            prop_assert!((micro - m.overall_accuracy().unwrap()).abs() < 1e-12);
        }

        #[test]
        fn permuting_classes_permutes_metrics(m in matrix(), rot in 1usize..5) {
            prop_assume!(m.total() > 0);
            let k = m.n_classes();
            let perm = |c: usize| (c + rot) % k;
            let mut counts = vec![0; k * k];
            for r in 0..k {
                for c in 0..k {
                    counts[perm(r) * k + perm(c)] = m.get(r, c);
                }
            }
            let p = ConfusionMatrix::from_counts(k, counts).unwrap();
            prop_assert_eq!(p.overall_accuracy().unwrap(), m.overall_accuracy().unwrap());
            for c in 0..k {
                prop_assert_eq!(p.class_metrics(perm(c)).unwrap(), m.class_metrics(c).unwrap());
            }
        }

        #[test]
        fn f1_bounds(ua in 0.001f64..1.0, pa in 0.001f64..1.0) {
            let f = f1_score(ua, pa).unwrap();
            let lo = ua.min(pa);
            prop_assert!(lo <= f + 1e-15 && f <= 2.0 * lo + 1e-15);
        }

        #[test]
        fn duplicating_members_keeps_argmax(
            raw in prop::collection::vec(prop::collection::vec(0.01f64..1.0, 12), 2..4),
            times in 1usize..4,
        ) {
            let maps: Vec<ProbMap> = raw
                .iter()
                .map(|v| {
                    // 2x2 pixels, 3 classes, normalized per pixel
                    let mut p = v.clone();
                    for i in 0..4 {
                        let s: f64 = (0..3).map(|c| v[c * 4 + i]).sum();
                        for c in 0..3 {
                            p[c * 4 + i] = v[c * 4 + i] / s;
                        }
                    }
                    ProbMap::new(2, 2, 3, p).unwrap()
                })
                .collect();
            let once: Vec<&ProbMap> = maps.iter().collect();
            let many: Vec<&ProbMap> = maps.iter().flat_map(|m| std::iter::repeat_n(m, times)).collect();
            let a = ensemble_average(&once).unwrap();
            let b = ensemble_average(&many).unwrap();
            for i in 0..4 {
                let s: f64 = a.pixel(i).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            // argmax can only flip on exact near-ties caused by rounding
            for i in 0..4 {
                let pa = a.pixel(i);
                let mut sorted = pa.clone();
                sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
                if sorted[0] - sorted[1] > 1e-12 {
                    prop_assert_eq!(a.argmax().labels()[i], b.argmax().labels()[i]);
                }
            }
        }
    }
}
