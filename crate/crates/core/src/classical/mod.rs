//! Pixel-based classifiers: CART, random forest, RBF-SVM.

mod forest;
mod svm;
mod tree;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use forest::{default_mtry, rf_importance, rf_predict, rf_train, Forest, ForestParams};
pub use svm::{rbf, svm_predict, svm_train, PairModel, SvmModel, SvmParams};
pub use tree::{cart_predict, cart_train, gini, DecisionTree, Node, TreeParams};

use crate::error::{Error, Result};
use crate::raster::{LabelRaster, Raster, NODATA};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "algo", rename_all = "lowercase")]
pub enum PixelModel {
    Cart(DecisionTree),
    Rf(Forest),
    Svm(SvmModel),
}

impl PixelModel {
    pub fn predict(&self, row: &[f64]) -> u8 {
        match self {
            PixelModel::Cart(t) => t.predict(row),
            PixelModel::Rf(f) => f.predict(row).0,
            PixelModel::Svm(s) => s.predict(row),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PixelModel::Cart(_) => "cart",
            PixelModel::Rf(_) => "rf",
            PixelModel::Svm(_) => "svm",
        }
    }

    /// Class distribution over `k` classes: forest vote shares, one-hot for
    /// the single-output models.
    pub fn predict_distribution(&self, row: &[f64], k: usize) -> Vec<f64> {
        let mut p = vec![0.0; k];
        match self {
            PixelModel::Rf(f) => {
                for (c, v) in f.predict(row).1.into_iter().enumerate().take(k) {
                    p[c] = v;
                }
            }
            other => {
                if let Some(slot) = p.get_mut(other.predict(row) as usize) {
                    *slot = 1.0;
                }
            }
        }
        p
    }

    /// Class of every pixel whose bands form the feature vector; masked pixels
    /// get nodata.
    pub fn predict_raster(&self, r: &Raster) -> Result<LabelRaster> {
        let (w, h) = r.dims();
        let labels = (0..w * h)
            .into_par_iter()
            .map(|i| {
                if !r.mask()[i] {
                    return NODATA;
                }
                let row: Vec<f64> = r.bands().iter().map(|b| b[i] as f64).collect();
                self.predict(&row)
            })
            .collect();
        LabelRaster::new(w, h, labels)
    }
}

/// Serialized pixel classifier together with the feature columns it expects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub feature_names: Vec<String>,
    pub model: PixelModel,
}

impl ModelDocument {
    pub fn new(feature_names: Vec<String>, model: PixelModel) -> Self {
        ModelDocument {
            format_version: MODEL_FORMAT_VERSION,
            feature_names,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: ModelDocument = serde_json::from_str(&text)?;
        if doc.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::invalid(format!(
                "unsupported model format version {}",
                doc.format_version
            )));
        }
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::FeatureTable;

    #[test]
    fn documents_round_trip() {
        let t = FeatureTable::from_rows(
            vec!["a".into(), "b".into()],
            &[vec![0.0, 1.0], vec![1.0, 0.0], vec![0.2, 0.9], vec![0.9, 0.1]],
            vec![0, 1, 0, 1],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let models = [
            PixelModel::Cart(cart_train(&t, TreeParams { min_leaf: 1, max_depth: None }).unwrap()),
            PixelModel::Rf(rf_train(&t, ForestParams { n_trees: 3, ..Default::default() }, 1).unwrap()),
            PixelModel::Svm(svm_train(&t, SvmParams::default()).unwrap()),
        ];
        for m in models {
            let p = dir.path().join(format!("{}.json", m.name()));
            let doc = ModelDocument::new(t.feature_names.clone(), m);
            doc.save(&p).unwrap();
            let back = ModelDocument::load(&p).unwrap();
            assert_eq!(back.feature_names, doc.feature_names);
            for i in 0..t.n_rows() {
                assert_eq!(back.model.predict(t.row(i)), doc.model.predict(t.row(i)));
            }
        }
    }

    #[test]
    fn rejects_unknown_version() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        let t = FeatureTable::from_rows(vec!["a".into()], &[vec![0.0]], vec![0]).unwrap();
        let mut doc = ModelDocument::new(vec!["a".into()], PixelModel::Cart(cart_train(&t, TreeParams::default()).unwrap()));
        doc.format_version = 99;
        doc.save(&p).unwrap();
        assert!(ModelDocument::load(&p).is_err());
    }
}
