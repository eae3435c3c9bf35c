//! Land-cover segmentation pipeline toolkit.
//!
//! Raster preprocessing, overlap tiling, augmentation and class weighting,
//! from-scratch pixel classifiers (CART, random forest, RBF-SVM), miniature
//! encoder-decoder segmentation networks on a small reverse-mode tensor
//! engine, center-crop stitched inference, ensembling, and confusion-matrix
//! accuracy assessment. Everything runs at desk scale on synthetic terrain.

pub mod classical;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod neural;
pub mod preprocess;
pub mod raster;
pub mod sampling;
pub mod scalar;
pub mod synth;
pub mod tiling;

pub use error::{Error, Result};
pub use raster::{ClassLegend, GroundPointSet, LabelRaster, Raster, NODATA};
pub use scalar::Scalar;

pub type Tensor64 = neural::Tensor<f64>;
pub type Tensor32 = neural::Tensor<f32>;
pub type Network64 = neural::NetworkParams<f64>;
pub type Network32 = neural::NetworkParams<f32>;
