//! 256-bin histogram matching of quantized bands.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single band quantized to `0..=255` with a validity mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedBand {
    pub width: usize,
    pub height: usize,
    pub values: Vec<u8>,
    pub valid: Vec<bool>,
}

impl QuantizedBand {
    pub fn new(width: usize, height: usize, values: Vec<u8>, valid: Vec<bool>) -> Result<Self> {
        if values.len() != width * height || valid.len() != values.len() {
            return Err(Error::shape("quantized band grid does not match its dimensions"));
        }
        Ok(QuantizedBand {
            width,
            height,
            values,
            valid,
        })
    }

    /// Band with every pixel valid.
    pub fn from_values(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        let n = values.len();
        Self::new(width, height, values, vec![true; n])
    }

    /// 256-bin histogram over valid pixels.
    pub fn histogram(&self) -> [u64; 256] {
        let mut h = [0u64; 256];
        for (&v, &ok) in self.values.iter().zip(&self.valid) {
            if ok {
                h[v as usize] += 1;
            }
        }
        h
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Source and reference CDFs with the derived remap table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramMap {
    pub source_cdf: Vec<f64>,
    pub reference_cdf: Vec<f64>,
    pub lut: Vec<u8>,
}

fn cumulative(h: &[u64; 256]) -> [u64; 256] {
    let mut c = [0u64; 256];
    let mut acc = 0;
    for (i, &n) in h.iter().enumerate() {
        acc += n;
        c[i] = acc;
    }
    c
}

/// Remaps `source` so its value distribution follows `reference`.
///
/// Each valid source value `v` maps to the smallest reference value `r` with
/// `ref_cdf(r) >= src_cdf(v)`. CDF comparisons are done on integer counts so
/// the table does not depend on floating point rounding. Masked pixels are
/// left untouched.
pub fn histogram_match(
    source: &QuantizedBand,
    reference: &QuantizedBand,
) -> Result<(QuantizedBand, HistogramMap)> {
    let src_cum = cumulative(&source.histogram());
    let ref_cum = cumulative(&reference.histogram());
    let ns = src_cum[255];
    let nr = ref_cum[255];
    if ns == 0 {
        return Err(Error::Empty("source band has no valid pixels".into()));
    }
    if nr == 0 {
        return Err(Error::Empty("reference band has no valid pixels".into()));
    }

    let mut lut = vec![0u8; 256];
    let mut r = 0usize;
    for v in 0..256 {
        // src_cum[v] / ns <= ref_cum[r] / nr, cross-multiplied
        while (ref_cum[r] as u128) * (ns as u128) < (src_cum[v] as u128) * (nr as u128) {
            r += 1;
        }
        lut[v] = r as u8;
    }

    let values = source
        .values
        .iter()
        .zip(&source.valid)
        .map(|(&v, &ok)| if ok { lut[v as usize] } else { v })
        .collect();
    let out = QuantizedBand::new(source.width, source.height, values, source.valid.clone())?;
    let map = HistogramMap {
        source_cdf: src_cum.iter().map(|&c| c as f64 / ns as f64).collect(),
        reference_cdf: ref_cum.iter().map(|&c| c as f64 / nr as f64).collect(),
        lut,
    };
    Ok((out, map))
}

/// Largest absolute CDF difference between two bands over valid pixels.
pub fn kolmogorov_distance(a: &QuantizedBand, b: &QuantizedBand) -> f64 {
    let ca = cumulative(&a.histogram());
    let cb = cumulative(&b.histogram());
    (0..256)
        .map(|i| (ca[i] as f64 / ca[255] as f64 - cb[i] as f64 / cb[255] as f64).abs())
        .fold(0.0, f64::max)
}
