//! Radiometric alignment, cloud masking, terrain derivatives, band stacking and
//! value scaling that turn raw inputs into the 7-band training stack.

mod histogram;
pub(crate) mod terrain;

pub use histogram::{histogram_match, kolmogorov_distance, HistogramMap, QuantizedBand};
pub use terrain::{horn_gradient, horn_slope_degrees};
pub(crate) use terrain::reflect;

use crate::error::{Error, Result};
use crate::raster::{LabelRaster, Raster};

/// Spectral band names in stack order.
pub const SPECTRAL_BANDS: [&str; 5] = ["blue", "green", "red", "red_edge", "nir"];

/// Full 7-band stack order: spectral bands, then elevation and slope.
pub const STACK_BANDS: [&str; 7] = ["blue", "green", "red", "red_edge", "nir", "dem", "slope"];

/// Per-pixel cloud flags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CloudMask {
    pub width: usize,
    pub height: usize,
    pub cloud: Vec<bool>,
}

impl CloudMask {
    pub fn new(width: usize, height: usize, cloud: Vec<bool>) -> Result<Self> {
        if cloud.len() != width * height {
            return Err(Error::shape("cloud grid does not match its dimensions"));
        }
        Ok(CloudMask {
            width,
            height,
            cloud,
        })
    }

    pub fn clear(width: usize, height: usize) -> Self {
        CloudMask {
            width,
            height,
            cloud: vec![false; width * height],
        }
    }

    /// Cloud grids travel as u8 label files: any nonzero value is cloud.
    pub fn from_labels(l: &LabelRaster) -> Self {
        CloudMask {
            width: l.width(),
            height: l.height(),
            cloud: l.labels().iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn to_labels(&self) -> LabelRaster {
        LabelRaster::new(
            self.width,
            self.height,
            self.cloud.iter().map(|&c| c as u8).collect(),
        )
        .expect("cloud mask geometry is consistent")
    }

    pub fn cloud_fraction(&self) -> f64 {
        self.cloud.iter().filter(|&&c| c).count() as f64 / self.cloud.len() as f64
    }
}

fn check_dims(expected: (usize, usize), found: (usize, usize)) -> Result<()> {
    if expected != found {
        return Err(Error::GeometryMismatch { expected, found });
    }
    Ok(())
}

/// Clears the validity of every clouded pixel; values are left as they were.
pub fn apply_cloud_mask(r: &Raster, cloud: &CloudMask) -> Result<Raster> {
    check_dims(r.dims(), (cloud.width, cloud.height))?;
    let mut out = r.clone();
    for (v, &c) in out.mask_mut().iter_mut().zip(&cloud.cloud) {
        *v &= !c;
    }
    Ok(out)
}

/// Slope in degrees from a single-band elevation raster.
pub fn slope_from_dem(dem: &Raster, cell_size: f64) -> Result<Raster> {
    if dem.n_bands() != 1 {
        return Err(Error::invalid(format!(
            "elevation raster must have one band, found {}",
            dem.n_bands()
        )));
    }
    let (w, h) = dem.dims();
    let z: Vec<f64> = dem.band(0).iter().map(|&v| v as f64).collect();
    let (slope, valid) = horn_slope_degrees(&z, dem.mask(), w, h, cell_size)?;
    Raster::new(
        w,
        h,
        vec!["slope".into()],
        vec![slope.into_iter().map(|v| v as f32).collect()],
        valid,
    )
}

/// Stacks five spectral bands with elevation and slope into the canonical
/// 7-band order; the output mask is the conjunction of the input masks.
pub fn stack_bands(spectral: &Raster, dem: &Raster, slope: &Raster) -> Result<Raster> {
    if spectral.n_bands() != SPECTRAL_BANDS.len() {
        return Err(Error::invalid(format!(
            "expected {} spectral bands, found {}",
            SPECTRAL_BANDS.len(),
            spectral.n_bands()
        )));
    }
    for aux in [dem, slope] {
        check_dims(spectral.dims(), aux.dims())?;
        if aux.n_bands() != 1 {
            return Err(Error::invalid("elevation and slope inputs must be single band"));
        }
    }
    let mut data: Vec<Vec<f32>> = spectral.bands().to_vec();
    data.push(dem.band(0).to_vec());
    data.push(slope.band(0).to_vec());
    let valid = spectral
        .mask()
        .iter()
        .zip(dem.mask())
        .zip(slope.mask())
        .map(|((&a, &b), &c)| a && b && c)
        .collect();
    let (w, h) = spectral.dims();
    Raster::new(
        w,
        h,
        STACK_BANDS.iter().map(|s| s.to_string()).collect(),
        data,
        valid,
    )
}

/// Linear map of the valid range of band `b` onto `0..=255`, rounding half up.
/// A constant band maps to 0; masked pixels are stored as 0.
pub fn scale_to_u8(r: &Raster, b: usize) -> Result<QuantizedBand> {
    let values = r.band(b);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&v, &ok) in values.iter().zip(r.mask()) {
        if ok {
            lo = lo.min(v as f64);
            hi = hi.max(v as f64);
        }
    }
    if lo > hi {
        return Err(Error::Empty(format!("band {b} has no valid pixels")));
    }
    let span = hi - lo;
    let q = values
        .iter()
        .zip(r.mask())
        .map(|(&v, &ok)| {
            if !ok || span == 0.0 {
                0
            } else {
                ((v as f64 - lo) * 255.0 / span + 0.5).floor().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    QuantizedBand::new(r.width(), r.height(), q, r.mask().to_vec())
}

/// Reassembles quantized bands into an `f32` raster.
pub fn quantized_to_raster(bands: &[QuantizedBand], names: &[&str]) -> Result<Raster> {
    let first = bands
        .first()
        .ok_or_else(|| Error::invalid("no bands to assemble"))?;
    let (w, h) = (first.width, first.height);
    let mut valid = vec![true; w * h];
    for b in bands {
        check_dims((w, h), (b.width, b.height))?;
        for (v, &ok) in valid.iter_mut().zip(&b.valid) {
            *v &= ok;
        }
    }
    Raster::new(
        w,
        h,
        names.iter().map(|s| s.to_string()).collect(),
        bands
            .iter()
            .map(|b| b.values.iter().map(|&v| v as f32).collect())
            .collect(),
        valid,
    )
}

/// Output of the full preprocessing chain.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub stack: Raster,
    pub maps: Vec<HistogramMap>,
}

/// Scale, histogram match against `reference`, cloud mask, derive slope and stack.
pub fn preprocess_scene(
    spectral: &Raster,
    cloud: &CloudMask,
    reference: &Raster,
    dem: &Raster,
    cell_size: f64,
) -> Result<Preprocessed> {
    if spectral.n_bands() != SPECTRAL_BANDS.len() || reference.n_bands() != SPECTRAL_BANDS.len() {
        return Err(Error::invalid("input and reference need the five spectral bands"));
    }
    let mut matched = Vec::with_capacity(SPECTRAL_BANDS.len());
    let mut maps = Vec::with_capacity(SPECTRAL_BANDS.len());
    for b in 0..SPECTRAL_BANDS.len() {
        let src = scale_to_u8(spectral, b)?;
        let refq = scale_to_u8(reference, b)?;
        let (out, map) = histogram_match(&src, &refq)?;
        matched.push(out);
        maps.push(map);
    }
    let spectral = quantized_to_raster(&matched, &SPECTRAL_BANDS)?;
    let spectral = apply_cloud_mask(&spectral, cloud)?;
    let slope = slope_from_dem(dem, cell_size)?;
    let stack = stack_bands(&spectral, dem, &slope)?;
    Ok(Preprocessed { stack, maps })
}
