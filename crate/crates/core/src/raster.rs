//! Raster and label data model, class legend, and the raw band-sequential
//! container format used for interchange between pipeline stages.
//!
//! A dataset on disk is a pair of files sharing a stem:
//!
//! * `<stem>.json`: sidecar `{width, height, bands, dtype, byte_order}` plus an
//!   optional free-form `origin` value that no algorithm reads.
//! * `<stem>.bin`: the body. For `f32` rasters, band-sequential row-major
//!   little-endian values followed by one mask byte per pixel (`1` = valid).
//!   For `u8` label maps, one byte per pixel with `255` as nodata.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved label code for pixels without a class.
pub const NODATA: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub class_id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered set of land-cover classes with contiguous ids `0..K`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassLegend {
    entries: Vec<LegendEntry>,
    nodata_id: u8,
}

impl ClassLegend {
    /// Builds a legend from `(name, color)` pairs; ids are assigned in order.
    pub fn new<S: Into<String>>(classes: impl IntoIterator<Item = (S, [u8; 3])>) -> Result<Self> {
        let entries: Vec<LegendEntry> = classes
            .into_iter()
            .enumerate()
            .map(|(i, (name, color))| LegendEntry {
                class_id: i as u8,
                name: name.into(),
                color,
            })
            .collect();
        let legend = ClassLegend {
            entries,
            nodata_id: NODATA,
        };
        legend.validate()?;
        Ok(legend)
    }

    /// The seven-class default: the six evaluated classes plus Wetland.
    pub fn seven_class() -> Self {
        Self::new([
            ("Tree cover", [0, 100, 0]),
            ("Shrubland", [150, 100, 0]),
            ("Grassland", [255, 180, 50]),
            ("Cropland", [240, 150, 255]),
            ("Artificial surface", [250, 0, 0]),
            ("Water body", [0, 100, 200]),
            ("Wetland", [0, 150, 160]),
        ])
        .expect("static legend is valid")
    }

    /// The six classes that are actually evaluated (no Wetland).
    pub fn six_class() -> Self {
        let mut legend = Self::seven_class();
        legend.entries.truncate(6);
        legend
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::invalid("legend has no classes"));
        }
        if self.entries.len() >= NODATA as usize {
            return Err(Error::invalid("legend has too many classes"));
        }
        let mut names = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.class_id as usize != i {
                return Err(Error::invalid(format!(
                    "class ids must be contiguous from 0, found {} at position {i}",
                    e.class_id
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::invalid(format!("duplicate class name {:?}", e.name)));
            }
        }
        if self.nodata_id != NODATA {
            return Err(Error::invalid("nodata id must be 255"));
        }
        Ok(())
    }

    /// Number of classes, K.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn nodata_id(&self) -> u8 {
        self.nodata_id
    }

    pub fn entries(&self) -> &[LegendEntry] {
        &self.entries
    }

    pub fn contains(&self, class_id: u8) -> bool {
        (class_id as usize) < self.entries.len()
    }

    pub fn name(&self, class_id: u8) -> Option<&str> {
        self.entries.get(class_id as usize).map(|e| e.name.as_str())
    }
}

impl Default for ClassLegend {
    fn default() -> Self {
        Self::seven_class()
    }
}

/// Multi-band grid of 32-bit measurements with a per-pixel validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    bands: Vec<String>,
    data: Vec<Vec<f32>>,
    valid: Vec<bool>,
}

impl Raster {
    pub fn new(
        width: usize,
        height: usize,
        bands: Vec<String>,
        data: Vec<Vec<f32>>,
        valid: Vec<bool>,
    ) -> Result<Self> {
        let n = width * height;
        if width == 0 || height == 0 {
            return Err(Error::invalid("raster dimensions must be positive"));
        }
        if bands.len() != data.len() {
            return Err(Error::shape(format!(
                "{} band names for {} band grids",
                bands.len(),
                data.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &bands {
            if !seen.insert(name.as_str()) {
                return Err(Error::invalid(format!("duplicate band name {name:?}")));
            }
        }
        if let Some((i, _)) = data.iter().enumerate().find(|(_, b)| b.len() != n) {
            return Err(Error::shape(format!(
                "band {} has {} cells, expected {n}",
                bands[i],
                data[i].len()
            )));
        }
        if valid.len() != n {
            return Err(Error::shape(format!("mask has {} cells, expected {n}", valid.len())));
        }
        Ok(Raster {
            width,
            height,
            bands,
            data,
            valid,
        })
    }

    /// A single band raster with every pixel valid.
    pub fn single_band(name: &str, width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        let n = width * height;
        Self::new(width, height, vec![name.to_string()], vec![values], vec![true; n])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn n_bands(&self) -> usize {
        self.bands.len()
    }

    pub fn band_names(&self) -> &[String] {
        &self.bands
    }

    pub fn band_index(&self, name: &str) -> Option<usize> {
        self.bands.iter().position(|b| b == name)
    }

    pub fn band(&self, b: usize) -> &[f32] {
        &self.data[b]
    }

    pub fn band_mut(&mut self, b: usize) -> &mut [f32] {
        &mut self.data[b]
    }

    pub fn bands(&self) -> &[Vec<f32>] {
        &self.data
    }

    pub fn mask(&self) -> &[bool] {
        &self.valid
    }

    pub fn mask_mut(&mut self) -> &mut [bool] {
        &mut self.valid
    }

    #[inline]
    pub fn get(&self, band: usize, row: usize, col: usize) -> f32 {
        self.data[band][row * self.width + col]
    }

    #[inline]
    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.valid[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// New raster holding the listed bands, in the given order.
    pub fn select_bands(&self, indices: &[usize]) -> Result<Raster> {
        let mut names = Vec::with_capacity(indices.len());
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            let name = self
                .bands
                .get(i)
                .ok_or_else(|| Error::invalid(format!("band index {i} out of range")))?;
            names.push(name.clone());
            data.push(self.data[i].clone());
        }
        Raster::new(self.width, self.height, names, data, self.valid.clone())
    }

    /// Feature vector of one pixel across all bands.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f32> {
        let i = row * self.width + col;
        self.data.iter().map(|b| b[i]).collect()
    }
}

/// Single-band class-id grid; `255` marks nodata.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    width: usize,
    height: usize,
    labels: Vec<u8>,
}

impl LabelRaster {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("label dimensions must be positive"));
        }
        if labels.len() != width * height {
            return Err(Error::shape(format!(
                "label grid has {} cells, expected {}",
                labels.len(),
                width * height
            )));
        }
        Ok(LabelRaster {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.labels[row * self.width + col]
    }

    /// Checks every non-nodata value against the legend.
    pub fn check_legend(&self, legend: &ClassLegend) -> Result<()> {
        match self
            .labels
            .iter()
            .find(|&&v| v != NODATA && !legend.contains(v))
        {
            Some(&v) => Err(Error::IllegalClassId(v)),
            None => Ok(()),
        }
    }

    /// Per-class pixel counts (length `k`); nodata is skipped.
    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut counts = vec![0usize; k];
        for &v in &self.labels {
            if (v as usize) < k {
                counts[v as usize] += 1;
            }
        }
        counts
    }
}

/// A field-survey style evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundPoint {
    pub row: usize,
    pub col: usize,
    pub class_id: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundPointSet {
    pub points: Vec<GroundPoint>,
}

impl GroundPointSet {
    pub fn new(points: Vec<GroundPoint>, dims: (usize, usize), legend: &ClassLegend) -> Result<Self> {
        for p in &points {
            if p.col >= dims.0 || p.row >= dims.1 {
                return Err(Error::invalid(format!(
                    "point ({}, {}) outside {}x{} grid",
                    p.row, p.col, dims.0, dims.1
                )));
            }
            if !legend.contains(p.class_id) {
                return Err(Error::IllegalClassId(p.class_id));
            }
        }
        Ok(GroundPointSet { points })
    }

    /// Reads a `row,col,class_id` CSV with a header line.
    pub fn read_csv(path: &Path, dims: (usize, usize), legend: &ClassLegend) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let points = rdr
            .deserialize::<GroundPoint>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(points, dims, legend)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    width: usize,
    height: usize,
    bands: Vec<String>,
    dtype: String,
    byte_order: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    origin: Option<serde_json::Value>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Path of the JSON sidecar for a dataset stem.
pub fn sidecar_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".json")
}

/// Path of the binary body for a dataset stem.
pub fn body_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".bin")
}

/// Exact body length in bytes of an `f32` raster.
pub fn raster_body_len(width: usize, height: usize, n_bands: usize) -> u64 {
    let n = (width * height) as u64;
    n * n_bands as u64 * 4 + n
}

fn write_sidecar(stem: &Path, sidecar: &Sidecar) -> Result<()> {
    let path = sidecar_path(stem);
    let text = serde_json::to_string_pretty(sidecar)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn read_sidecar(stem: &Path, dtype: &str) -> Result<Sidecar> {
    let path = sidecar_path(stem);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::Sidecar {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let bad = |reason: String| Error::Sidecar {
        path: path.clone(),
        reason,
    };
    if sidecar.dtype != dtype {
        return Err(bad(format!("dtype {:?}, expected {dtype:?}", sidecar.dtype)));
    }
    if sidecar.byte_order != "little" {
        return Err(bad(format!("unsupported byte order {:?}", sidecar.byte_order)));
    }
    if sidecar.width == 0 || sidecar.height == 0 {
        return Err(bad("zero dimension".into()));
    }
    Ok(sidecar)
}

fn read_body(stem: &Path, expected: u64) -> Result<Vec<u8>> {
    let path = body_path(stem);
    let body = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if body.len() as u64 != expected {
        return Err(Error::BodySize {
            path,
            expected,
            found: body.len() as u64,
        });
    }
    Ok(body)
}

/// Writes a raster as `<stem>.json` + `<stem>.bin`.
pub fn write_raster(r: &Raster, stem: &Path) -> Result<()> {
    write_raster_with_origin(r, stem, None)
}

pub fn write_raster_with_origin(
    r: &Raster,
    stem: &Path,
    origin: Option<serde_json::Value>,
) -> Result<()> {
    // Re-validate: a Raster built through the public constructor always passes.
    let r = Raster::new(
        r.width,
        r.height,
        r.bands.clone(),
        r.data.clone(),
        r.valid.clone(),
    )?;
    let mut body = Vec::with_capacity(raster_body_len(r.width, r.height, r.n_bands()) as usize);
    for band in &r.data {
        for v in band {
            body.extend_from_slice(&v.to_le_bytes());
        }
    }
    body.extend(r.valid.iter().map(|&v| v as u8));
    write_sidecar(
        stem,
        &Sidecar {
            width: r.width,
            height: r.height,
            bands: r.bands.clone(),
            dtype: "f32".into(),
            byte_order: "little".into(),
            origin,
        },
    )?;
    let path = body_path(stem);
    fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

/// Reads a raster written by [`write_raster`]; the body length must match the sidecar exactly.
pub fn read_raster(stem: &Path) -> Result<Raster> {
    let sc = read_sidecar(stem, "f32")?;
    let n = sc.width * sc.height;
    let body = read_body(stem, raster_body_len(sc.width, sc.height, sc.bands.len()))?;
    let mut data = Vec::with_capacity(sc.bands.len());
    for b in 0..sc.bands.len() {
        let chunk = &body[b * n * 4..(b + 1) * n * 4];
        data.push(
            chunk
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        );
    }
    let mask_bytes = &body[sc.bands.len() * n * 4..];
    let mut valid = Vec::with_capacity(n);
    for &m in mask_bytes {
        match m {
            0 => valid.push(false),
            1 => valid.push(true),
            other => {
                return Err(Error::Sidecar {
                    path: body_path(stem),
                    reason: format!("mask byte {other} is neither 0 nor 1"),
                })
            }
        }
    }
    Raster::new(sc.width, sc.height, sc.bands, data, valid)
}

/// Writes a label map as `<stem>.json` + `<stem>.bin` (dtype `u8`).
pub fn write_labels(l: &LabelRaster, stem: &Path) -> Result<()> {
    write_sidecar(
        stem,
        &Sidecar {
            width: l.width,
            height: l.height,
            bands: vec!["class_id".into()],
            dtype: "u8".into(),
            byte_order: "little".into(),
            origin: None,
        },
    )?;
    let path = body_path(stem);
    fs::write(&path, &l.labels).map_err(|e| Error::io(&path, e))
}

/// Reads a label map, rejecting values that are neither legend ids nor nodata.
pub fn read_labels(stem: &Path, legend: &ClassLegend) -> Result<LabelRaster> {
    let sc = read_sidecar(stem, "u8")?;
    if sc.bands.len() != 1 {
        return Err(Error::Sidecar {
            path: sidecar_path(stem),
            reason: format!("label map must have one band, found {}", sc.bands.len()),
        });
    }
    let body = read_body(stem, (sc.width * sc.height) as u64)?;
    let l = LabelRaster::new(sc.width, sc.height, body)?;
    l.check_legend(legend)?;
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn one_pixel_body_layout() {
        let dir = tmp();
        let stem = dir.path().join("px");
        let r = Raster::single_band("b", 1, 1, vec![0.0]).unwrap();
        write_raster(&r, &stem).unwrap();
        let body = fs::read(body_path(&stem)).unwrap();
        assert_eq!(body, vec![0, 0, 0, 0, 1]);
        let sc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(sidecar_path(&stem)).unwrap()).unwrap();
        assert_eq!(sc["dtype"], "f32");
        assert_eq!(sc["byte_order"], "little");
        assert_eq!(sc["bands"][0], "b");
    }

    #[test]
    fn seven_band_round_trip_with_mask() {
        let dir = tmp();
        let stem = dir.path().join("r");
        let names: Vec<String> = (0..7).map(|i| format!("b{i}")).collect();
        let data: Vec<Vec<f32>> = (0..7)
            .map(|b| (0..6).map(|i| (b * 10 + i) as f32 * 0.5 - 3.0).collect())
            .collect();
        let mut valid = vec![true; 6];
        valid[1] = false;
        valid[4] = false;
        let r = Raster::new(3, 2, names, data, valid).unwrap();
        write_raster(&r, &stem).unwrap();
        assert_eq!(read_raster(&stem).unwrap(), r);
    }

    #[test]
    fn body_length_formula() {
        assert_eq!(raster_body_len(256, 256, 7), 256 * 256 * 7 * 4 + 256 * 256);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let dir = tmp();
        let stem = dir.path().join("t");
        let r = Raster::single_band("b", 2, 2, vec![1.0; 4]).unwrap();
        write_raster(&r, &stem).unwrap();
        let mut body = fs::read(body_path(&stem)).unwrap();
        body.pop();
        fs::write(body_path(&stem), &body).unwrap();
        assert!(matches!(read_raster(&stem), Err(Error::BodySize { .. })));
        body.extend([1, 1]);
        fs::write(body_path(&stem), &body).unwrap();
        assert!(matches!(read_raster(&stem), Err(Error::BodySize { .. })));
    }

    #[test]
    fn all_nodata_labels_body() {
        let dir = tmp();
        let stem = dir.path().join("l");
        let l = LabelRaster::filled(2, 2, NODATA).unwrap();
        write_labels(&l, &stem).unwrap();
        assert_eq!(fs::read(body_path(&stem)).unwrap(), vec![0xFF; 4]);
        assert_eq!(read_labels(&stem, &ClassLegend::default()).unwrap(), l);
    }

    #[test]
    fn mixed_labels_round_trip() {
        let dir = tmp();
        let stem = dir.path().join("l");
        let l = LabelRaster::new(3, 2, vec![0, 1, 255, 6, 3, 0]).unwrap();
        write_labels(&l, &stem).unwrap();
        assert_eq!(read_labels(&stem, &ClassLegend::default()).unwrap(), l);
    }

    #[test]
    fn illegal_class_id_on_read() {
        let dir = tmp();
        let stem = dir.path().join("l");
        let l = LabelRaster::new(2, 1, vec![0, 200]).unwrap();
        write_labels(&l, &stem).unwrap();
        let err = read_labels(&stem, &ClassLegend::default()).unwrap_err();
        assert!(err.to_string().contains("illegal class id"), "{err}");
    }

    #[test]
    fn legend_invariants() {
        let legend = ClassLegend::default();
        assert_eq!(legend.len(), 7);
        assert_eq!(legend.nodata_id(), 255);
        assert!(!legend.contains(255));
        for e in legend.entries() {
            assert_eq!(legend.name(e.class_id), Some(e.name.as_str()));
        }
        assert!(ClassLegend::new([("a", [0, 0, 0]), ("a", [1, 1, 1])]).is_err());
        assert_eq!(ClassLegend::six_class().len(), 6);
    }

    #[test]
    fn raster_rejects_bad_geometry() {
        assert!(Raster::new(2, 2, vec!["a".into()], vec![vec![0.0; 3]], vec![true; 4]).is_err());
        assert!(Raster::new(
            1,
            1,
            vec!["a".into(), "a".into()],
            vec![vec![0.0], vec![0.0]],
            vec![true]
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn raster_round_trip_is_bit_exact(
            w in 1usize..6, h in 1usize..6, nb in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = w * h;
            let data: Vec<Vec<f32>> = (0..nb)
                .map(|_| (0..n).map(|_| f32::from_bits(rng.gen())).collect())
                .collect();
            let valid: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
            let names = (0..nb).map(|i| format!("band{i}")).collect();
            let r = Raster::new(w, h, names, data, valid).unwrap();
            let dir = tmp();
            let stem = dir.path().join("p");
            write_raster(&r, &stem).unwrap();
            let back = read_raster(&stem).unwrap();
            prop_assert_eq!(back.mask(), r.mask());
            for b in 0..nb {
                let a: Vec<u32> = r.band(b).iter().map(|v| v.to_bits()).collect();
                let c: Vec<u32> = back.band(b).iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(a, c);
            }
            let size = fs::metadata(body_path(&stem)).unwrap().len();
            prop_assert_eq!(size, raster_body_len(w, h, nb));
        }

        #[test]
        fn label_round_trip(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let labels = (0..w * h)
                .map(|_| if rng.gen_bool(0.2) { NODATA } else { rng.gen_range(0..7) })
                .collect();
            let l = LabelRaster::new(w, h, labels).unwrap();
            let dir = tmp();
            let stem = dir.path().join("p");
            write_labels(&l, &stem).unwrap();
            prop_assert_eq!(read_labels(&stem, &ClassLegend::default()).unwrap(), l);
        }
    }
}
