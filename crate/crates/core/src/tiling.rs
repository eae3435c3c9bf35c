//! Sliding-window patch extraction with overlap, deterministic train/val/test
//! splitting, and center-crop stitching of per-tile predictions.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::reflect;
use crate::raster::{read_labels, read_raster, write_labels, write_raster, ClassLegend, LabelRaster, Raster, NODATA};

pub const DEFAULT_PATCH: usize = 256;

/// Patch anchors over an image, in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub patch: usize,
    pub stride: usize,
    /// Original `(width, height)`; images smaller than `patch` are reflect padded.
    pub image_dims: (usize, usize),
    /// `(row, col)` top-left corners in padded coordinates.
    pub anchors: Vec<(usize, usize)>,
}

fn axis_anchors(dim: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = dim.max(patch) - patch;
    let mut a: Vec<usize> = (0..).map(|k| k * stride).take_while(|&x| x <= last).collect();
    if a.last() != Some(&last) {
        a.push(last);
    }
    a
}

/// Enumerates anchors at multiples of `stride`, clamping a final anchor to `dim - patch`.
pub fn plan_tiles(width: usize, height: usize, patch: usize, stride: usize) -> Result<TilePlan> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image dimensions must be positive"));
    }
    if patch < 4 || !patch.is_power_of_two() {
        return Err(Error::invalid(format!("patch {patch} must be a power of two >= 4")));
    }
    if stride == 0 || stride > patch {
        return Err(Error::invalid(format!("stride {stride} must be in 1..={patch}")));
    }
    let rows = axis_anchors(height, patch, stride);
    let cols = axis_anchors(width, patch, stride);
    let anchors = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
        .collect();
    Ok(TilePlan {
        patch,
        stride,
        image_dims: (width, height),
        anchors,
    })
}

impl TilePlan {
    /// Width and height after padding small images up to `patch`.
    pub fn padded_dims(&self) -> (usize, usize) {
        (
            self.image_dims.0.max(self.patch),
            self.image_dims.1.max(self.patch),
        )
    }

    pub fn row_anchors(&self) -> Vec<usize> {
        axis_anchors(self.image_dims.1, self.patch, self.stride)
    }

    pub fn col_anchors(&self) -> Vec<usize> {
        axis_anchors(self.image_dims.0, self.patch, self.stride)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Index into `anchors` of the tile that owns each image pixel (row-major).
    pub fn ownership(&self) -> Vec<usize> {
        let rows = self.row_anchors();
        let cols = self.col_anchors();
        let row_owner = axis_owners(&rows, self.patch, self.image_dims.1);
        let col_owner = axis_owners(&cols, self.patch, self.image_dims.0);
        let mut out = Vec::with_capacity(self.image_dims.0 * self.image_dims.1);
        for &ro in &row_owner {
            for &co in &col_owner {
                out.push(ro * cols.len() + co);
            }
        }
        out
    }
}

/// Owner index for each coordinate along one axis.
///
/// Tile `k` owns from `s_k = min(a_k + patch/4, a_{k-1} + patch)` up to
/// `s_{k+1}`, with `s_0 = 0` and the last tile running to the image edge. At
/// half-patch stride this is exactly the central half window; where two
/// central windows overlap (the clamped final tile) the later tile wins.
fn axis_owners(anchors: &[usize], patch: usize, dim: usize) -> Vec<usize> {
    let starts: Vec<usize> = anchors
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            if k == 0 {
                0
            } else {
                (a + patch / 4).min(anchors[k - 1] + patch)
            }
        })
        .collect();
    let mut owner = Vec::with_capacity(dim);
    let mut k = 0;
    for x in 0..dim {
        while k + 1 < starts.len() && starts[k + 1] <= x {
            k += 1;
        }
        owner.push(k);
    }
    owner
}

/// One extracted training patch.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub anchor: (usize, usize),
    pub raster: Raster,
    pub labels: LabelRaster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Extracted tiles with optional split tags.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub tiles: Vec<Tile>,
    pub splits: Vec<Split>,
    pub seed: u64,
    /// Tiles skipped because every label was nodata.
    pub dropped: usize,
}

impl SampleSet {
    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &Tile> {
        self.tiles
            .iter()
            .zip(&self.splits)
            .filter(move |(_, &s)| s == split)
            .map(|(t, _)| t)
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let count = |s| self.splits.iter().filter(|&&x| x == s).count();
        (count(Split::Train), count(Split::Val), count(Split::Test))
    }
}

/// Copies a `patch x patch` window of the label map starting at `anchor`,
/// reflecting past the image edge.
pub fn extract_label_patch(l: &LabelRaster, patch: usize, anchor: (usize, usize)) -> LabelRaster {
    let (w, h) = l.dims();
    let mut out = Vec::with_capacity(patch * patch);
    for dr in 0..patch {
        let r = reflect((anchor.0 + dr) as isize, h);
        for dc in 0..patch {
            let c = reflect((anchor.1 + dc) as isize, w);
            out.push(l.get(r, c));
        }
    }
    LabelRaster::new(patch, patch, out).expect("patch geometry")
}

/// Copies a `patch x patch` window of every band, reflecting past the image edge.
pub fn extract_raster_patch(r: &Raster, patch: usize, anchor: (usize, usize)) -> Raster {
    let (w, h) = r.dims();
    let mut idx = Vec::with_capacity(patch * patch);
    for dr in 0..patch {
        let rr = reflect((anchor.0 + dr) as isize, h);
        for dc in 0..patch {
            let cc = reflect((anchor.1 + dc) as isize, w);
            idx.push(rr * w + cc);
        }
    }
    let data = r
        .bands()
        .iter()
        .map(|b| idx.iter().map(|&i| b[i]).collect())
        .collect();
    let valid = idx.iter().map(|&i| r.mask()[i]).collect();
    Raster::new(patch, patch, r.band_names().to_vec(), data, valid).expect("patch geometry")
}

/// Cuts every planned tile; pixels masked in the raster become nodata labels and
/// tiles whose labels are entirely nodata are dropped.
pub fn extract_tiles(r: &Raster, l: &LabelRaster, plan: &TilePlan) -> Result<SampleSet> {
    if r.dims() != l.dims() {
        return Err(Error::GeometryMismatch {
            expected: r.dims(),
            found: l.dims(),
        });
    }
    if r.dims() != plan.image_dims {
        return Err(Error::GeometryMismatch {
            expected: plan.image_dims,
            found: r.dims(),
        });
    }
    let mut tiles = Vec::with_capacity(plan.len());
    let mut dropped = 0;
    for &anchor in &plan.anchors {
        let raster = extract_raster_patch(r, plan.patch, anchor);
        let mut labels = extract_label_patch(l, plan.patch, anchor);
        for (lab, &ok) in labels.labels_mut().iter_mut().zip(raster.mask()) {
            if !ok {
                *lab = NODATA;
            }
        }
        if labels.labels().iter().all(|&v| v == NODATA) {
            dropped += 1;
            continue;
        }
        tiles.push(Tile {
            anchor,
            raster,
            labels,
        });
    }
    Ok(SampleSet {
        splits: vec![Split::Train; tiles.len()],
        tiles,
        seed: 0,
        dropped,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Split sizes for `n` items under 60/20/20 with largest-remainder rounding
/// (remainder ties go to the earlier split).
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let shares = [6usize, 2, 2];
    let mut sizes: Vec<usize> = shares.iter().map(|s| n * s / 10).collect();
    let rem: Vec<usize> = shares.iter().map(|s| n * s % 10).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| rem[b].cmp(&rem[a]).then(a.cmp(&b)));
    let missing = n - sizes.iter().sum::<usize>();
    for &i in order.iter().take(missing) {
        sizes[i] += 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Orders tiles by a seeded hash of their anchor and tags the first 60% train,
/// the next 20% val and the rest test.
pub fn split_samples(mut s: SampleSet, seed: u64) -> Result<SampleSet> {
    let n = s.tiles.len();
    if n < 5 {
        return Err(Error::invalid(format!("need at least 5 tiles to split, have {n}")));
    }
    let key = |a: (usize, usize)| {
        splitmix64(seed ^ splitmix64(((a.0 as u64) << 32) ^ a.1 as u64))
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (key(s.tiles[i].anchor), s.tiles[i].anchor));
    let (train, val, _) = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < train {
            Split::Train
        } else if rank < train + val {
            Split::Val
        } else {
            Split::Test
        };
    }
    s.splits = splits;
    s.seed = seed;
    Ok(s)
}

pub const TILE_INDEX: &str = "tiles.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileEntry {
    pub anchor: (usize, usize),
    pub split: Split,
    /// File stem of the tile raster; the labels use the same stem plus `_labels`.
    pub stem: String,
}

/// `tiles.json`: the plan and one entry per written tile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileIndex {
    pub plan: TilePlan,
    pub seed: u64,
    pub dropped: usize,
    pub tiles: Vec<TileEntry>,
}

/// Writes every tile of `set` and a `tiles.json` index into `dir`.
pub fn write_sample_set(set: &SampleSet, plan: &TilePlan, dir: &Path) -> Result<TileIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tiles = Vec::with_capacity(set.tiles.len());
    for (i, (t, &split)) in set.tiles.iter().zip(&set.splits).enumerate() {
        let stem = format!("tile_{i:05}");
        write_raster(&t.raster, &dir.join(&stem))?;
        write_labels(&t.labels, &dir.join(format!("{stem}_labels")))?;
        tiles.push(TileEntry {
            anchor: t.anchor,
            split,
            stem,
        });
    }
    let index = TileIndex {
        plan: plan.clone(),
        seed: set.seed,
        dropped: set.dropped,
        tiles,
    };
    let path = dir.join(TILE_INDEX);
    std::fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

pub fn read_sample_set(dir: &Path, legend: &ClassLegend) -> Result<(SampleSet, TilePlan)> {
    let path = dir.join(TILE_INDEX);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: TileIndex = serde_json::from_str(&text)?;
    let mut tiles = Vec::with_capacity(index.tiles.len());
    for e in &index.tiles {
        let raster = read_raster(&dir.join(&e.stem))?;
        let labels = read_labels(&dir.join(format!("{}_labels", e.stem)), legend)?;
        if raster.dims() != (index.plan.patch, index.plan.patch) || labels.dims() != raster.dims() {
            return Err(Error::shape(format!("tile {} does not match patch {}", e.stem, index.plan.patch)));
        }
        tiles.push(Tile {
            anchor: e.anchor,
            raster,
            labels,
        });
    }
    let set = SampleSet {
        tiles,
        splits: index.tiles.iter().map(|e| e.split).collect(),
        seed: index.seed,
        dropped: index.dropped,
    };
    Ok((set, index.plan))
}

/// Per-class probabilities predicted for one tile, laid out `[class][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbPatch {
    pub anchor: (usize, usize),
    pub patch: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl ProbPatch {
    #[inline]
    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probs[(class * self.patch + row) * self.patch + col]
    }
}

/// Per-pixel class distribution over a whole image, laid out `[class][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub width: usize,
    pub height: usize,
    pub classes: usize,
    pub probs: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, classes: usize, probs: Vec<f64>) -> Result<Self> {
        if classes == 0 || probs.len() != width * height * classes {
            return Err(Error::shape(format!(
                "{} probabilities for {width}x{height} pixels and {classes} classes",
                probs.len()
            )));
        }
        Ok(ProbMap {
            width,
            height,
            classes,
            probs,
        })
    }

    #[inline]
    pub fn get(&self, class: usize, row: usize, col: usize) -> f64 {
        self.probs[(class * self.height + row) * self.width + col]
    }

    /// Distribution at pixel `i` (row-major index).
    pub fn pixel(&self, i: usize) -> Vec<f64> {
        let n = self.width * self.height;
        (0..self.classes).map(|c| self.probs[c * n + i]).collect()
    }

    pub fn argmax(&self) -> LabelRaster {
        let n = self.width * self.height;
        let labels = (0..n)
            .map(|i| argmax_lowest((0..self.classes).map(|c| self.probs[c * n + i])) as u8)
            .collect();
        LabelRaster::new(self.width, self.height, labels).expect("label geometry is consistent")
    }

    /// One f32 band `p<c>` per class, for writing to disk.
    pub fn to_raster(&self) -> Raster {
        let n = self.width * self.height;
        let bands = (0..self.classes)
            .map(|c| self.probs[c * n..(c + 1) * n].iter().map(|&v| v as f32).collect())
            .collect();
        Raster::new(
            self.width,
            self.height,
            (0..self.classes).map(|c| format!("p{c}")).collect(),
            bands,
            vec![true; n],
        )
        .expect("probability raster geometry is consistent")
    }

    pub fn from_raster(r: &Raster) -> Result<Self> {
        let (w, h) = r.dims();
        let probs = r.bands().iter().flat_map(|b| b.iter().map(|&v| v as f64)).collect();
        ProbMap::new(w, h, r.n_bands(), probs)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_lowest<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v: Option<T> = None;
    for (i, v) in values.into_iter().enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

/// Stitches tile predictions so that each pixel takes the distribution of the
/// single tile that owns it (see [`TilePlan::ownership`]).
pub fn stitch_center(predictions: &[ProbPatch], plan: &TilePlan) -> Result<(LabelRaster, ProbMap)> {
    let first = predictions
        .first()
        .ok_or_else(|| Error::invalid("no predictions to stitch"))?;
    let k = first.classes;
    let mut by_anchor: HashMap<(usize, usize), &ProbPatch> = HashMap::new();
    for p in predictions {
        if p.patch != plan.patch || p.classes != k || p.probs.len() != k * p.patch * p.patch {
            return Err(Error::shape(format!(
                "prediction at {:?} has patch {} and {} classes, plan expects patch {} and {k}",
                p.anchor, p.patch, p.classes, plan.patch
            )));
        }
        by_anchor.insert(p.anchor, p);
    }
    let tiles: Vec<&ProbPatch> = plan
        .anchors
        .iter()
        .map(|a| {
            by_anchor
                .get(a)
                .copied()
                .ok_or_else(|| Error::invalid(format!("missing prediction for anchor {a:?}")))
        })
        .collect::<Result<_>>()?;

    let (w, h) = plan.image_dims;
    let owner = plan.ownership();
    let mut labels = vec![0u8; w * h];
    let n = w * h;
    let mut probs = vec![0f64; n * k];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let t = tiles[owner[i]];
            let (tr, tc) = (r - t.anchor.0, c - t.anchor.1);
            labels[i] = argmax_lowest((0..k).map(|cl| t.get(cl, tr, tc))) as u8;
            for cl in 0..k {
                probs[cl * n + i] = t.get(cl, tr, tc);
            }
        }
    }
    Ok((LabelRaster::new(w, h, labels)?, ProbMap::new(w, h, k, probs)?))
}
