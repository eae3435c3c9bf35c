//! Deterministic synthetic scenes: terrain-stratified land cover with
//! overlapping vegetation spectra.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{apply_cloud_mask, slope_from_dem, CloudMask, SPECTRAL_BANDS, STACK_BANDS};
use crate::raster::{write_labels, write_raster, ClassLegend, LabelRaster, Raster};

pub const MIN_SCENE_DIM: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProfile {
    pub name: String,
    /// Blue, green, red, red edge, near infrared.
    pub spectral_mean: [f64; 5],
    /// Preferred elevation band in meters, `low < high`.
    pub elevation: (f64, f64),
    /// Preferred slope in degrees.
    pub slope_preference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Seed of the spectral noise; defaults to one derived from `seed`.
    pub noise_seed: Option<u64>,
    pub classes: Vec<ClassProfile>,
    /// Standard deviation of the per-band spectral noise.
    pub spectral_noise: f64,
    /// Correlation of the noise between bands.
    pub band_correlation: f64,
    /// Elevation range of the terrain in meters.
    pub relief: f64,
    /// Midpoint displacement amplitude decay per level, in (0, 1].
    pub roughness: f64,
    pub cell_size: f64,
    /// Granularity of the label noise field in pixels.
    pub smoothness: usize,
    /// Amplitude of the smoothed label noise relative to one elevation band.
    pub label_noise: f64,
    pub slope_weight: f64,
    pub cloud_fraction: f64,
}

fn profile(name: &str, mean: [f64; 5], low: f64, high: f64, slope: f64) -> ClassProfile {
    ClassProfile {
        name: name.to_string(),
        spectral_mean: mean,
        elevation: (low, high),
        slope_preference: slope,
    }
}

/// Six classes with tree cover highest, then shrubland, grassland, cropland,
/// artificial surface and water.
pub fn default_classes() -> Vec<ClassProfile> {
    vec![
        profile("Tree cover", [40.0, 60.0, 45.0, 110.0, 160.0], 1000.0, 1200.0, 25.0),
        profile("Shrubland", [45.0, 65.0, 50.0, 106.0, 152.0], 800.0, 1000.0, 20.0),
        profile("Grassland", [50.0, 70.0, 55.0, 104.0, 146.0], 600.0, 800.0, 12.0),
        profile("Cropland", [54.0, 74.0, 60.0, 100.0, 140.0], 400.0, 600.0, 5.0),
        profile("Artificial surface", [100.0, 105.0, 110.0, 115.0, 120.0], 200.0, 400.0, 3.0),
        profile("Water body", [60.0, 55.0, 40.0, 30.0, 20.0], 0.0, 200.0, 0.0),
    ]
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 512,
            height: 512,
            seed: 0,
            noise_seed: None,
            classes: default_classes(),
            spectral_noise: 12.0,
            band_correlation: 0.5,
            relief: 1200.0,
            roughness: 0.55,
            cell_size: 5.0,
            smoothness: 16,
            label_noise: 0.6,
            slope_weight: 0.3,
            cloud_fraction: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width < MIN_SCENE_DIM || self.height < MIN_SCENE_DIM {
            return Err(Error::invalid(format!(
                "scenes must be at least {MIN_SCENE_DIM}x{MIN_SCENE_DIM}, got {}x{}",
                self.width, self.height
            )));
        }
        if self.classes.is_empty() || self.classes.len() > 254 {
            return Err(Error::invalid("scene needs between 1 and 254 classes"));
        }
        for c in &self.classes {
            if !(c.elevation.0 < c.elevation.1) {
                return Err(Error::invalid(format!(
                    "class {:?} has an empty elevation band {:?}",
                    c.name, c.elevation
                )));
            }
        }
        let checks = [
            (self.spectral_noise >= 0.0, "spectral noise must be non-negative"),
            ((0.0..=1.0).contains(&self.band_correlation), "band correlation must lie in [0, 1]"),
            (self.relief > 0.0, "relief must be positive"),
            (self.roughness > 0.0 && self.roughness <= 1.0, "roughness must lie in (0, 1]"),
            (self.cell_size > 0.0, "cell size must be positive"),
            (self.smoothness > 0, "smoothness must be positive"),
            (self.label_noise >= 0.0 && self.slope_weight >= 0.0, "noise weights must be non-negative"),
            ((0.0..=1.0).contains(&self.cloud_fraction), "cloud fraction must lie in [0, 1]"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::invalid(msg));
            }
        }
        Ok(())
    }

    pub fn legend(&self) -> ClassLegend {
        let defaults = ClassLegend::seven_class();
        ClassLegend::new(self.classes.iter().enumerate().map(|(i, c)| {
            let color = defaults.entries().get(i).map_or([128, 128, 128], |e| e.color);
            (c.name.clone(), color)
        }))
        .expect("validated class list")
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    /// Blue, green, red, red edge, near infrared, dem, slope; all pixels valid.
    pub stack: Raster,
    pub labels: LabelRaster,
    pub cloud: CloudMask,
}

impl Scene {
    pub fn spectral(&self) -> Raster {
        self.stack.select_bands(&[0, 1, 2, 3, 4]).expect("stack has seven bands")
    }

    pub fn dem(&self) -> Raster {
        self.stack.select_bands(&[5]).expect("stack has seven bands")
    }

    /// The stack with clouded pixels invalid.
    pub fn masked_stack(&self) -> Raster {
        apply_cloud_mask(&self.stack, &self.cloud).expect("cloud grid matches the scene")
    }

    /// Writes `<name>_stack`, `_spectral`, `_dem`, `_labels`, `_cloud` and a
    /// `<name>_spec.json` echo of the spec into `dir`.
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_raster(&self.masked_stack(), &dir.join(format!("{name}_stack")))?;
        write_raster(&apply_cloud_mask(&self.spectral(), &self.cloud)?, &dir.join(format!("{name}_spectral")))?;
        write_raster(&self.dem(), &dir.join(format!("{name}_dem")))?;
        write_labels(&self.labels, &dir.join(format!("{name}_labels")))?;
        write_labels(&self.cloud.to_labels(), &dir.join(format!("{name}_cloud")))?;
        let spec = dir.join(format!("{name}_spec.json"));
        std::fs::write(&spec, serde_json::to_string_pretty(&self.spec)?).map_err(|e| Error::io(&spec, e))
    }
}

const LABEL_STREAM: u64 = 0x1AB3_1000;
const SPECTRAL_STREAM: u64 = 0x5BEC_7000;
const CLOUD_STREAM: u64 = 0xC10D_0000;

/// Diamond-square midpoint displacement on a `2^k + 1` grid covering
/// `w x h`, cropped.
fn midpoint_displacement(w: usize, h: usize, roughness: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut n = 1;
    while n + 1 < w.max(h) {
        n *= 2;
    }
    let size = n + 1;
    let mut z = vec![0.0; size * size];
    for &(r, c) in &[(0, 0), (0, n), (n, 0), (n, n)] {
        z[r * size + c] = rng.gen_range(-1.0..1.0);
    }
    let mut step = n;
    let mut amp = 1.0;
    while step > 1 {
        let half = step / 2;
        for r in (half..n).step_by(step) {
            for c in (half..n).step_by(step) {
                let avg = (z[(r - half) * size + c - half]
                    + z[(r - half) * size + c + half]
                    + z[(r + half) * size + c - half]
                    + z[(r + half) * size + c + half])
                    / 4.0;
                z[r * size + c] = avg + amp * rng.gen_range(-1.0..1.0);
            }
        }
        for r in (0..=n).step_by(half) {
            let start = if (r / half) % 2 == 0 { half } else { 0 };
            for c in (start..=n).step_by(step) {
                let mut sum = 0.0;
                let mut k = 0.0;
                if r >= half {
                    sum += z[(r - half) * size + c];
                    k += 1.0;
                }
                if r + half <= n {
                    sum += z[(r + half) * size + c];
                    k += 1.0;
                }
                if c >= half {
                    sum += z[r * size + c - half];
                    k += 1.0;
                }
                if c + half <= n {
                    sum += z[r * size + c + half];
                    k += 1.0;
                }
                z[r * size + c] = sum / k + amp * rng.gen_range(-1.0..1.0);
            }
        }
        amp *= roughness;
        step = half;
    }
    (0..h).flat_map(|r| z[r * size..r * size + w].to_vec()).collect()
}

/// Replaces values by their rank, spread evenly over `[0, range]`; the
/// transform is monotone so the terrain keeps its shape.
fn rank_transform(v: &[f64], range: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let n = v.len() as f64;
    let mut out = vec![0.0; v.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = range * (rank as f64 + 0.5) / n;
    }
    out
}

/// Standard normal values on a coarse lattice with spacing `cell`,
/// bilinearly interpolated to `w x h`.
fn smooth_noise(w: usize, h: usize, cell: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = w / cell + 2;
    let gh = h / cell + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.sample(StandardNormal)).collect();
    let mut out = Vec::with_capacity(w * h);
    for r in 0..h {
        let fy = r as f64 / cell as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for c in 0..w {
            let fx = c as f64 / cell as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let g = |y: usize, x: usize| grid[y * gw + x];
            let top = g(y0, x0) * (1.0 - tx) + g(y0, x0 + 1) * tx;
            let bottom = g(y0 + 1, x0) * (1.0 - tx) + g(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
    rng.gen()
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let n = w * h;
    let k = spec.classes.len();

    let mut terrain_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let raw = midpoint_displacement(w, h, spec.roughness, &mut terrain_rng);
    let elevation = rank_transform(&raw, spec.relief);
    let dem = Raster::single_band("dem", w, h, elevation.iter().map(|&v| v as f32).collect())?;
    let slope_r = slope_from_dem(&dem, spec.cell_size)?;
    let slope = slope_r.band(0);

    let band_scale = spec.relief / k as f64;
    let noise: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, LABEL_STREAM + c as u64));
            smooth_noise(w, h, spec.smoothness, &mut rng)
        })
        .collect();
    let labels: Vec<u8> = (0..n)
        .into_par_iter()
        .map(|i| {
            let e = elevation[i];
            let s = slope[i] as f64;
            let scores = spec.classes.iter().enumerate().map(|(c, p)| {
                let dist = (p.elevation.0 - e).max(e - p.elevation.1).max(0.0) / band_scale;
                -dist - spec.slope_weight * (s - p.slope_preference).abs() / 45.0 + spec.label_noise * noise[c][i]
            });
            crate::tiling::argmax_lowest(scores) as u8
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(
        spec.noise_seed
            .unwrap_or_else(|| derive_seed(spec.seed, SPECTRAL_STREAM)),
    );
    let shared = spec.band_correlation.sqrt();
    let own = (1.0 - spec.band_correlation).sqrt();
    let mut bands = vec![Vec::with_capacity(n); SPECTRAL_BANDS.len()];
    for &l in &labels {
        let z0: f64 = rng.sample(StandardNormal);
        let mean = &spec.classes[l as usize].spectral_mean;
        for (b, band) in bands.iter_mut().enumerate() {
            let zb: f64 = rng.sample(StandardNormal);
            band.push((mean[b] + spec.spectral_noise * (shared * z0 + own * zb)) as f32);
        }
    }
    bands.push(dem.band(0).to_vec());
    bands.push(slope.to_vec());
    let stack = Raster::new(
        w,
        h,
        STACK_BANDS.iter().map(|s| s.to_string()).collect(),
        bands,
        vec![true; n],
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, CLOUD_STREAM));
    let field = smooth_noise(w, h, spec.smoothness * 2, &mut rng);
    let n_cloud = (spec.cloud_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut cloud = vec![false; n];
    for &i in &order[..n_cloud] {
        cloud[i] = true;
    }

    Ok(Scene {
        spec: spec.clone(),
        stack,
        labels: LabelRaster::new(w, h, labels)?,
        cloud: CloudMask::new(w, h, cloud)?,
    })
}

/// A training scene and a drifted scene over the same terrain.
#[derive(Debug, Clone)]
pub struct ScenePair {
    pub train: Scene,
    pub test: Scene,
}

/// Spec of the drifted scene: every class mean moves by `delta` in every
/// band and the spectral noise is redrawn.
pub fn shifted_spec(spec: &SceneSpec, delta: f64) -> SceneSpec {
    let mut s = spec.clone();
    for c in &mut s.classes {
        for m in &mut c.spectral_mean {
            *m += delta;
        }
    }
    s.noise_seed = Some(derive_seed(spec.noise_seed.unwrap_or(spec.seed), SPECTRAL_STREAM ^ 0xD41F7));
    s
}

/// `n` pairs; pair `i` uses its own terrain seed derived from `base.seed`.
pub fn scene_battery(base: &SceneSpec, n: usize, delta: f64) -> Result<Vec<ScenePair>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let spec = SceneSpec {
                seed: derive_seed(base.seed, i as u64),
                noise_seed: None,
                ..base.clone()
            };
            Ok(ScenePair {
                train: generate_scene(&spec)?,
                test: generate_scene(&shifted_spec(&spec, delta))?,
            })
        })
        .collect()
}

/// Histogram estimate of the mutual information (nats) between class labels
/// and a continuous band split into `bins` equal-width bins.
pub fn mutual_information(labels: &[u8], values: &[f32], bins: usize) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = (hi - lo).max(f32::EPSILON) as f64;
    let k = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    let mut joint = vec![0usize; k * bins];
    for (&l, &v) in labels.iter().zip(values) {
        let b = (((v - lo) as f64 / span) * bins as f64).min(bins as f64 - 1.0) as usize;
        joint[l as usize * bins + b] += 1;
    }
    let n = labels.len() as f64;
    let pl: Vec<f64> = (0..k).map(|l| joint[l * bins..(l + 1) * bins].iter().sum::<usize>() as f64 / n).collect();
    let pb: Vec<f64> = (0..bins).map(|b| (0..k).map(|l| joint[l * bins + b]).sum::<usize>() as f64 / n).collect();
    let mut mi = 0.0;
    for l in 0..k {
        for b in 0..bins {
            let p = joint[l * bins + b] as f64 / n;
            if p > 0.0 {
                mi += p * (p / (pl[l] * pb[b])).ln();
            }
        }
    }
    mi
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classical::{cart_train, TreeParams};
    use crate::sampling::FeatureTable;

    fn small(seed: u64) -> SceneSpec {
        SceneSpec {
            width: 128,
            height: 128,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic_and_cloud_free_by_default() {
        let a = generate_scene(&small(3)).unwrap();
        let b = generate_scene(&small(3)).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.cloud.cloud_fraction(), 0.0);
        assert_eq!(a.masked_stack().valid_count(), 128 * 128);
        let c = generate_scene(&small(4)).unwrap();
        assert_ne!(a.labels, c.labels);
    }

    #[test]
    fn cloud_fraction_is_met() {
        let s = generate_scene(&SceneSpec { cloud_fraction: 0.2, ..small(1) }).unwrap();
        assert!((s.cloud.cloud_fraction() - 0.2).abs() < 1e-4);
    }

    #[test]
    fn infeasible_specs() {
        let mut s = small(0);
        s.classes[2].elevation = (700.0, 700.0);
        assert!(generate_scene(&s).is_err());
        assert!(generate_scene(&SceneSpec { width: 64, ..small(0) }).is_err());
        assert!(generate_scene(&SceneSpec { cloud_fraction: 1.5, ..small(0) }).is_err());
    }

    #[test]
    fn class_elevations_are_ordered() {
        for seed in 0..4 {
            let s = generate_scene(&small(seed)).unwrap();
            let dem = s.stack.band(5);
            let medians: Vec<f32> = (0..6u8)
                .map(|c| {
                    let mut v: Vec<f32> = (0..dem.len()).filter(|&i| s.labels.labels()[i] == c).map(|i| dem[i]).collect();
                    assert!(!v.is_empty(), "class {c} missing for seed {seed}");
                    v.sort_by(f32::total_cmp);
                    v[v.len() / 2]
                })
                .collect();
            assert!(medians.windows(2).all(|p| p[0] > p[1]), "{medians:?}");
        }
    }

    #[test]
    fn dem_carries_more_information_than_any_spectral_band() {
        let s = generate_scene(&SceneSpec { spectral_noise: 30.0, ..small(2) }).unwrap();
        let l = s.labels.labels();
        let dem = mutual_information(l, s.stack.band(5), 32);
        for b in 0..5 {
            assert!(dem > mutual_information(l, s.stack.band(b), 32), "band {b}");
        }
    }

    #[test]
    fn noiseless_spectra_are_separable() {
        let s = generate_scene(&SceneSpec { spectral_noise: 0.0, ..small(5) }).unwrap();
        let rows: Vec<Vec<f64>> = (0..128 * 128).step_by(7).map(|i| s.stack.pixel(i / 128, i % 128).iter().map(|&v| v as f64).collect()).collect();
        let labels: Vec<u8> = (0..128 * 128).step_by(7).map(|i| s.labels.labels()[i]).collect();
        let t = FeatureTable::from_rows(STACK_BANDS.iter().map(|s| s.to_string()).collect(), &rows, labels).unwrap();
        let tree = cart_train(&t, TreeParams { min_leaf: 1, max_depth: None }).unwrap();
        assert!((0..t.n_rows()).all(|i| tree.predict(t.row(i)) == t.labels[i]));
    }

    #[test]
    fn battery_pairs() {
        let base = small(9);
        let pairs = scene_battery(&base, 2, 6.0).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_ne!(pairs[0].train.spec.seed, pairs[1].train.spec.seed);
        for p in &pairs {
            assert_eq!(p.train.labels, p.test.labels);
            assert_eq!(p.train.stack.band(5), p.test.stack.band(5));
            assert_ne!(p.train.stack.band(0), p.test.stack.band(0));
            for (a, b) in p.train.spec.classes.iter().zip(&p.test.spec.classes) {
                for band in 0..5 {
                    assert!((b.spectral_mean[band] - a.spectral_mean[band] - 6.0).abs() < 1e-12);
                }
            }
        }
        assert_eq!(scene_battery(&base, 1, 6.0).unwrap().len(), 1);
    }

    #[test]
    fn writes_scene_files() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&small(1)).unwrap();
        s.write(dir.path(), "a").unwrap();
        let back = crate::raster::read_raster(&dir.path().join("a_stack")).unwrap();
        assert_eq!(back.n_bands(), 7);
        assert!(dir.path().join("a_spec.json").exists());
    }
}
