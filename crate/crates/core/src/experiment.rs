//! End-to-end experiment protocols on synthetic scenes: the 5-band versus
//! 7-band pixel classifier grid, and the deep ensemble robustness comparison.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classical::{cart_train, rf_importance, rf_train, svm_train, ForestParams, PixelModel, SvmParams, TreeParams};
use crate::error::{Error, Result};
use crate::eval::{ensemble_average, ConfusionMatrix};
use crate::neural::{build_network, predict_tiles, train, Arch, NetworkParams, TrainConfig, DEFAULT_PATCH, DEFAULT_WIDTH};
use crate::raster::{LabelRaster, Raster, NODATA};
use crate::sampling::{stratified_sample, FeatureTable};
use crate::synth::{generate_scene, shifted_spec, Scene, ScenePair, SceneSpec};
use crate::tiling::{extract_tiles, plan_tiles, split_samples, stitch_center, ProbMap};

pub const FIVE_BANDS: [usize; 5] = [0, 1, 2, 3, 4];
pub const SEVEN_BANDS: [usize; 7] = [0, 1, 2, 3, 4, 5, 6];
pub const PIXEL_ALGOS: [&str; 3] = ["cart", "rf", "svm"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Table2Config {
    pub scenes: usize,
    pub scene: SceneSpec,
    pub samples_per_class: usize,
    pub svm_samples_per_class: usize,
    /// Evaluation uses every `eval_stride`-th row and column.
    pub eval_stride: usize,
    pub forest: ForestParams,
    pub tree: TreeParams,
    pub svm: SvmParams,
}

impl Default for Table2Config {
    fn default() -> Self {
        Table2Config {
            scenes: 5,
            scene: SceneSpec::default(),
            samples_per_class: 200,
            svm_samples_per_class: 60,
            eval_stride: 4,
            forest: ForestParams::default(),
            tree: TreeParams::default(),
            svm: SvmParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub scene_seed: u64,
    pub bands: usize,
    pub algo: String,
    pub overall_accuracy: f64,
    pub overall_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Summary {
    pub algo: String,
    pub bands: usize,
    pub mean_overall_accuracy: f64,
    pub mean_overall_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table2Report {
    pub seed: u64,
    pub config: Table2Config,
    pub rows: Vec<Table2Row>,
    pub summary: Vec<Table2Summary>,
    /// Mean 7-band minus 5-band overall F1 per algorithm.
    pub f1_gain: Vec<(String, f64)>,
    /// Band names of each scene's 7-band forest, most important first.
    pub importance_ranking: Vec<Vec<String>>,
}

impl Table2Report {
    pub fn gain(&self, algo: &str) -> Option<f64> {
        self.f1_gain.iter().find(|(a, _)| a == algo).map(|(_, g)| *g)
    }

    pub fn dem_ranked_first(&self) -> bool {
        self.importance_ranking.iter().all(|r| r.first().map(String::as_str) == Some("dem"))
    }

    pub fn render_table(&self) -> String {
        let mut out = format!("{:<6} {:>5} {:>8} {:>8}\n", "algo", "bands", "OA", "F1");
        for s in &self.summary {
            out.push_str(&format!(
                "{:<6} {:>5} {:>8.4} {:>8.4}\n",
                s.algo, s.bands, s.mean_overall_accuracy, s.mean_overall_f1
            ));
        }
        for (algo, g) in &self.f1_gain {
            out.push_str(&format!("{algo} F1 gain from dem and slope: {g:+.4}\n"));
        }
        out
    }
}

/// Scene seeds of an experiment, drawn from the master seed.
pub fn scene_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Grid pixels used for evaluation, skipping the training positions.
fn eval_positions(w: usize, h: usize, stride: usize, exclude: &[usize]) -> Vec<usize> {
    let mut skip = vec![false; w * h];
    for &i in exclude {
        skip[i] = true;
    }
    (0..h)
        .step_by(stride)
        .flat_map(|r| (0..w).step_by(stride).map(move |c| r * w + c))
        .filter(|&i| !skip[i])
        .collect()
}

fn evaluate_positions(model: &PixelModel, r: &Raster, labels: &LabelRaster, positions: &[usize], k: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(k);
    for &i in positions {
        let row: Vec<f64> = r.bands().iter().map(|b| b[i] as f64).collect();
        let truth = labels.labels()[i];
        if truth != NODATA && r.mask()[i] {
            cm.add(truth, model.predict(&row))?;
        }
    }
    Ok(cm)
}

/// The first `per_class` rows of each class.
fn subsample(table: &FeatureTable, per_class: usize) -> FeatureTable {
    let mut taken = vec![0usize; table.n_classes()];
    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&i| {
            let c = table.labels[i] as usize;
            taken[c] += 1;
            taken[c] <= per_class
        })
        .collect();
    table.select_rows(&rows)
}

fn train_algo(algo: &str, table: &FeatureTable, cfg: &Table2Config, seed: u64) -> Result<PixelModel> {
    Ok(match algo {
        "cart" => PixelModel::Cart(cart_train(table, cfg.tree)?),
        "rf" => PixelModel::Rf(rf_train(table, cfg.forest, seed)?),
        "svm" => PixelModel::Svm(svm_train(table, cfg.svm)?),
        other => return Err(Error::invalid(format!("unknown pixel algorithm {other:?}"))),
    })
}

/// Runs the band-combination grid on `cfg.scenes` synthetic scenes. The
/// report depends only on `seed` and `cfg`.
pub fn table2(seed: u64, cfg: &Table2Config) -> Result<Table2Report> {
    if cfg.scenes == 0 || cfg.eval_stride == 0 || cfg.samples_per_class == 0 || cfg.svm_samples_per_class == 0 {
        return Err(Error::invalid("scenes, eval stride and sample sizes must be positive"));
    }
    let k = cfg.scene.classes.len();
    let mut rows = Vec::new();
    let mut ranking = Vec::new();
    for scene_seed in scene_seeds(seed, cfg.scenes) {
        let scene = generate_scene(&SceneSpec {
            seed: scene_seed,
            noise_seed: None,
            ..cfg.scene.clone()
        })?;
        let stack = scene.masked_stack();
        let (w, h) = stack.dims();
        let sample = stratified_sample(&stack, &scene.labels, k, cfg.samples_per_class, scene_seed)?;
        let eval = eval_positions(w, h, cfg.eval_stride, &sample.positions);
        for (bands, cols) in [(5, &FIVE_BANDS[..]), (7, &SEVEN_BANDS[..])] {
            let raster = stack.select_bands(cols)?;
            let table = sample.table.select_features(cols)?;
            for algo in PIXEL_ALGOS {
                let table = if algo == "svm" {
                    subsample(&table, cfg.svm_samples_per_class)
                } else {
                    table.clone()
                };
                let model = train_algo(algo, &table, cfg, scene_seed)?;
                if let (PixelModel::Rf(forest), 7) = (&model, bands) {
                    let imp = rf_importance(forest, &table)?;
                    let mut order: Vec<usize> = (0..imp.len()).collect();
                    order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
                    ranking.push(order.iter().map(|&f| table.feature_names[f].clone()).collect());
                }
                let cm = evaluate_positions(&model, &raster, &scene.labels, &eval, k)?;
                rows.push(Table2Row {
                    scene_seed,
                    bands,
                    algo: algo.to_string(),
                    overall_accuracy: cm.overall_accuracy()?,
                    overall_f1: cm.macro_f1()?,
                });
            }
        }
    }
    let mean = |algo: &str, bands: usize, f: fn(&Table2Row) -> f64| {
        let v: Vec<f64> = rows.iter().filter(|r| r.algo == algo && r.bands == bands).map(f).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let mut summary = Vec::new();
    let mut f1_gain = Vec::new();
    for algo in PIXEL_ALGOS {
        for bands in [5, 7] {
            summary.push(Table2Summary {
                algo: algo.to_string(),
                bands,
                mean_overall_accuracy: mean(algo, bands, |r| r.overall_accuracy),
                mean_overall_f1: mean(algo, bands, |r| r.overall_f1),
            });
        }
        f1_gain.push((algo.to_string(), mean(algo, 7, |r| r.overall_f1) - mean(algo, 5, |r| r.overall_f1)));
    }
    Ok(Table2Report {
        seed,
        config: cfg.clone(),
        rows,
        summary,
        f1_gain,
        importance_ranking: ranking,
    })
}

/// Settings of the deep-model protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeepConfig {
    pub width: usize,
    pub patch: usize,
    pub train_stride: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Replaces each architecture's configured learning rate when set.
    pub learning_rate: Option<f64>,
    pub augment: bool,
}

impl Default for DeepConfig {
    fn default() -> Self {
        DeepConfig {
            width: DEFAULT_WIDTH,
            patch: DEFAULT_PATCH,
            train_stride: DEFAULT_PATCH / 2,
            epochs: 10,
            batch_size: 8,
            learning_rate: None,
            augment: true,
        }
    }
}

impl DeepConfig {
    pub fn train_config(&self, arch: Arch, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::for_arch(arch);
        if let Some(lr) = self.learning_rate {
            cfg.optimizer = cfg.optimizer.with_lr(lr);
        }
        cfg.epochs = self.epochs;
        cfg.batch_size = self.batch_size;
        cfg.augment = self.augment;
        cfg.seed = seed;
        cfg
    }
}

/// Trains one architecture on the 7-band stack of `scene`.
pub fn train_on_scene(scene: &Scene, arch: Arch, cfg: &DeepConfig, seed: u64) -> Result<NetworkParams<f32>> {
    let stack = scene.masked_stack();
    let (w, h) = stack.dims();
    let plan = plan_tiles(w, h, cfg.patch, cfg.train_stride)?;
    let set = split_samples(extract_tiles(&stack, &scene.labels, &plan)?, seed)?;
    let net = build_network::<f32>(arch, stack.n_bands(), scene.spec.classes.len(), cfg.width, cfg.patch, seed)?;
    Ok(train(net, &set, &cfg.train_config(arch, seed))?.net)
}

/// Center-crop stitched class probabilities over a whole raster.
pub fn predict_scene(net: &NetworkParams<f32>, r: &Raster) -> Result<ProbMap> {
    let (w, h) = r.dims();
    let plan = plan_tiles(w, h, net.patch, net.patch / 2)?;
    Ok(stitch_center(&predict_tiles(net, r, &plan)?, &plan)?.1)
}

pub fn overall_accuracy(truth: &LabelRaster, pred: &LabelRaster, k: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(k);
    cm.accumulate_raster(truth, pred)?;
    cm.overall_accuracy()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub in_distribution: f64,
    pub shifted: f64,
}

impl ModelScore {
    pub fn degradation(&self) -> f64 {
        self.in_distribution - self.shifted
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub scene_seed: u64,
    pub delta: f64,
    /// Each architecture, then `merged`, then `rf`.
    pub scores: Vec<ModelScore>,
}

impl RobustnessReport {
    pub fn score(&self, model: &str) -> Option<&ModelScore> {
        self.scores.iter().find(|s| s.model == model)
    }
}

/// Member and merged probability maps of the deep ensemble on one raster.
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub members: Vec<ProbMap>,
    pub merged: ProbMap,
}

pub fn predict_ensemble(nets: &[NetworkParams<f32>], r: &Raster) -> Result<EnsemblePrediction> {
    let members = nets.iter().map(|n| predict_scene(n, r)).collect::<Result<Vec<_>>>()?;
    let merged = ensemble_average(&members.iter().collect::<Vec<_>>())?;
    Ok(EnsemblePrediction { members, merged })
}

/// One network per architecture, trained on the 7-band stack of `scene`.
pub fn train_ensemble(scene: &Scene, cfg: &DeepConfig, seed: u64) -> Result<Vec<NetworkParams<f32>>> {
    Arch::ALL.iter().map(|&arch| train_on_scene(scene, arch, cfg, seed)).collect()
}

#[derive(Debug, Clone)]
pub struct RobustnessRun {
    pub report: RobustnessReport,
    /// Ensemble output on the unshifted test scene.
    pub in_distribution: EnsemblePrediction,
    pub truth: LabelRaster,
}

/// Scores the trained ensemble and a 7-band forest on the pair's test scene
/// and on its unshifted twin, which shares terrain, labels and noise draw.
pub fn robustness(pair: &ScenePair, nets: &[NetworkParams<f32>], samples_per_class: usize, seed: u64) -> Result<RobustnessRun> {
    let base = &pair.train.spec;
    let clean = generate_scene(&shifted_spec(base, 0.0))?;
    let k = base.classes.len();
    let truth = pair.train.labels.clone();
    let tests = [clean.masked_stack(), pair.test.masked_stack()];
    let delta = pair.test.spec.classes[0].spectral_mean[0] - base.classes[0].spectral_mean[0];

    let preds = [predict_ensemble(nets, &tests[0])?, predict_ensemble(nets, &tests[1])?];
    let mut scores = Vec::new();
    for (m, net) in nets.iter().enumerate() {
        scores.push(ModelScore {
            model: net.arch.as_str().to_string(),
            in_distribution: overall_accuracy(&truth, &preds[0].members[m].argmax(), k)?,
            shifted: overall_accuracy(&truth, &preds[1].members[m].argmax(), k)?,
        });
    }
    scores.push(ModelScore {
        model: "merged".into(),
        in_distribution: overall_accuracy(&truth, &preds[0].merged.argmax(), k)?,
        shifted: overall_accuracy(&truth, &preds[1].merged.argmax(), k)?,
    });

    let stack = pair.train.masked_stack();
    let sample = stratified_sample(&stack, &truth, k, samples_per_class, seed)?;
    let rf = PixelModel::Rf(rf_train(&sample.table, ForestParams::default(), seed)?);
    scores.push(ModelScore {
        model: "rf".into(),
        in_distribution: overall_accuracy(&truth, &rf.predict_raster(&tests[0])?, k)?,
        shifted: overall_accuracy(&truth, &rf.predict_raster(&tests[1])?, k)?,
    });
    let [in_distribution, _] = preds;
    Ok(RobustnessRun {
        report: RobustnessReport {
            scene_seed: base.seed,
            delta,
            scores,
        },
        in_distribution,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Table2Config {
        Table2Config {
            scenes: 1,
            scene: SceneSpec {
                width: 128,
                height: 128,
                ..Default::default()
            },
            samples_per_class: 30,
            svm_samples_per_class: 10,
            eval_stride: 8,
            forest: ForestParams {
                n_trees: 20,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn table2_is_deterministic_and_complete() {
        let a = table2(4, &tiny()).unwrap();
        let b = table2(4, &tiny()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.rows.len(), 6);
        assert_eq!(a.summary.len(), 6);
        assert_eq!(a.importance_ranking.len(), 1);
        assert_eq!(a.importance_ranking[0].len(), 7);
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.overall_accuracy));
            assert!((0.0..=1.0).contains(&r.overall_f1));
        }
        assert!(a.render_table().contains("svm"));
    }

    #[test]
    fn eval_grid_skips_training_pixels() {
        let p = eval_positions(8, 8, 4, &[0, 36]);
        assert_eq!(p, vec![4, 32]);
    }

    #[test]
    fn invalid_configs() {
        assert!(table2(0, &Table2Config { scenes: 0, ..tiny() }).is_err());
        assert!(table2(0, &Table2Config { eval_stride: 0, ..tiny() }).is_err());
    }
}
