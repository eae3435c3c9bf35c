//! Stage implementations.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use landseg::classical::{
    cart_train, rf_train, svm_train, ForestParams, ModelDocument, PixelModel, SvmParams, TreeParams,
};
use landseg::eval::{ensemble_average, report, ConfusionMatrix};
use landseg::experiment::{table2 as run_table2, Table2Config};
use landseg::neural::{build_network, load_weights, predict_tiles, train, write_loss_curve, save_weights, TrainConfig};
use landseg::preprocess::{preprocess_scene, CloudMask};
use landseg::raster::{body_path, read_labels, read_raster, sidecar_path, write_labels, write_raster};
use landseg::sampling::stratified_sample;
use landseg::synth::{generate_scene, SceneSpec};
use landseg::tiling::{
    extract_tiles, plan_tiles, read_sample_set, split_samples, stitch_center, write_sample_set, ProbMap, TilePlan,
    TILE_INDEX,
};
use landseg::{ClassLegend, GroundPointSet, LabelRaster, Raster, NODATA};

use crate::failure::Failure;
use crate::manifest::{unix_now, RunManifest, StageRecord};
use crate::{
    EnsembleArgs, EvaluateArgs, PredictArgs, PreprocessArgs, SynthArgs, Table2Args, TileArgs, TrainNetArgs,
    TrainPixelArgs,
};

type Outcome = Result<(), Failure>;

/// How a declared input is stored on disk.
#[derive(Clone, Copy)]
enum Kind {
    /// Sidecar plus body sharing a stem.
    Dataset,
    File,
}

pub struct Context {
    run_dir: PathBuf,
    legend: ClassLegend,
    seed: Option<u64>,
    manifest: RunManifest,
    started: u64,
}

fn parse_legend(spec: &str) -> Result<ClassLegend, Failure> {
    match spec {
        "six" => Ok(ClassLegend::six_class()),
        "seven" => Ok(ClassLegend::seven_class()),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Failure::validation(format!("legend {path}: {e}")))?;
            let parsed: ClassLegend = serde_json::from_str(&text)?;
            Ok(ClassLegend::new(parsed.entries().iter().map(|e| (e.name.clone(), e.color)))?)
        }
    }
}

fn cloud_legend() -> ClassLegend {
    ClassLegend::new([("clear", [0, 0, 0]), ("cloud", [255, 255, 255])]).expect("static legend")
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

fn create_parent(stem: &Path) -> Outcome {
    match stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(format!("{}: {e}", dir.display()))),
        None => Ok(()),
    }
}

/// Defaults overlaid with the keys of an optional JSON config file.
fn layered<T: Serialize + DeserializeOwned>(defaults: T, config: Option<&Path>) -> Result<T, Failure> {
    let Some(path) = config else {
        return Ok(defaults);
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let overlay: Value = serde_json::from_str(&text)?;
    let mut base = serde_json::to_value(defaults).map_err(|e| Failure::runtime(e.to_string()))?;
    merge(&mut base, overlay);
    Ok(serde_json::from_value(base)?)
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl Context {
    pub fn open(run_dir: PathBuf, legend: &str, seed: Option<u64>) -> Result<Self, Failure> {
        let legend = parse_legend(legend)?;
        let names = legend.entries().iter().map(|e| e.name.clone()).collect();
        let manifest = RunManifest::load_or_new(&run_dir, names)?;
        Ok(Context {
            run_dir,
            legend,
            seed,
            manifest,
            started: unix_now(),
        })
    }

    /// Fails with the producing manifest entry when an input declared by an
    /// earlier stage is missing, and as a plain missing file otherwise.
    fn require(&self, path: &Path, kind: Kind) -> Outcome {
        let probe = match kind {
            Kind::Dataset => sidecar_path(path),
            Kind::File => path.to_path_buf(),
        };
        if probe.exists() {
            return Ok(());
        }
        match self.manifest.producer(path) {
            Some((i, s)) => Err(Failure::validation(format!(
                "stage order violation: {} is declared by manifest entry {i} ({}) but does not exist",
                path.display(),
                s.stage
            ))),
            None => Err(Failure::validation(format!("missing input {}", probe.display()))),
        }
    }

    fn finish(&mut self, stage: &str, config: Option<&Path>, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>, seed: Option<u64>) -> Outcome {
        let record = StageRecord {
            stage: stage.to_string(),
            config: config.map(Path::to_path_buf),
            inputs,
            outputs,
            seed,
            started_unix: self.started,
            finished_unix: unix_now(),
        };
        let dir = self.run_dir.clone();
        self.manifest.append(record, &dir)
    }

    fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }
}

pub fn synth(ctx: &mut Context, a: SynthArgs) -> Outcome {
    if let Some(p) = &a.spec {
        ctx.require(p, Kind::File)?;
    }
    let mut spec = layered(SceneSpec::default(), a.spec.as_deref())?;
    spec.seed = ctx.seed_or(spec.seed);
    if spec.classes.len() > ctx.legend.len() {
        return Err(Failure::validation(format!(
            "scene has {} classes but the legend only {}",
            spec.classes.len(),
            ctx.legend.len()
        )));
    }
    let scene = generate_scene(&spec)?;
    scene.write(&a.out, &a.name)?;
    let outputs = ["stack", "spectral", "dem", "labels", "cloud"]
        .iter()
        .map(|s| a.out.join(format!("{}_{s}", a.name)))
        .chain([a.out.join(format!("{}_spec.json", a.name))])
        .collect();
    println!("wrote scene {} ({}x{}) to {}", a.name, spec.width, spec.height, a.out.display());
    ctx.finish("synth", a.spec.as_deref(), vec![], outputs, Some(spec.seed))
}

pub fn preprocess(ctx: &mut Context, a: PreprocessArgs) -> Outcome {
    for p in [&a.input, &a.reference, &a.dem].into_iter().chain(a.cloud.as_ref()) {
        ctx.require(p, Kind::Dataset)?;
    }
    let spectral = read_raster(&a.input)?;
    let reference = read_raster(&a.reference)?;
    let dem = read_raster(&a.dem)?;
    let (w, h) = spectral.dims();
    let cloud = match &a.cloud {
        Some(p) => CloudMask::from_labels(&read_labels(p, &cloud_legend())?),
        None => CloudMask::clear(w, h),
    };
    let out = preprocess_scene(&spectral, &cloud, &reference, &dem, a.cell_size)?;
    create_parent(&a.out)?;
    write_raster(&out.stack, &a.out)?;
    let maps = with_suffix(&a.out, "_histograms.json");
    write_json(&maps, &out.maps)?;
    let inputs = [&a.input, &a.reference, &a.dem].into_iter().chain(a.cloud.as_ref()).cloned().collect();
    ctx.finish("preprocess", None, inputs, vec![a.out, maps], None)
}

pub fn tile(ctx: &mut Context, a: TileArgs) -> Outcome {
    ctx.require(&a.stack, Kind::Dataset)?;
    ctx.require(&a.labels, Kind::Dataset)?;
    let stack = read_raster(&a.stack)?;
    let labels = read_labels(&a.labels, &ctx.legend)?;
    let (w, h) = stack.dims();
    let plan = plan_tiles(w, h, a.patch, a.stride)?;
    let seed = ctx.seed_or(0);
    let set = split_samples(extract_tiles(&stack, &labels, &plan)?, seed)?;
    write_sample_set(&set, &plan, &a.out)?;
    let plan_path = a.out.join("plan.json");
    write_json(&plan_path, &plan)?;
    let (tr, va, te) = set.split_counts();
    println!("{} anchors, {} tiles kept (train {tr}, val {va}, test {te}), {} dropped", plan.len(), set.tiles.len(), set.dropped);
    ctx.finish("tile", None, vec![a.stack, a.labels], vec![a.out.join(TILE_INDEX), plan_path], Some(seed))
}

pub fn train_pixel(ctx: &mut Context, a: TrainPixelArgs) -> Outcome {
    ctx.require(&a.stack, Kind::Dataset)?;
    ctx.require(&a.labels, Kind::Dataset)?;
    if let Some(p) = &a.params {
        ctx.require(p, Kind::File)?;
    }
    let mut stack = read_raster(&a.stack)?;
    if let Some(names) = &a.bands {
        let idx = names
            .iter()
            .map(|n| stack.band_index(n).ok_or_else(|| Failure::validation(format!("stack has no band {n:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        stack = stack.select_bands(&idx)?;
    }
    let labels = read_labels(&a.labels, &ctx.legend)?;
    let seed = ctx.seed_or(0);
    let sample = stratified_sample(&stack, &labels, ctx.legend.len(), a.samples, seed)?;
    let params = a.params.as_deref();
    let model = match a.algo.as_str() {
        "cart" => PixelModel::Cart(cart_train(&sample.table, layered(TreeParams::default(), params)?)?),
        "rf" => PixelModel::Rf(rf_train(&sample.table, layered(ForestParams::default(), params)?, seed)?),
        _ => PixelModel::Svm(svm_train(&sample.table, layered(SvmParams::default(), params)?)?),
    };
    if let PixelModel::Rf(f) = &model {
        println!("out-of-bag error {:.4}", f.oob_error);
    }
    create_parent(&a.out)?;
    ModelDocument::new(stack.band_names().to_vec(), model).save(&a.out)?;
    println!("trained {} on {} pixels", a.algo, sample.table.n_rows());
    ctx.finish("train-pixel", a.params.as_deref(), vec![a.stack, a.labels], vec![a.out], Some(seed))
}

pub fn train_net(ctx: &mut Context, a: TrainNetArgs) -> Outcome {
    ctx.require(&a.tiles.join(TILE_INDEX), Kind::File)?;
    if let Some(p) = &a.config {
        ctx.require(p, Kind::File)?;
    }
    let mut cfg: TrainConfig = layered(TrainConfig::for_arch(a.arch), a.config.as_deref())?;
    cfg.seed = ctx.seed_or(cfg.seed);
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer = cfg.optimizer.with_lr(lr);
    }
    let (set, plan) = read_sample_set(&a.tiles, &ctx.legend)?;
    let bands = set
        .tiles
        .first()
        .map(|t| t.raster.n_bands())
        .ok_or_else(|| Failure::validation("tile set is empty"))?;
    let net = build_network::<f32>(a.arch, bands, ctx.legend.len(), a.width, plan.patch, cfg.seed)?;
    let outcome = train(net, &set, &cfg)?;
    create_parent(&a.out)?;
    save_weights(&outcome.net, &a.out)?;
    let curve = with_suffix(&a.out, "_loss.csv");
    write_loss_curve(&curve, &outcome.curve)?;
    println!("{} steps, best epoch {}", outcome.steps, outcome.best_epoch);
    let outputs = vec![a.out.clone(), curve];
    ctx.finish("train-net", a.config.as_deref(), vec![a.tiles.join(TILE_INDEX)], outputs, Some(cfg.seed))
}

/// Weights stem of a network model path, if it names one.
fn weights_stem(model: &Path) -> Option<PathBuf> {
    if body_path(model).exists() {
        return Some(model.to_path_buf());
    }
    let stripped = model.with_extension("");
    (model.extension().is_some_and(|e| e == "json") && body_path(&stripped).exists()).then_some(stripped)
}

fn pixel_probabilities(model: &PixelModel, stack: &Raster, k: usize) -> Result<ProbMap, Failure> {
    let (w, h) = stack.dims();
    let n = w * h;
    let mut probs = vec![1.0 / k as f64; k * n];
    for i in (0..n).filter(|&i| stack.mask()[i]) {
        let row: Vec<f64> = stack.bands().iter().map(|b| b[i] as f64).collect();
        for (c, p) in model.predict_distribution(&row, k).into_iter().enumerate() {
            probs[c * n + i] = p;
        }
    }
    Ok(ProbMap::new(w, h, k, probs)?)
}

fn masked_labels(map: &ProbMap, mask: &[bool]) -> LabelRaster {
    let mut labels = map.argmax();
    for (l, &ok) in labels.labels_mut().iter_mut().zip(mask) {
        if !ok {
            *l = NODATA;
        }
    }
    labels
}

pub fn predict(ctx: &mut Context, a: PredictArgs) -> Outcome {
    ctx.require(&a.stack, Kind::Dataset)?;
    let stack = read_raster(&a.stack)?;
    let k = ctx.legend.len();
    let mut inputs = vec![a.model.clone(), a.stack.clone()];
    let (labels, probs) = if let Some(stem) = weights_stem(&a.model) {
        let net = load_weights::<f32>(&stem)?;
        if net.classes != k {
            return Err(Failure::validation(format!("network has {} classes, legend {k}", net.classes)));
        }
        let (w, h) = stack.dims();
        let plan: TilePlan = match &a.plan {
            Some(p) => {
                ctx.require(p, Kind::File)?;
                inputs.push(p.clone());
                let text = std::fs::read_to_string(p).map_err(|e| Failure::runtime(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)?
            }
            None => plan_tiles(w, h, net.patch, net.patch / 2)?,
        };
        if plan.patch != net.patch {
            return Err(Failure::validation(format!("plan patch {} but network patch {}", plan.patch, net.patch)));
        }
        let (_, probs) = stitch_center(&predict_tiles(&net, &stack, &plan)?, &plan)?;
        (masked_labels(&probs, stack.mask()), probs)
    } else {
        ctx.require(&a.model, Kind::File)?;
        let doc = ModelDocument::load(&a.model)?;
        let idx = doc
            .feature_names
            .iter()
            .map(|n| stack.band_index(n).ok_or_else(|| Failure::validation(format!("stack has no band {n:?}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let features = stack.select_bands(&idx)?;
        let probs = pixel_probabilities(&doc.model, &features, k)?;
        (doc.model.predict_raster(&features)?, probs)
    };
    create_parent(&a.out)?;
    let label_stem = with_suffix(&a.out, "_labels");
    let prob_stem = with_suffix(&a.out, "_probs");
    write_labels(&labels, &label_stem)?;
    write_raster(&probs.to_raster(), &prob_stem)?;
    ctx.finish("predict", None, inputs, vec![label_stem, prob_stem], None)
}

pub fn ensemble(ctx: &mut Context, a: EnsembleArgs) -> Outcome {
    let mut maps = Vec::with_capacity(a.probs.len());
    for p in &a.probs {
        ctx.require(p, Kind::Dataset)?;
        maps.push(ProbMap::from_raster(&read_raster(p)?)?);
    }
    let merged = ensemble_average(&maps.iter().collect::<Vec<_>>())?;
    create_parent(&a.out)?;
    let label_stem = with_suffix(&a.out, "_labels");
    let prob_stem = with_suffix(&a.out, "_probs");
    write_labels(&merged.argmax(), &label_stem)?;
    write_raster(&merged.to_raster(), &prob_stem)?;
    ctx.finish("ensemble", None, a.probs, vec![label_stem, prob_stem], None)
}

pub fn evaluate(ctx: &mut Context, a: EvaluateArgs) -> Outcome {
    ctx.require(&a.pred, Kind::Dataset)?;
    let pred = read_labels(&a.pred, &ctx.legend)?;
    let mut cm = ConfusionMatrix::new(ctx.legend.len());
    if a.truth.extension().is_some_and(|e| e == "csv") {
        ctx.require(&a.truth, Kind::File)?;
        let points = GroundPointSet::read_csv(&a.truth, pred.dims(), &ctx.legend)?;
        cm.accumulate_points(&points, &pred)?;
    } else {
        ctx.require(&a.truth, Kind::Dataset)?;
        cm.accumulate_raster(&read_labels(&a.truth, &ctx.legend)?, &pred)?;
    }
    let rep = report(&cm, &ctx.legend, &a.model_id, &a.dataset_id)?;
    print!("{}", rep.render_table());
    write_json(&a.out, &rep)?;
    let mut outputs = vec![a.out.clone()];
    if let Some(m) = &a.matrix {
        create_parent(m)?;
        cm.write_csv(m)?;
        outputs.push(m.clone());
    }
    ctx.finish("evaluate", None, vec![a.pred, a.truth], outputs, None)
}

pub fn table2(ctx: &mut Context, a: Table2Args) -> Outcome {
    if let Some(p) = &a.config {
        ctx.require(p, Kind::File)?;
    }
    let cfg = layered(Table2Config::default(), a.config.as_deref())?;
    let seed = ctx.seed_or(0);
    let rep = run_table2(seed, &cfg)?;
    print!("{}", rep.render_table());
    write_json(&a.out, &rep)?;
    ctx.finish("experiment table2", a.config.as_deref(), vec![], vec![a.out], Some(seed))
}
