use landseg::classical::{rf_train, ForestParams, ModelDocument, PixelModel};
use landseg::eval::{ensemble_average, report, ConfusionMatrix};
use landseg::neural::{build_network, load_weights, predict_tiles, save_weights, train, Arch, TrainConfig};
use landseg::preprocess::{preprocess_scene, CloudMask};
use landseg::raster::{read_labels, read_raster};
use landseg::sampling::stratified_sample;
use landseg::synth::{generate_scene, SceneSpec};
use landseg::tiling::{extract_tiles, plan_tiles, split_samples, stitch_center, Split};
use landseg::{ClassLegend, NODATA};

fn scene(seed: u64, cloud: f64) -> landseg::synth::Scene {
    generate_scene(&SceneSpec {
        width: 128,
        height: 128,
        seed,
        cloud_fraction: cloud,
        ..Default::default()
    })
    .unwrap()
}

#[test]
fn written_scenes_feed_preprocessing() {
    let s = scene(1, 0.15);
    let dir = tempfile::tempdir().unwrap();
    s.write(dir.path(), "s").unwrap();
    let spectral = read_raster(&dir.path().join("s_spectral")).unwrap();
    let dem = read_raster(&dir.path().join("s_dem")).unwrap();
    let legend = ClassLegend::new([("clear", [0, 0, 0]), ("cloud", [255, 255, 255])]).unwrap();
    let cloud = CloudMask::from_labels(&read_labels(&dir.path().join("s_cloud"), &legend).unwrap());
    assert_eq!(cloud, s.cloud);
    let out = preprocess_scene(&spectral, &cloud, &spectral, &dem, s.spec.cell_size).unwrap();
    assert_eq!(out.stack.n_bands(), 7);
    let masked = (0..128 * 128).filter(|&i| !out.stack.mask()[i]).count();
    assert_eq!(masked, (0.15f64 * 128.0 * 128.0).round() as usize);
    assert_eq!(out.stack.band(6), s.stack.band(6));
}

#[test]
fn forest_on_a_scene_beats_chance_and_reports() {
    let s = scene(2, 0.0);
    let legend = s.spec.legend();
    let stack = s.masked_stack();
    let sample = stratified_sample(&stack, &s.labels, legend.len(), 60, 2).unwrap();
    let forest = rf_train(&sample.table, ForestParams { n_trees: 40, ..Default::default() }, 2).unwrap();
    let model = PixelModel::Rf(forest);
    let pred = model.predict_raster(&stack).unwrap();
    let mut cm = ConfusionMatrix::new(legend.len());
    cm.accumulate_raster(&s.labels, &pred).unwrap();
    let rep = report(&cm, &legend, "rf", "scene-2").unwrap();
    assert!(rep.overall_accuracy > 0.5, "{}", rep.overall_accuracy);
    assert_eq!(rep.total, 128 * 128);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rf.json");
    ModelDocument::new(sample.table.feature_names.clone(), model).save(&path).unwrap();
    let back = ModelDocument::load(&path).unwrap();
    assert_eq!(back.model.predict_raster(&stack).unwrap(), pred);
}

#[test]
fn network_round_trip_through_tiles_and_weights() {
    let s = scene(3, 0.05);
    let stack = s.masked_stack();
    let plan = plan_tiles(128, 128, 32, 16).unwrap();
    let set = split_samples(extract_tiles(&stack, &s.labels, &plan).unwrap(), 3).unwrap();
    assert!(set.of_split(Split::Train).count() > set.of_split(Split::Val).count());
    let net = build_network::<f32>(Arch::UnetMini, 7, 6, 4, 32, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        augment: false,
        ..TrainConfig::for_arch(Arch::UnetMini)
    };
    let out = train(net, &set, &cfg).unwrap();
    assert_eq!(out.curve.len(), 2);
    assert!(out.curve.iter().all(|e| e.train_loss.is_finite() && e.val_loss.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    save_weights(&out.net, &dir.path().join("w")).unwrap();
    let net = load_weights::<f32>(&dir.path().join("w")).unwrap();
    assert_eq!(net.values, out.net.values);

    let (labels, probs) = stitch_center(&predict_tiles(&net, &stack, &plan).unwrap(), &plan).unwrap();
    assert_eq!(labels.dims(), (128, 128));
    assert!(labels.labels().iter().all(|&l| l != NODATA && l < 6));
    let merged = ensemble_average(&[&probs, &probs]).unwrap();
    assert_eq!(merged.argmax(), labels);
}
