use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn landseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_landseg"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = landseg(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn small_scene(dir: &Path, size: usize, seed: &str) {
    std::fs::write(dir.join("spec.json"), format!(r#"{{"width": {size}, "height": {size}}}"#)).unwrap();
    ok(dir, &["synth", "--spec", "spec.json", "--out", "data", "--seed", seed]);
}

#[test]
fn evaluate_identical_maps_is_perfect() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "1");
    let table = ok(
        d.path(),
        &["evaluate", "--pred", "data/scene_labels", "--truth", "data/scene_labels", "--out", "r.json"],
    );
    assert!(table.contains("Overall"));
    let r = json(&d.path().join("r.json"));
    assert_eq!(r["overall_accuracy"], 1.0);
}

#[test]
fn default_tiling_of_a_512_scene_has_nine_anchors() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 512, "2");
    ok(d.path(), &["tile", "--stack", "data/scene_stack", "--labels", "data/scene_labels", "--out", "tiles"]);
    let plan = json(&d.path().join("tiles/plan.json"));
    assert_eq!(plan["anchors"].as_array().unwrap().len(), 9);
    let index = json(&d.path().join("tiles/tiles.json"));
    assert_eq!(index["tiles"].as_array().unwrap().len(), 9);
}

#[test]
fn table2_reports_are_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("t2.json"),
        r#"{"scenes": 2, "scene": {"width": 128, "height": 128}, "samples_per_class": 40,
            "svm_samples_per_class": 15, "eval_stride": 8, "forest": {"n_trees": 30}}"#,
    )
    .unwrap();
    let args = |out: &'static str| ["experiment", "table2", "--seed", "11", "--config", "t2.json", "--out", out];
    let t1 = ok(d.path(), &args("a.json"));
    let t2 = ok(d.path(), &args("b.json"));
    assert_eq!(t1, t2);
    let a = std::fs::read(d.path().join("a.json")).unwrap();
    let b = std::fs::read(d.path().join("b.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(json(&d.path().join("a.json"))["rows"].as_array().unwrap().len(), 12);
}

#[test]
fn pixel_pipeline_appends_to_the_manifest() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "3");
    std::fs::write(d.path().join("rf.json"), r#"{"n_trees": 15}"#).unwrap();
    ok(
        d.path(),
        &[
            "train-pixel", "--algo", "rf", "--stack", "data/scene_stack", "--labels", "data/scene_labels",
            "--samples", "40", "--params", "rf.json", "--out", "m/rf.json",
        ],
    );
    let before = json(&d.path().join("run_manifest.json"));
    ok(d.path(), &["predict", "--model", "m/rf.json", "--stack", "data/scene_stack", "--out", "p/rf"]);
    ok(d.path(), &["evaluate", "--pred", "p/rf_labels", "--truth", "data/scene_labels", "--out", "r.json"]);
    let after = json(&d.path().join("run_manifest.json"));
    let stages = after["stages"].as_array().unwrap();
    let names: Vec<&str> = stages.iter().map(|s| s["stage"].as_str().unwrap()).collect();
    assert_eq!(names, ["synth", "train-pixel", "predict", "evaluate"]);
    assert_eq!(&stages[..2], before["stages"].as_array().unwrap().as_slice());
    assert_eq!(after["seed"], 3);
    let oa = json(&d.path().join("r.json"))["overall_accuracy"].as_f64().unwrap();
    assert!(oa > 0.5, "{oa}");
}

#[test]
fn five_band_models_read_their_bands_by_name() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "4");
    ok(
        d.path(),
        &[
            "train-pixel", "--algo", "cart", "--stack", "data/scene_stack", "--labels", "data/scene_labels",
            "--samples", "40", "--bands", "blue,green,red,red_edge,nir", "--out", "cart.json",
        ],
    );
    let doc = json(&d.path().join("cart.json"));
    assert_eq!(doc["feature_names"].as_array().unwrap().len(), 5);
    ok(d.path(), &["predict", "--model", "cart.json", "--stack", "data/scene_stack", "--out", "p"]);
    assert!(d.path().join("p_labels.json").exists());
}

#[test]
fn network_predictions_ensemble() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "5");
    ok(
        d.path(),
        &["tile", "--stack", "data/scene_stack", "--labels", "data/scene_labels", "--patch", "64", "--stride", "32", "--out", "t"],
    );
    ok(d.path(), &["train-net", "--arch", "psp_mini", "--tiles", "t", "--epochs", "1", "--width", "8", "--out", "w/psp"]);
    let curve = std::fs::read_to_string(d.path().join("w/psp_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 2);
    ok(d.path(), &["predict", "--model", "w/psp", "--stack", "data/scene_stack", "--plan", "t/plan.json", "--out", "a"]);
    ok(d.path(), &["ensemble", "--probs", "a_probs", "a_probs", "--out", "m"]);
    let a = std::fs::read(d.path().join("a_labels.bin")).unwrap();
    let m = std::fs::read(d.path().join("m_labels.bin")).unwrap();
    assert_eq!(a, m);
}

#[test]
fn preprocess_builds_a_seven_band_stack() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("spec.json"), r#"{"width": 128, "height": 128, "cloud_fraction": 0.1}"#).unwrap();
    ok(d.path(), &["synth", "--spec", "spec.json", "--out", "data", "--seed", "6"]);
    ok(
        d.path(),
        &[
            "preprocess", "--in", "data/scene_spectral", "--cloud", "data/scene_cloud", "--reference",
            "data/scene_spectral", "--dem", "data/scene_dem", "--out", "pre/stack",
        ],
    );
    let side = json(&d.path().join("pre/stack.json"));
    assert_eq!(side["bands"].as_array().unwrap().len(), 7);
    assert!(d.path().join("pre/stack_histograms.json").exists());
}

#[test]
fn validation_failures_exit_with_2() {
    let d = tempfile::tempdir().unwrap();
    let missing = landseg(d.path(), &["evaluate", "--pred", "nope", "--truth", "nope", "--out", "r.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing input"));

    let bad_arch = landseg(d.path(), &["train-net", "--arch", "resnet", "--tiles", "t", "--out", "w"]);
    assert_eq!(bad_arch.status.code(), Some(2));

    std::fs::write(d.path().join("spec.json"), r#"{"width": 64, "height": 64}"#).unwrap();
    let small = landseg(d.path(), &["synth", "--spec", "spec.json", "--out", "data"]);
    assert_eq!(small.status.code(), Some(2));
}

#[test]
fn stage_order_violations_name_the_manifest_entry() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "7");
    std::fs::remove_file(d.path().join("data/scene_labels.json")).unwrap();
    let out = landseg(
        d.path(),
        &["evaluate", "--pred", "data/scene_cloud", "--truth", "data/scene_labels", "--out", "r.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("stage order violation") && msg.contains("entry 0 (synth)"), "{msg}");
}

#[test]
fn runtime_failures_exit_with_1() {
    let d = tempfile::tempdir().unwrap();
    small_scene(d.path(), 128, "8");
    std::fs::write(d.path().join("blocker"), "").unwrap();
    let out = landseg(
        d.path(),
        &["evaluate", "--pred", "data/scene_labels", "--truth", "data/scene_labels", "--out", "blocker/r.json"],
    );
    assert_eq!(out.status.code(), Some(1));
}
