//! Integration tests for the batch commands and the binary's exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use dhr_cli::commands::{
    cmd_adjacency, cmd_eval, cmd_ot_bench, cmd_refine, cmd_synth, ERROR_FILE, EVAL_REPORT_JSON,
    M_DH_NPY, M_DH_PNG, PROVENANCE_FILE, REFINE_REPORT_FILE,
};
use dhr_cli::config::PipelineConfig;
use dhr_core::synth::SynthConfig;

fn small_synth() -> SynthConfig {
    SynthConfig { seed: 11, height: 48, width: 48, ..SynthConfig::default() }
}

fn make_suite(dir: &Path, n: usize) {
    let cfg = PipelineConfig { synth: small_synth(), ..PipelineConfig::default() };
    assert_eq!(cmd_synth(&cfg, n, dir).unwrap(), 0);
}

#[test]
fn refine_empty_input_dir_succeeds_with_empty_report() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    fs::create_dir_all(&scenes).unwrap();
    let out = tmp.path().join("out");
    let cfg = PipelineConfig::default();
    assert_eq!(cmd_refine(&scenes, &out, &cfg).unwrap(), 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(REFINE_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["scenes_total"], 0);
}

#[test]
fn refine_writes_all_outputs_for_one_scene() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 1);
    let out = tmp.path().join("out");
    let mut cfg = PipelineConfig::default();
    cfg.io.workers = 1;
    assert_eq!(cmd_refine(&scenes, &out, &cfg).unwrap(), 0);
    let scene_out = out.join("scene_0000");
    for f in [M_DH_NPY, M_DH_PNG, "m_init.png", PROVENANCE_FILE] {
        assert!(scene_out.join(f).exists(), "{f} missing");
    }
    let prov: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(scene_out.join(PROVENANCE_FILE)).unwrap()).unwrap();
    assert_eq!(prov["scene"], "scene_0000");
    assert!(prov["groups"].is_array());
}

#[test]
fn refine_records_scene_errors_and_exits_one() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 2);
    // Break one scene.
    fs::remove_file(scenes.join("scene_0001").join("uss_feat.npy")).unwrap();
    let out = tmp.path().join("out");
    let cfg = PipelineConfig::default();
    assert_eq!(cmd_refine(&scenes, &out, &cfg).unwrap(), 1);
    assert!(out.join("scene_0001").join(ERROR_FILE).exists());
    assert!(out.join("scene_0000").join(M_DH_PNG).exists());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(REFINE_REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(report["scenes_failed"], 1);
    assert_eq!(report["scenes_ok"], 1);
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 2);
    let out = tmp.path().join("report");
    let code = cmd_eval(&scenes, &scenes, Some(&out), "gt.png", "gt.png", 1).unwrap();
    assert_eq!(code, 0);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(EVAL_REPORT_JSON)).unwrap()).unwrap();
    assert_eq!(report["miou"], 1.0);
    assert_eq!(report["scenes_evaluated"], 2);
}

#[test]
fn eval_runs_are_reproducible() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 3);
    let out_a = tmp.path().join("a");
    let out_b = tmp.path().join("b");
    cmd_eval(&scenes, &scenes, Some(&out_a), "base_mask.png", "gt.png", 1).unwrap();
    cmd_eval(&scenes, &scenes, Some(&out_b), "base_mask.png", "gt.png", 1).unwrap();
    let a = fs::read(out_a.join(EVAL_REPORT_JSON)).unwrap();
    let b = fs::read(out_b.join(EVAL_REPORT_JSON)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn eval_lists_mismatched_ids_and_exits_one() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 2);
    let preds = tmp.path().join("preds");
    fs::create_dir_all(preds.join("scene_0000")).unwrap();
    fs::copy(scenes.join("scene_0000").join("gt.png"), preds.join("scene_0000").join("m_dh.png")).unwrap();
    fs::create_dir_all(preds.join("scene_9999")).unwrap();
    fs::copy(scenes.join("scene_0000").join("gt.png"), preds.join("scene_9999").join("m_dh.png")).unwrap();
    let out = tmp.path().join("report");
    let code = cmd_eval(&preds, &scenes, Some(&out), "m_dh.png", "gt.png", 1).unwrap();
    assert_eq!(code, 1);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(EVAL_REPORT_JSON)).unwrap()).unwrap();
    let mismatched = report["mismatched"].as_array().unwrap();
    assert_eq!(mismatched.len(), 2); // scene_9999 unmatched + scene_0001 missing prediction
    assert_eq!(report["scenes_evaluated"], 1);
    assert_eq!(report["miou"], 1.0);
}

#[test]
fn refined_suite_beats_base_mask() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 6);
    let out = tmp.path().join("out");
    let cfg = PipelineConfig::default();
    assert_eq!(cmd_refine(&scenes, &out, &cfg).unwrap(), 0);

    let rep_dir = tmp.path().join("reports");
    cmd_eval(&scenes, &scenes, Some(&rep_dir.join("base")), "base_mask.png", "gt.png", 1).unwrap();
    cmd_eval(&out, &scenes, Some(&rep_dir.join("dh")), "m_dh.png", "gt.png", 1).unwrap();
    let base: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep_dir.join("base").join(EVAL_REPORT_JSON)).unwrap()).unwrap();
    let dh: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(rep_dir.join("dh").join(EVAL_REPORT_JSON)).unwrap()).unwrap();
    let base_miou = base["miou"].as_f64().unwrap();
    let dh_miou = dh["miou"].as_f64().unwrap();
    assert!(dh_miou > base_miou, "refined mIoU {dh_miou} not above base {base_miou}");
}

#[test]
fn ot_bench_rows_respect_contracts() {
    let cfg = PipelineConfig::default();
    let (rows, code) = cmd_ot_bench("1x1,64x4,1024x21", &cfg).unwrap();
    assert_eq!(code, 0);
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].iterations, 1);
    assert!(rows[0].violation <= 1e-12);
    for row in &rows {
        assert!(row.converged, "{}x{} did not converge", row.pixels, row.classes);
        assert!(row.violation <= cfg.ot.tol);
    }
}

#[test]
fn ot_bench_large_instance_converges_within_cap() {
    // Regression bound: 4096x21 at lambda 0.1 converges under 1000
    // iterations.
    let cfg = PipelineConfig::default();
    let (rows, _) = cmd_ot_bench("4096x21", &cfg).unwrap();
    assert!(rows[0].converged);
    assert!(rows[0].iterations <= 1000);
}

#[test]
fn adjacency_uses_manifest_groups() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 3);
    let (report, code) = cmd_adjacency(&scenes, 1).unwrap();
    assert_eq!(code, 0);
    assert_eq!(report.scenes, 3);
    assert!(report.with_groups);
    assert!(report.adjacent_area_ratio > 0.0 && report.adjacent_area_ratio < 1.0);
    // Intra-super adjacencies exist in every scene, so the inter-class share
    // must sit strictly below 1.
    assert!(report.inter_class_share < 1.0);
    assert!(report.inter_class_share > 0.0);
}

// ---------------------------------------------------------------------------
// Binary-level exit codes.
// ---------------------------------------------------------------------------

fn dhr_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dhr"))
}

#[test]
fn invalid_synth_config_exits_two_before_writing() {
    let tmp = tempfile::TempDir::new().unwrap();
    let out = tmp.path().join("suite");
    let status = dhr_bin()
        .args(["synth", "-n", "2", "--out"])
        .arg(&out)
        .args(["--minor-area-frac", "1.5-1.6"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists(), "failed synth must not create output");
}

#[test]
fn malformed_grid_flag_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    let status = dhr_bin()
        .args(["synth", "-n", "1", "--out"])
        .arg(tmp.path().join("x"))
        .args(["--grid", "64"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn unknown_refiner_exits_two() {
    let tmp = tempfile::TempDir::new().unwrap();
    let status = dhr_bin()
        .args(["refine", "--input"])
        .arg(tmp.path())
        .arg("--out")
        .arg(tmp.path().join("out"))
        .args(["--refiner", "crf"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn missing_scene_file_exits_one() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 1);
    fs::remove_file(scenes.join("scene_0000").join("cam.npy")).unwrap();
    let status = dhr_bin()
        .args(["refine", "--input"])
        .arg(&scenes)
        .arg("--out")
        .arg(tmp.path().join("out"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}

#[test]
fn dhr_threads_env_overrides_worker_count() {
    let tmp = tempfile::TempDir::new().unwrap();
    let scenes = tmp.path().join("scenes");
    make_suite(&scenes, 1);
    let out = tmp.path().join("out");
    let output = dhr_bin()
        .args(["refine", "--input"])
        .arg(&scenes)
        .arg("--out")
        .arg(&out)
        .args(["--workers", "1"])
        .env("DHR_THREADS", "3")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("(3 workers)"), "stdout was: {stdout}");
}

#[test]
fn config_file_drives_the_pipeline_and_flags_win() {
    let tmp = tempfile::TempDir::new().unwrap();
    let config_path = tmp.path().join("run.toml");
    fs::write(
        &config_path,
        "[ot]\nlambda = 0.2\n\n[synth]\nseed = 5\nheight = 32\nwidth = 32\n",
    )
    .unwrap();
    let suite = tmp.path().join("suite");
    let status = dhr_bin()
        .arg("synth")
        .args(["-n", "1", "--out"])
        .arg(&suite)
        .arg("--config")
        .arg(&config_path)
        .args(["--seed", "9"]) // flag beats the file
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(suite.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["seed"], 9);
    assert_eq!(manifest["config"]["height"], 32);
}
