//! Batch commands: scene refinement, evaluation, suite generation, solver
//! benchmarking, and adjacency analysis.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dhr_core::eval::{adjacency_stats, miou, AdjacencyReport, ConfusionMatrix, MiouReport};
use dhr_core::mask_png::{load_mask_png, save_mask_png};
use dhr_core::npy::save_npy;
use dhr_core::ot::solve_entropic_ot;
use dhr_core::pipeline::dhr_propagate;
use dhr_core::rebalance::ClassGroups;
use dhr_core::scene::{list_scene_dirs, load_scene, LabelsJson, GT_FILE, LABELS_FILE};
use dhr_core::synth::{generate_suite, SuiteManifest, MANIFEST_FILE};
use dhr_core::tensor::{argmax_labels, LabelMask, IGNORE};

use crate::config::PipelineConfig;

pub const M_DH_NPY: &str = "m_dh.npy";
pub const M_DH_PNG: &str = "m_dh.png";
pub const M_INIT_PNG: &str = "m_init.png";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const ERROR_FILE: &str = "error.json";
pub const REFINE_REPORT_FILE: &str = "refine_report.json";
pub const EVAL_REPORT_JSON: &str = "eval_report.json";
pub const EVAL_REPORT_TXT: &str = "eval_report.txt";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneSummary {
    pub id: String,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub vanished_classes: Vec<u8>,
    pub ot_fallback: bool,
    pub refiner_fell_back: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefineReport {
    pub scenes_total: usize,
    pub scenes_ok: usize,
    pub scenes_failed: usize,
    pub scenes: Vec<SceneSummary>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Refines every scene under `input_dir` into `output_dir`. Returns the
/// process exit code: 0 on success, 1 if any scene failed.
pub fn cmd_refine(input_dir: &Path, output_dir: &Path, cfg: &PipelineConfig) -> Result<i32> {
    let dhr_cfg = cfg.build_dhr()?;
    let workers = cfg.resolve_workers()?;
    let scene_dirs = list_scene_dirs(input_dir).context("listing scene directories")?;
    fs::create_dir_all(output_dir).with_context(|| format!("creating {}", output_dir.display()))?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")?;

    let started = Instant::now();
    let mut summaries: Vec<SceneSummary> = pool.install(|| {
        scene_dirs
            .par_iter()
            .map(|dir| refine_one_scene(dir, output_dir, &dhr_cfg))
            .collect()
    });
    summaries.sort_by(|a, b| a.id.cmp(&b.id));

    let report = RefineReport {
        scenes_total: summaries.len(),
        scenes_ok: summaries.iter().filter(|s| s.ok).count(),
        scenes_failed: summaries.iter().filter(|s| !s.ok).count(),
        scenes: summaries,
    };
    write_json(&output_dir.join(REFINE_REPORT_FILE), &report)?;

    println!(
        "refined {}/{} scenes in {:.2}s ({} worker{})",
        report.scenes_ok,
        report.scenes_total,
        started.elapsed().as_secs_f64(),
        workers,
        if workers == 1 { "" } else { "s" }
    );
    for s in report.scenes.iter().filter(|s| !s.ok) {
        eprintln!("scene {} failed: {}", s.id, s.error.as_deref().unwrap_or("unknown"));
    }
    Ok(if report.scenes_failed > 0 { 1 } else { 0 })
}

fn refine_one_scene(scene_dir: &Path, output_dir: &Path, cfg: &dhr_core::pipeline::DhrConfig) -> SceneSummary {
    let id = scene_dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| scene_dir.display().to_string());
    match refine_scene_inner(scene_dir, output_dir, cfg) {
        Ok(summary) => summary,
        Err(err) => {
            let out = output_dir.join(&id);
            let _ = fs::create_dir_all(&out);
            let record = serde_json::json!({ "id": id, "error": err.to_string() });
            let _ = write_json(&out.join(ERROR_FILE), &record);
            SceneSummary {
                id,
                ok: false,
                error: Some(err.to_string()),
                vanished_classes: Vec::new(),
                ot_fallback: false,
                refiner_fell_back: false,
            }
        }
    }
}

fn refine_scene_inner(
    scene_dir: &Path,
    output_dir: &Path,
    cfg: &dhr_core::pipeline::DhrConfig,
) -> Result<SceneSummary> {
    let scene = load_scene(scene_dir)?;
    let out = dhr_propagate(&scene, cfg)?;
    let dir = output_dir.join(&scene.id);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    save_npy(&dir.join(M_DH_NPY), &out.m_dh.to_npy())?;
    save_mask_png(&dir.join(M_DH_PNG), &argmax_labels(&out.m_dh))?;
    save_mask_png(&dir.join(M_INIT_PNG), &argmax_labels(&out.m_init))?;
    write_json(&dir.join(PROVENANCE_FILE), &out.provenance)?;
    Ok(SceneSummary {
        id: scene.id.clone(),
        ok: true,
        error: None,
        vanished_classes: out.provenance.vanished_classes.clone(),
        ot_fallback: out.provenance.ot_fallback,
        refiner_fell_back: out.provenance.refiner_fell_back,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PerSceneMiou {
    pub id: String,
    pub miou: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub scenes_evaluated: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_scene: Vec<PerSceneMiou>,
    pub mean_scene_miou: f64,
    pub adjacency: AdjacencySummary,
    pub mismatched: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AdjacencySummary {
    pub radius: usize,
    pub adjacent_area_ratio: f64,
    pub inter_class_share: f64,
    pub total_pixels: u64,
    pub adjacent_pixels: u64,
    pub inter_class_pixels: u64,
}

fn accumulate_adjacency(summary: &mut AdjacencySummary, report: &AdjacencyReport) {
    summary.total_pixels += report.total_pixels;
    summary.adjacent_pixels += report.adjacent_pixels;
    summary.inter_class_pixels += report.inter_class_pixels;
    summary.adjacent_area_ratio = if summary.total_pixels > 0 {
        summary.adjacent_pixels as f64 / summary.total_pixels as f64
    } else {
        0.0
    };
    summary.inter_class_share = if summary.adjacent_pixels > 0 {
        summary.inter_class_pixels as f64 / summary.adjacent_pixels as f64
    } else {
        0.0
    };
}

/// Compares predicted masks against ground truth over matching scene ids.
pub fn cmd_eval(
    pred_dir: &Path,
    gt_dir: &Path,
    out_dir: Option<&Path>,
    pred_name: &str,
    gt_name: &str,
    radius: usize,
) -> Result<i32> {
    let pred_scenes: BTreeMap<String, PathBuf> = scene_ids(pred_dir)?;
    let gt_scenes: BTreeMap<String, PathBuf> = scene_ids(gt_dir)?;

    let mut mismatched: Vec<String> = Vec::new();
    let mut pairs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    for (id, pdir) in &pred_scenes {
        let pred_mask = pdir.join(pred_name);
        match gt_scenes.get(id) {
            Some(gdir) => {
                let gt_mask = gdir.join(gt_name);
                if !pred_mask.exists() {
                    mismatched.push(format!("{id}: missing {pred_name} in prediction dir"));
                } else if !gt_mask.exists() {
                    mismatched.push(format!("{id}: missing {gt_name} in ground-truth dir"));
                } else {
                    pairs.push((id.clone(), pred_mask, gt_mask));
                }
            }
            None => mismatched.push(format!("{id}: present in predictions, absent from ground truth")),
        }
    }
    for id in gt_scenes.keys() {
        if !pred_scenes.contains_key(id) {
            mismatched.push(format!("{id}: present in ground truth, absent from predictions"));
        }
    }

    // Global class count: labels.json when available, otherwise max label.
    let mut num_classes = 0usize;
    let mut loaded: Vec<(String, LabelMask, LabelMask)> = Vec::new();
    for (id, pred_path, gt_path) in &pairs {
        let pred = load_mask_png(pred_path)?;
        let gt = load_mask_png(gt_path)?;
        let labels_path = gt_scenes[id].join(LABELS_FILE);
        if labels_path.exists() {
            let raw = fs::read_to_string(&labels_path)?;
            if let Ok(labels) = serde_json::from_str::<LabelsJson>(&raw) {
                num_classes = num_classes.max(labels.num_classes);
            }
        }
        let max_label = pred
            .labels()
            .iter()
            .chain(gt.labels().iter())
            .filter(|&&l| l != IGNORE)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(1);
        num_classes = num_classes.max(max_label);
        loaded.push((id.clone(), pred, gt));
    }
    num_classes = num_classes.max(1);

    let mut cm = ConfusionMatrix::new(num_classes);
    let mut per_scene = Vec::new();
    let mut adjacency = AdjacencySummary { radius, ..AdjacencySummary::default() };
    for (id, pred, gt) in &loaded {
        let scene_cm = dhr_core::eval::confusion(pred, gt, num_classes)
            .map_err(|e| anyhow::anyhow!("scene {id}: {e}"))?;
        per_scene.push(PerSceneMiou { id: id.clone(), miou: miou(&scene_cm).mean });
        cm.merge(&scene_cm);
        accumulate_adjacency(&mut adjacency, &adjacency_stats(gt, None, radius));
    }
    let aggregate: MiouReport = miou(&cm);
    let mean_scene_miou = if per_scene.is_empty() {
        0.0
    } else {
        per_scene.iter().map(|s| s.miou).sum::<f64>() / per_scene.len() as f64
    };

    let report = EvalReport {
        num_classes,
        scenes_evaluated: loaded.len(),
        miou: aggregate.mean,
        per_class_iou: aggregate.per_class,
        per_scene,
        mean_scene_miou,
        adjacency,
        mismatched: mismatched.clone(),
    };

    let out = out_dir.unwrap_or(pred_dir);
    fs::create_dir_all(out).ok();
    write_json(&out.join(EVAL_REPORT_JSON), &report)?;
    let text = render_eval_text(&report);
    fs::write(out.join(EVAL_REPORT_TXT), &text)?;
    print!("{text}");

    Ok(if mismatched.is_empty() { 0 } else { 1 })
}

fn render_eval_text(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("scenes evaluated: {}\n", report.scenes_evaluated));
    out.push_str(&format!("classes:          {}\n", report.num_classes));
    out.push_str("per-class IoU:\n");
    for (c, iou) in report.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => out.push_str(&format!("  class {c:3}: {v:.4}\n")),
            None => out.push_str(&format!("  class {c:3}: absent\n")),
        }
    }
    out.push_str(&format!("mIoU (pooled):    {:.4}\n", report.miou));
    out.push_str(&format!("mIoU (scene avg): {:.4}\n", report.mean_scene_miou));
    out.push_str(&format!(
        "adjacency r={}: adjacent {:.1}% of area, {:.1}% inter-class\n",
        report.adjacency.radius,
        100.0 * report.adjacency.adjacent_area_ratio,
        100.0 * report.adjacency.inter_class_share,
    ));
    for miss in &report.mismatched {
        out.push_str(&format!("mismatch: {miss}\n"));
    }
    out
}

fn scene_ids(root: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut map = BTreeMap::new();
    for dir in list_scene_dirs(root)? {
        if let Some(name) = dir.file_name() {
            map.insert(name.to_string_lossy().into_owned(), dir.clone());
        }
    }
    Ok(map)
}

/// Generates a synthetic scene suite.
pub fn cmd_synth(cfg: &PipelineConfig, n: usize, out_dir: &Path) -> Result<i32> {
    let manifest = generate_suite(&cfg.synth, n, out_dir)?;
    println!("generated {} scenes under {}", manifest.scenes.len(), out_dir.display());
    Ok(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub pixels: usize,
    pub classes: usize,
    pub iterations: usize,
    pub converged: bool,
    pub violation: f64,
    pub wall_ms: f64,
}

/// Times the solver on random score matrices of the given sizes.
pub fn cmd_ot_bench(sizes: &str, cfg: &PipelineConfig) -> Result<(Vec<BenchRow>, i32)> {
    let mut rows = Vec::new();
    println!("{:>8} {:>6} {:>10} {:>10} {:>12} {:>10}", "pixels", "classes", "iters", "converged", "violation", "wall_ms");
    for part in sizes.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (n_raw, c_raw) = part
            .split_once('x')
            .with_context(|| format!("size must look like 1024x21, got {part:?}"))?;
        let n: usize = n_raw.trim().parse()?;
        let c: usize = c_raw.trim().parse()?;
        let mut rng = ChaCha8Rng::seed_from_u64((n as u64) << 32 | c as u64);
        let mut scores = Array2::zeros((n, c));
        for v in scores.iter_mut() {
            *v = rng.gen::<f64>();
        }
        let started = Instant::now();
        let plan = solve_entropic_ot(&scores, &cfg.ot)?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        let row = BenchRow {
            pixels: n,
            classes: c,
            iterations: plan.iterations,
            converged: plan.converged,
            violation: plan.violation,
            wall_ms,
        };
        println!(
            "{:>8} {:>6} {:>10} {:>10} {:>12.3e} {:>10.2}",
            row.pixels, row.classes, row.iterations, row.converged, row.violation, row.wall_ms
        );
        rows.push(row);
    }
    Ok((rows, 0))
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjacencyCmdReport {
    pub radius: usize,
    pub scenes: usize,
    pub with_groups: bool,
    pub adjacent_area_ratio: f64,
    pub inter_class_share: f64,
}

/// Adjacency statistics over the ground-truth masks of a scene directory.
/// When the directory carries a suite manifest, the planted super-class
/// partitions define the groups; otherwise every class is its own group.
pub fn cmd_adjacency(input_dir: &Path, radius: usize) -> Result<(AdjacencyCmdReport, i32)> {
    let manifest_path = input_dir.join(MANIFEST_FILE);
    let manifest: Option<SuiteManifest> = if manifest_path.exists() {
        let raw = fs::read_to_string(&manifest_path)?;
        serde_json::from_str(&raw).ok()
    } else {
        None
    };
    let groups_by_id: BTreeMap<String, ClassGroups> = manifest
        .map(|m| {
            m.scenes
                .into_iter()
                .map(|s| (s.id, ClassGroups::new(s.super_partition)))
                .collect()
        })
        .unwrap_or_default();

    let mut summary = AdjacencySummary { radius, ..AdjacencySummary::default() };
    let mut scenes = 0usize;
    for dir in list_scene_dirs(input_dir)? {
        let gt_path = dir.join(GT_FILE);
        if !gt_path.exists() {
            continue;
        }
        let gt = load_mask_png(&gt_path)?;
        let id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let report = adjacency_stats(&gt, groups_by_id.get(&id), radius);
        accumulate_adjacency(&mut summary, &report);
        scenes += 1;
    }
    let report = AdjacencyCmdReport {
        radius,
        scenes,
        with_groups: !groups_by_id.is_empty(),
        adjacent_area_ratio: summary.adjacent_area_ratio,
        inter_class_share: summary.inter_class_share,
    };
    println!(
        "{} scenes, radius {}: {:.1}% of area adjacent, {:.1}% of adjacent pixels inter-class{}",
        report.scenes,
        report.radius,
        100.0 * report.adjacent_area_ratio,
        100.0 * report.inter_class_share,
        if report.with_groups { " (groups from manifest)" } else { "" }
    );
    Ok((report, 0))
}
