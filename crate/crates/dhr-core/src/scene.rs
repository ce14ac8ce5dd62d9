//! One image's complete input record and the on-disk scene layout.
//!
//! Directory contract, one directory per scene id:
//!
//! ```text
//! <scenes>/<id>/cam.npy        float32, (C_fg, H, W); channel i is class i+1
//! <scenes>/<id>/base_mask.png  uint8 labels, background 0
//! <scenes>/<id>/uss_feat.npy   float32, (D_us, h_f, w_f)
//! <scenes>/<id>/wss_feat.npy   float32, (D_ws, h_f, w_f)
//! <scenes>/<id>/labels.json    {"classes": [ints], "num_classes": int}
//! <scenes>/<id>/rgb.png        optional 8-bit RGB
//! <scenes>/<id>/gt.png         optional ground truth
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_png::{load_mask_png, load_rgb_png};
use crate::npy::load_npy;
use crate::tensor::{FeatureMap, LabelMask, RgbImage, ScoreStack};

pub const CAM_FILE: &str = "cam.npy";
pub const BASE_MASK_FILE: &str = "base_mask.png";
pub const USS_FEAT_FILE: &str = "uss_feat.npy";
pub const WSS_FEAT_FILE: &str = "wss_feat.npy";
pub const LABELS_FILE: &str = "labels.json";
pub const RGB_FILE: &str = "rgb.png";
pub const GT_FILE: &str = "gt.png";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelsJson {
    /// Present foreground class indices in mask label space (>= 1).
    pub classes: Vec<u8>,
    /// Total class count including background 0.
    pub num_classes: usize,
}

/// Everything the pipeline needs for one image.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub id: String,
    /// Foreground-only CAMs; channel i corresponds to class i + 1.
    pub cams: ScoreStack,
    /// Base mask as a one-hot stack over all classes.
    pub base_mask: ScoreStack,
    pub uss_features: FeatureMap,
    pub wss_features: FeatureMap,
    /// Present foreground classes (mask label space).
    pub image_labels: BTreeSet<u8>,
    pub num_classes: usize,
    pub rgb: Option<RgbImage>,
    pub ground_truth: Option<LabelMask>,
}

impl SceneBundle {
    pub fn height(&self) -> usize {
        self.cams.height()
    }

    pub fn width(&self) -> usize {
        self.cams.width()
    }
}

/// Loads one scene directory. CAM channels for classes missing from
/// labels.json are zeroed, which keeps the label/CAM consistency invariant
/// regardless of how the dump was produced.
pub fn load_scene(dir: &Path) -> Result<SceneBundle> {
    let id = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    load_scene_inner(dir, &id).map_err(|e| e.in_scene(&id))
}

fn load_scene_inner(dir: &Path, id: &str) -> Result<SceneBundle> {
    let labels_path = dir.join(LABELS_FILE);
    let labels_raw = fs::read_to_string(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    let labels: LabelsJson =
        serde_json::from_str(&labels_raw).map_err(|e| Error::Json { path: labels_path.clone(), source: e })?;
    if labels.num_classes < 2 {
        return Err(Error::Domain(format!("num_classes must be >= 2, got {}", labels.num_classes)));
    }
    if labels.num_classes > 255 {
        return Err(Error::Domain("num_classes above 255 collides with the IGNORE sentinel".into()));
    }
    for &c in &labels.classes {
        if c == 0 || (c as usize) >= labels.num_classes {
            return Err(Error::Domain(format!("image label {c} outside 1..{}", labels.num_classes)));
        }
    }
    let image_labels: BTreeSet<u8> = labels.classes.iter().copied().collect();

    let mut cams = ScoreStack::from_npy(&load_npy(&dir.join(CAM_FILE))?)?;
    if cams.classes() != labels.num_classes - 1 {
        return Err(Error::ShapeMismatch(format!(
            "cam.npy has {} channels, labels.json implies {}",
            cams.classes(),
            labels.num_classes - 1
        )));
    }
    // Zero channels for absent classes.
    {
        let mut values = cams.values().clone();
        for k in 0..values.dim().0 {
            let class = (k + 1) as u8;
            if !image_labels.contains(&class) {
                values.index_axis_mut(Axis(0), k).fill(0.0);
            }
        }
        cams = ScoreStack::new(values)?;
    }

    let base_labels = load_mask_png(&dir.join(BASE_MASK_FILE))?;
    if base_labels.height() != cams.height() || base_labels.width() != cams.width() {
        return Err(Error::ShapeMismatch("base_mask.png size differs from cam.npy".into()));
    }
    base_labels.validate_labels(labels.num_classes)?;
    let base_mask = crate::tensor::one_hot(&base_labels, labels.num_classes)?;

    let uss_features = FeatureMap::from_npy(&load_npy(&dir.join(USS_FEAT_FILE))?)?;
    let wss_features = FeatureMap::from_npy(&load_npy(&dir.join(WSS_FEAT_FILE))?)?;

    let rgb_path = dir.join(RGB_FILE);
    let rgb = if rgb_path.exists() {
        let img = load_rgb_png(&rgb_path)?;
        if img.height() != cams.height() || img.width() != cams.width() {
            return Err(Error::ShapeMismatch("rgb.png size differs from cam.npy".into()));
        }
        Some(img)
    } else {
        None
    };

    let gt_path = dir.join(GT_FILE);
    let ground_truth = if gt_path.exists() {
        let gt = load_mask_png(&gt_path)?;
        if gt.height() != cams.height() || gt.width() != cams.width() {
            return Err(Error::ShapeMismatch("gt.png size differs from cam.npy".into()));
        }
        gt.validate_labels(labels.num_classes)?;
        Some(gt)
    } else {
        None
    };

    Ok(SceneBundle {
        id: id.to_string(),
        cams,
        base_mask,
        uss_features,
        wss_features,
        image_labels,
        num_classes: labels.num_classes,
        rgb,
        ground_truth,
    })
}

/// Scene ids found directly under `root`, sorted for reproducible batch order.
pub fn list_scene_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        if path.is_dir() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}
