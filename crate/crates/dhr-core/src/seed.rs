//! Seed initialization: OT-gated CAM seeds and recovery of classes the base
//! mask absorbed.
//!
//! CAMs carry foreground channels only; a background channel is attached
//! first. The gated and boundary-corrected seed is compared against the base
//! mask per class, and classes whose base area collapsed below a fraction of
//! their seed area are written back into the base labels.

use std::collections::BTreeSet;

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::ot::{f_ot_mask, OtConfig, OtOutcome};
use crate::refine::Refiner;
use crate::tensor::{argmax_labels, one_hot, LabelMask, RgbImage, ScoreStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgMode {
    /// Background score is 1 minus the strongest foreground score.
    OneMinusMax,
    /// Constant background score.
    Fixed,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SeedConfig {
    /// A class counts as vanished when its base area falls below this
    /// fraction of its seed area.
    pub vanish_ratio: f64,
    pub bg_mode: BgMode,
    pub bg_fixed_score: f64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        SeedConfig { vanish_ratio: 0.5, bg_mode: BgMode::OneMinusMax, bg_fixed_score: 0.4 }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.vanish_ratio > 0.0 && self.vanish_ratio <= 1.0) {
            return Err(Error::Domain(format!("vanish_ratio must be in (0, 1], got {}", self.vanish_ratio)));
        }
        if !(0.0..=1.0).contains(&self.bg_fixed_score) {
            return Err(Error::Domain(format!("bg_fixed_score must be in [0, 1], got {}", self.bg_fixed_score)));
        }
        Ok(())
    }
}

/// Prepends a background channel to foreground-only CAMs.
pub fn attach_background(cams: &ScoreStack, cfg: &SeedConfig) -> ScoreStack {
    let (fg, height, width) = cams.values().dim();
    let mut values = Array3::zeros((fg + 1, height, width));
    for r in 0..height {
        for c in 0..width {
            let mut max_fg: f64 = 0.0;
            for k in 0..fg {
                let s = cams.values()[(k, r, c)];
                values[(k + 1, r, c)] = s;
                max_fg = max_fg.max(s);
            }
            values[(0, r, c)] = match cfg.bg_mode {
                BgMode::OneMinusMax => (1.0 - max_fg).clamp(0.0, 1.0),
                BgMode::Fixed => cfg.bg_fixed_score,
            };
        }
    }
    ScoreStack::new(values).expect("background attach keeps scores in range")
}

/// OT-gated, boundary-corrected seed from background-attached CAMs.
///
/// Every labeled class must carry CAM mass; a labeled class with an all-zero
/// channel would silently drop out of the transport, so it is rejected as
/// degenerate up front.
pub fn compute_seed(
    cams_with_bg: &ScoreStack,
    image_labels: &BTreeSet<u8>,
    refiner: &Refiner,
    rgb: Option<&RgbImage>,
    ot_cfg: &OtConfig,
) -> Result<(ScoreStack, OtOutcome, bool)> {
    for &label in image_labels {
        let k = label as usize;
        if k >= cams_with_bg.classes() {
            return Err(Error::Domain(format!("image label {label} outside stack of {} classes", cams_with_bg.classes())));
        }
        let mass = cams_with_bg.values().index_axis(ndarray::Axis(0), k).sum();
        if mass <= 0.0 {
            return Err(Error::DegenerateInput(format!("labeled class {label} has all-zero CAM")));
        }
    }
    let (gated, outcome) = f_ot_mask(cams_with_bg, ot_cfg)?;
    let (seed, refine_fell_back) = refiner.refine(&gated, rgb)?;
    Ok((seed, outcome, refine_fell_back))
}

/// Classes from `image_labels` whose base-argmax area dropped below
/// `vanish_ratio` times their seed-argmax area. Background never vanishes.
pub fn detect_vanished(
    base: &ScoreStack,
    seed: &ScoreStack,
    image_labels: &BTreeSet<u8>,
    vanish_ratio: f64,
) -> BTreeSet<u8> {
    debug_assert_eq!(base.classes(), seed.classes());
    let classes = base.classes();
    let base_areas = argmax_labels(base).class_areas(classes);
    let seed_areas = argmax_labels(seed).class_areas(classes);
    let mut vanished = BTreeSet::new();
    for &label in image_labels {
        let k = label as usize;
        if k == 0 || k >= classes {
            continue;
        }
        let seed_area = seed_areas[k] as f64;
        if seed_area > 0.0 && (base_areas[k] as f64) < vanish_ratio * seed_area {
            vanished.insert(label);
        }
    }
    vanished
}

/// Hard-label fusion: base labels, with pixels whose seed argmax is a
/// vanished class overwritten by that class. Returns a one-hot stack.
pub fn merge_init(base: &ScoreStack, seed: &ScoreStack, vanished: &BTreeSet<u8>) -> Result<ScoreStack> {
    if base.classes() != seed.classes() || base.height() != seed.height() || base.width() != seed.width() {
        return Err(Error::ShapeMismatch("base and seed stacks differ in shape".into()));
    }
    let mut labels = argmax_labels(base);
    if !vanished.is_empty() {
        let seed_labels = argmax_labels(seed);
        let mut fused = labels.labels().clone();
        for r in 0..base.height() {
            for c in 0..base.width() {
                let s = seed_labels.get(r, c);
                if vanished.contains(&s) {
                    fused[(r, c)] = s;
                }
            }
        }
        labels = LabelMask::new(fused);
    }
    one_hot(&labels, base.classes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn labels(v: &[u8]) -> BTreeSet<u8> {
        v.iter().copied().collect()
    }

    #[test]
    fn background_is_one_when_foreground_silent() {
        let cams = ScoreStack::new(Array3::zeros((2, 1, 1))).unwrap();
        let out = attach_background(&cams, &SeedConfig::default());
        assert_eq!(out.classes(), 3);
        assert_eq!(out.values()[(0, 0, 0)], 1.0);
    }

    #[test]
    fn background_complements_max_foreground() {
        let mut v = Array3::zeros((2, 1, 1));
        v[(0, 0, 0)] = 0.8;
        v[(1, 0, 0)] = 0.3;
        let cams = ScoreStack::new(v).unwrap();
        let out = attach_background(&cams, &SeedConfig::default());
        assert!((out.values()[(0, 0, 0)] - 0.2).abs() < 1e-12);
        assert!((out.values()[(1, 0, 0)] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn fixed_background_is_constant() {
        let cams = ScoreStack::new(Array3::from_elem((1, 2, 2), 0.9)).unwrap();
        let cfg = SeedConfig { bg_mode: BgMode::Fixed, ..SeedConfig::default() };
        let out = attach_background(&cams, &cfg);
        for r in 0..2 {
            for c in 0..2 {
                assert_eq!(out.values()[(0, r, c)], 0.4);
            }
        }
    }

    #[test]
    fn crisp_single_class_seed_keeps_cam_argmax() {
        // One foreground class covering the left half with a crisp CAM.
        let mut v = Array3::zeros((1, 4, 4));
        for r in 0..4 {
            for c in 0..2 {
                v[(0, r, c)] = 0.95;
            }
        }
        let cams = ScoreStack::new(v).unwrap();
        let with_bg = attach_background(&cams, &SeedConfig::default());
        let (seed, outcome, _) =
            compute_seed(&with_bg, &labels(&[1]), &Refiner::Identity, None, &OtConfig::default()).unwrap();
        assert!(outcome.converged);
        assert_eq!(argmax_labels(&seed), argmax_labels(&with_bg));
    }

    #[test]
    fn all_zero_labeled_cam_is_degenerate() {
        let cams = ScoreStack::new(Array3::zeros((2, 2, 2))).unwrap();
        let with_bg = attach_background(&cams, &SeedConfig::default());
        let err = compute_seed(&with_bg, &labels(&[1, 2]), &Refiner::Identity, None, &OtConfig::default());
        assert!(matches!(err, Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn overlapping_blobs_get_disjoint_argmax_support() {
        // Two overlapping CAM blobs; after gating, each pixel's argmax picks
        // exactly one class, so the argmax supports are disjoint by
        // construction. Verify the overlap region splits rather than vanishes.
        let (h, w) = (8, 8);
        let mut v = Array3::zeros((2, h, w));
        for r in 0..h {
            for c in 0..6 {
                v[(0, r, c)] = 0.8 - 0.05 * c as f64;
            }
            for c in 2..8 {
                v[(1, r, c)] = 0.5 + 0.05 * c as f64;
            }
        }
        let cams = ScoreStack::new(v).unwrap();
        let with_bg = attach_background(&cams, &SeedConfig::default());
        let (seed, _, _) =
            compute_seed(&with_bg, &labels(&[1, 2]), &Refiner::Identity, None, &OtConfig::default()).unwrap();
        let seed_labels = argmax_labels(&seed);
        let areas = seed_labels.class_areas(3);
        assert!(areas[1] > 0);
        assert!(areas[2] > 0);
    }

    #[test]
    fn vanished_detection_thresholds() {
        // Build base/seed stacks with prescribed argmax areas for class 1 out
        // of a 10x10 grid: seed 100 px is impossible, so use proportions.
        let make = |area: usize| {
            let mut v = Array3::zeros((2, 10, 10));
            for i in 0..100 {
                let (r, c) = (i / 10, i % 10);
                if i < area {
                    v[(1, r, c)] = 1.0;
                } else {
                    v[(0, r, c)] = 1.0;
                }
            }
            ScoreStack::new(v).unwrap()
        };
        let seed = make(100);
        // Absent from base entirely -> vanished.
        assert_eq!(detect_vanished(&make(0), &seed, &labels(&[1]), 0.5), labels(&[1]));
        // 60 >= 0.5 * 100 -> not vanished.
        assert!(detect_vanished(&make(60), &seed, &labels(&[1]), 0.5).is_empty());
        // 40 < 50 -> vanished.
        assert_eq!(detect_vanished(&make(40), &seed, &labels(&[1]), 0.5), labels(&[1]));
    }

    #[test]
    fn seed_equal_to_base_never_vanishes() {
        let mut v = Array3::zeros((3, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                v[((r + c) % 3, r, c)] = 1.0;
            }
        }
        let s = ScoreStack::new(v).unwrap();
        for theta in [0.1, 0.5, 1.0] {
            assert!(detect_vanished(&s, &s, &labels(&[1, 2]), theta).is_empty());
        }
        let merged = merge_init(&s, &s, &BTreeSet::new()).unwrap();
        assert_eq!(argmax_labels(&merged), argmax_labels(&s));
    }

    #[test]
    fn empty_vanished_set_returns_base_one_hot() {
        let mut v = Array3::zeros((2, 2, 2));
        v[(0, 0, 0)] = 0.7;
        v[(1, 0, 1)] = 0.9;
        v[(0, 1, 0)] = 0.6;
        v[(1, 1, 1)] = 0.8;
        let base = ScoreStack::new(v).unwrap();
        let seed = ScoreStack::new(Array3::from_elem((2, 2, 2), 0.5)).unwrap();
        let merged = merge_init(&base, &seed, &BTreeSet::new()).unwrap();
        assert_eq!(merged, one_hot(&argmax_labels(&base), 2).unwrap());
    }

    #[test]
    fn vanished_class_region_is_relabeled() {
        // Base assigns everything to class 0; seed says class 1 owns the top
        // row. With class 1 vanished, exactly the top row flips.
        let base = one_hot(&LabelMask::filled(3, 3, 0), 2).unwrap();
        let mut v = Array3::zeros((2, 3, 3));
        for c in 0..3 {
            v[(1, 0, c)] = 1.0;
        }
        for r in 1..3 {
            for c in 0..3 {
                v[(0, r, c)] = 1.0;
            }
        }
        let seed = ScoreStack::new(v).unwrap();
        let merged = merge_init(&base, &seed, &labels(&[1])).unwrap();
        let out = argmax_labels(&merged);
        for c in 0..3 {
            assert_eq!(out.get(0, c), 1);
        }
        for r in 1..3 {
            for c in 0..3 {
                assert_eq!(out.get(r, c), 0);
            }
        }
        // Output is a valid one-hot stack.
        for r in 0..3 {
            for c in 0..3 {
                let mass: f64 = (0..2).map(|k| merged.values()[(k, r, c)]).sum();
                assert_eq!(mass, 1.0);
            }
        }
    }

    #[test]
    fn recovery_guarantee_property() {
        // Any vanished class with seed support gets argmax support in the
        // merged mask.
        let base = one_hot(&LabelMask::filled(4, 4, 0), 3).unwrap();
        let mut v = Array3::zeros((3, 4, 4));
        v[(1, 1, 1)] = 1.0;
        v[(2, 2, 2)] = 1.0;
        for r in 0..4 {
            for c in 0..4 {
                if (r, c) != (1, 1) && (r, c) != (2, 2) {
                    v[(0, r, c)] = 1.0;
                }
            }
        }
        let seed = ScoreStack::new(v).unwrap();
        let vanished = detect_vanished(&base, &seed, &labels(&[1, 2]), 0.5);
        assert_eq!(vanished, labels(&[1, 2]));
        let merged = merge_init(&base, &seed, &vanished).unwrap();
        let areas = argmax_labels(&merged).class_areas(3);
        assert!(areas[1] > 0);
        assert!(areas[2] > 0);
    }
}
