//! Segmentation metrics, adjacency analysis, and forward-only loss formulas.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::rebalance::ClassGroups;
use crate::tensor::{LabelMask, ScoreStack, IGNORE};

/// Rows are ground truth, columns are predictions; IGNORE pixels excluded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { counts: Array2::zeros((classes, classes)) }
    }

    pub fn classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[(gt, pred)]
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Merge for sharded evaluation: confusions add.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes(), other.classes());
        self.counts += &other.counts;
    }

    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.height() != gt.height() || pred.width() != gt.width() {
            return Err(Error::ShapeMismatch(format!(
                "pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        let classes = self.classes();
        for (p, g) in pred.labels().iter().zip(gt.labels().iter()) {
            if *g == IGNORE {
                continue;
            }
            if (*g as usize) >= classes || (*p as usize) >= classes {
                return Err(Error::Domain(format!("label out of range: gt {g} pred {p} for {classes} classes")));
            }
            self.counts[(*g as usize, *p as usize)] += 1;
        }
        Ok(())
    }
}

pub fn confusion(pred: &LabelMask, gt: &LabelMask, classes: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.accumulate(pred, gt)?;
    Ok(cm)
}

/// Per-class IoU plus the mean over classes that appear in either mask.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MiouReport {
    /// None for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn miou(cm: &ConfusionMatrix) -> MiouReport {
    let classes = cm.classes();
    let mut per_class = vec![None; classes];
    let mut sum = 0.0;
    let mut counted = 0usize;
    for (c, entry) in per_class.iter_mut().enumerate() {
        let tp = cm.count(c, c) as f64;
        let row: f64 = (0..classes).map(|p| cm.count(c, p) as f64).sum();
        let col: f64 = (0..classes).map(|g| cm.count(g, c) as f64).sum();
        let denom = row + col - tp;
        if denom > 0.0 {
            let iou = tp / denom;
            *entry = Some(iou);
            sum += iou;
            counted += 1;
        }
    }
    let mean = if counted > 0 { sum / counted as f64 } else { 0.0 };
    MiouReport { per_class, mean }
}

/// Fraction of pixels bordering a different class and how much of that
/// borders a different group.
#[derive(Debug, Clone, serde::Serialize)]
pub struct AdjacencyReport {
    pub adjacent_area_ratio: f64,
    pub inter_class_share: f64,
    pub total_pixels: u64,
    pub adjacent_pixels: u64,
    pub inter_class_pixels: u64,
    /// (class_a, class_b, pixels of a with a b-neighbor), ordered pairs.
    pub pair_counts: Vec<(u8, u8, u64)>,
}

/// Scans a Chebyshev neighborhood of radius `radius`. A pixel is adjacent if
/// any in-range pixel carries a different non-IGNORE label; it counts as
/// inter-class if some differing neighbor belongs to a different group
/// (all-singleton groups when none are supplied).
pub fn adjacency_stats(gt: &LabelMask, groups: Option<&ClassGroups>, radius: usize) -> AdjacencyReport {
    assert!(radius >= 1, "adjacency radius must be >= 1");
    let (height, width) = (gt.height(), gt.width());
    let r = radius as isize;
    let mut total = 0u64;
    let mut adjacent = 0u64;
    let mut inter = 0u64;
    let mut pair_counts: std::collections::BTreeMap<(u8, u8), u64> = std::collections::BTreeMap::new();

    for y in 0..height as isize {
        for x in 0..width as isize {
            let own = gt.get(y as usize, x as usize);
            if own == IGNORE {
                continue;
            }
            total += 1;
            let mut neighbor_classes: Vec<u8> = Vec::new();
            for dy in -r..=r {
                for dx in -r..=r {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let ny = y + dy;
                    let nx = x + dx;
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let other = gt.get(ny as usize, nx as usize);
                    if other != IGNORE && other != own && !neighbor_classes.contains(&other) {
                        neighbor_classes.push(other);
                    }
                }
            }
            if neighbor_classes.is_empty() {
                continue;
            }
            adjacent += 1;
            let mut crosses_group = false;
            for &other in &neighbor_classes {
                *pair_counts.entry((own, other)).or_insert(0) += 1;
                let same_group = match groups {
                    Some(g) => g.same_group(own, other),
                    None => false,
                };
                if !same_group {
                    crosses_group = true;
                }
            }
            if crosses_group {
                inter += 1;
            }
        }
    }

    AdjacencyReport {
        adjacent_area_ratio: if total > 0 { adjacent as f64 / total as f64 } else { 0.0 },
        inter_class_share: if adjacent > 0 { inter as f64 / adjacent as f64 } else { 0.0 },
        total_pixels: total,
        adjacent_pixels: adjacent,
        inter_class_pixels: inter,
        pair_counts: pair_counts.into_iter().map(|((a, b), n)| (a, b, n)).collect(),
    }
}

/// Sigmoid of the spatial mean of each CAM channel.
pub fn classify_from_cams(cams: &ScoreStack) -> Vec<f64> {
    let (classes, height, width) = cams.values().dim();
    let n = (height * width) as f64;
    (0..classes)
        .map(|k| {
            let mean = cams.values().index_axis(ndarray::Axis(0), k).sum() / n;
            sigmoid(mean)
        })
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Mean over classes of -[y log σ(x) + (1-y) log σ(-x)], logits in, 0/1
/// targets.
pub fn multilabel_soft_margin(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits vs {} targets",
            logits.len(),
            targets.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::DegenerateInput("empty logit vector".into()));
    }
    let mut sum = 0.0;
    for (&x, &y) in logits.iter().zip(targets.iter()) {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::NonFinite("soft margin input".into()));
        }
        // -log σ(x) = softplus(-x), -log σ(-x) = softplus(x).
        sum += y * softplus(-x) + (1.0 - y) * softplus(x);
    }
    Ok(sum / logits.len() as f64)
}

/// Mean of `-log pred[target]` over non-IGNORE pixels. Zero probabilities
/// are clamped at 1e-12; the number of clamped pixels is returned alongside.
pub fn pixel_cross_entropy(pred: &ScoreStack, target: &LabelMask) -> Result<(f64, usize)> {
    if pred.height() != target.height() || pred.width() != target.width() {
        return Err(Error::ShapeMismatch("prediction and target sizes differ".into()));
    }
    target.validate_labels(pred.classes())?;
    let mut sum = 0.0;
    let mut counted = 0usize;
    let mut clamped = 0usize;
    for r in 0..target.height() {
        for c in 0..target.width() {
            let l = target.get(r, c);
            if l == IGNORE {
                continue;
            }
            let mut p = pred.values()[(l as usize, r, c)];
            if p < 1e-12 {
                p = 1e-12;
                clamped += 1;
            }
            sum -= p.ln();
            counted += 1;
        }
    }
    if counted == 0 {
        return Ok((0.0, 0));
    }
    Ok((sum / counted as f64, clamped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn mask(h: usize, w: usize, data: Vec<u8>) -> LabelMask {
        LabelMask::from_raw(h, w, data).unwrap()
    }

    #[test]
    fn identical_masks_give_diagonal_confusion_and_miou_one() {
        let m = mask(2, 2, vec![0, 1, 1, 2]);
        let cm = confusion(&m, &m, 3).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                if g != p {
                    assert_eq!(cm.count(g, p), 0);
                }
            }
        }
        let report = miou(&cm);
        assert!((report.mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_ignore_gives_zero_matrix() {
        let gt = mask(2, 2, vec![IGNORE; 4]);
        let pred = mask(2, 2, vec![0, 1, 2, 0]);
        let cm = confusion(&pred, &gt, 3).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn out_of_range_label_is_domain_error() {
        let gt = mask(1, 1, vec![5]);
        let pred = mask(1, 1, vec![0]);
        assert!(matches!(confusion(&pred, &gt, 3), Err(Error::Domain(_))));
    }

    #[test]
    fn hand_counted_two_by_two_miou() {
        // gt=[[1,1],[0,0]], pred=[[1,0],[0,0]]: IoU1=1/2, IoU0=2/3, mean=7/12.
        let gt = mask(2, 2, vec![1, 1, 0, 0]);
        let pred = mask(2, 2, vec![1, 0, 0, 0]);
        let report = miou(&confusion(&pred, &gt, 2).unwrap());
        assert!((report.per_class[1].unwrap() - 0.5).abs() < 1e-15);
        assert!((report.per_class[0].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((report.mean - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_masks_give_zero_iou() {
        let gt = mask(1, 2, vec![0, 0]);
        let pred = mask(1, 2, vec![1, 1]);
        let report = miou(&confusion(&pred, &gt, 2).unwrap());
        assert_eq!(report.per_class[0], Some(0.0));
        assert_eq!(report.per_class[1], Some(0.0));
        assert_eq!(report.mean, 0.0);
    }

    #[test]
    fn absent_classes_excluded_from_mean() {
        let gt = mask(1, 2, vec![0, 0]);
        let pred = mask(1, 2, vec![0, 0]);
        let report = miou(&confusion(&pred, &gt, 5).unwrap());
        assert_eq!(report.per_class[3], None);
        assert!((report.mean - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_class_mask_has_no_adjacency() {
        let gt = mask(4, 4, vec![2; 16]);
        let report = adjacency_stats(&gt, None, 1);
        assert_eq!(report.adjacent_area_ratio, 0.0);
        assert_eq!(report.inter_class_share, 0.0);
        assert!(report.pair_counts.is_empty());
    }

    #[test]
    fn half_split_adjacency_ratio() {
        // 16x16 split into left/right halves: the two boundary columns are
        // adjacent at radius 1, i.e. 2/16 of the area.
        let mut data = vec![0u8; 256];
        for y in 0..16 {
            for x in 8..16 {
                data[y * 16 + x] = 1;
            }
        }
        let gt = mask(16, 16, data);
        let report = adjacency_stats(&gt, None, 1);
        assert!((report.adjacent_area_ratio - 2.0 / 16.0).abs() < 1e-15);
        assert!((report.inter_class_share - 1.0).abs() < 1e-15);
    }

    #[test]
    fn same_group_neighbors_are_not_inter_class() {
        let mut data = vec![0u8; 16];
        data[8..16].fill(1);
        let gt = mask(4, 4, data);
        let groups = ClassGroups::new(vec![vec![0, 1]]);
        let report = adjacency_stats(&gt, Some(&groups), 1);
        assert!(report.adjacent_area_ratio > 0.0);
        assert_eq!(report.inter_class_share, 0.0);
    }

    #[test]
    fn classify_zero_channel_is_half() {
        let cams = ScoreStack::new(Array3::zeros((2, 3, 3))).unwrap();
        let probs = classify_from_cams(&cams);
        assert!((probs[0] - 0.5).abs() < 1e-15);
        assert!((probs[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn classify_constant_channel_closed_form() {
        // Mean 1.0 -> sigmoid(1.0).
        let cams = ScoreStack::new(Array3::from_elem((1, 2, 2), 1.0)).unwrap();
        let probs = classify_from_cams(&cams);
        assert!((probs[0] - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn classify_is_monotone_in_cam_values() {
        let mut low = Array3::from_elem((1, 2, 2), 0.3);
        let high = {
            let mut h = low.clone();
            h[(0, 1, 1)] = 0.9;
            h
        };
        low[(0, 1, 1)] = 0.3;
        let p_low = classify_from_cams(&ScoreStack::new(low).unwrap());
        let p_high = classify_from_cams(&ScoreStack::new(high).unwrap());
        assert!(p_high[0] >= p_low[0]);
    }

    #[test]
    fn soft_margin_saturates_for_large_logits() {
        let loss = multilabel_soft_margin(&[20.0], &[1.0]).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn soft_margin_zero_logits_is_log_two() {
        let loss = multilabel_soft_margin(&[0.0, 0.0, 0.0], &[1.0, 0.0, 1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn soft_margin_matches_direct_formula() {
        let logits = [0.7, -1.3, 2.1, 0.05];
        let targets = [1.0, 0.0, 0.0, 1.0];
        let loss = multilabel_soft_margin(&logits, &targets).unwrap();
        let mut direct = 0.0;
        for (&x, &y) in logits.iter().zip(targets.iter()) {
            let sx = 1.0 / (1.0 + (-x).exp());
            let snx = 1.0 / (1.0 + x.exp());
            direct += -(y * sx.ln() + (1.0 - y) * snx.ln());
        }
        direct /= logits.len() as f64;
        assert!((loss - direct).abs() < 1e-12);
    }

    #[test]
    fn soft_margin_rejects_nan() {
        assert!(multilabel_soft_margin(&[f64::NAN], &[1.0]).is_err());
    }

    #[test]
    fn cross_entropy_one_hot_correct_is_zero() {
        let target = mask(1, 2, vec![0, 1]);
        let pred = crate::tensor::one_hot(&target, 2).unwrap();
        let (loss, clamped) = pixel_cross_entropy(&pred, &target).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_c() {
        for c in [2usize, 3, 5, 7] {
            let pred = ScoreStack::new(Array3::from_elem((c, 2, 2), 1.0 / c as f64)).unwrap();
            let target = mask(2, 2, vec![0, (c - 1) as u8, 1 % c as u8, 0]);
            let (loss, _) = pixel_cross_entropy(&pred, &target).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12, "C={c}");
        }
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let pred = ScoreStack::new(Array3::zeros((2, 1, 1))).unwrap();
        let target = mask(1, 1, vec![1]);
        let (loss, clamped) = pixel_cross_entropy(&pred, &target).unwrap();
        assert_eq!(clamped, 1);
        assert!((loss - (-(1e-12f64).ln())).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_nonnegative() {
        let pred = ScoreStack::new(Array3::from_elem((3, 2, 2), 1.0 / 3.0)).unwrap();
        let target = mask(2, 2, vec![0, 1, 2, IGNORE]);
        let (loss, _) = pixel_cross_entropy(&pred, &target).unwrap();
        assert!(loss >= 0.0);
    }
}
