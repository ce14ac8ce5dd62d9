//! Deterministic synthetic scenes that reproduce the vanishing of small
//! classes adjacent to larger ones.
//!
//! A scene is a Voronoi partition of anchor regions (one per super-class,
//! plus background) with small disk-shaped minor classes painted inside
//! them. Unsupervised features share one prototype per super-class, so they
//! separate super-classes but not siblings; weakly-supervised features get a
//! distinct prototype per class. CAMs are blurred, noised indicators with
//! minor classes attenuated, and the degraded base mask absorbs minors into
//! their largest neighbor.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_png::{save_mask_png, save_rgb_png};
use crate::npy::save_npy;
use crate::scene::{
    LabelsJson, SceneBundle, BASE_MASK_FILE, CAM_FILE, GT_FILE, LABELS_FILE, RGB_FILE,
    USS_FEAT_FILE, WSS_FEAT_FILE,
};
use crate::tensor::{argmax_labels, one_hot, FeatureMap, LabelMask, RgbImage, ScoreStack};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Inclusive range of super-classes per scene.
    pub n_superclasses: (usize, usize),
    /// Inclusive range of classes per super-class. At least one super always
    /// carries a second class so every scene has a minor to lose.
    pub classes_per_super: (usize, usize),
    /// Target minor-class area fraction, sampled per minor.
    pub minor_area_frac: (f64, f64),
    pub feature_dim_us: usize,
    pub feature_dim_ws: usize,
    pub noise_sigma: f64,
    pub cam_blur_radius: usize,
    /// Probability that a minor class is absorbed in the degraded base mask.
    pub absorb_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            height: 64,
            width: 64,
            n_superclasses: (2, 3),
            classes_per_super: (1, 3),
            minor_area_frac: (0.03, 0.08),
            feature_dim_us: 16,
            feature_dim_ws: 16,
            noise_sigma: 0.15,
            cam_blur_radius: 2,
            absorb_prob: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::Domain("synth grid must be at least 8x8".into()));
        }
        let (s_lo, s_hi) = self.n_superclasses;
        if s_lo < 2 || s_hi < s_lo {
            return Err(Error::Domain("n_superclasses range must satisfy 2 <= lo <= hi".into()));
        }
        let (c_lo, c_hi) = self.classes_per_super;
        if c_lo < 1 || c_hi < c_lo {
            return Err(Error::Domain("classes_per_super range must satisfy 1 <= lo <= hi".into()));
        }
        let (f_lo, f_hi) = self.minor_area_frac;
        if !(f_lo > 0.0 && f_hi < 1.0 && f_lo <= f_hi) {
            return Err(Error::Domain("minor_area_frac must be a range inside (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.absorb_prob) {
            return Err(Error::Domain("absorb_prob must be in [0, 1]".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Domain("noise_sigma must be nonnegative".into()));
        }
        let max_fg = s_hi * c_hi;
        if self.feature_dim_us < s_hi + 1 {
            return Err(Error::Domain(format!(
                "feature_dim_us {} too small for {} super prototypes plus background",
                self.feature_dim_us,
                s_hi
            )));
        }
        if self.feature_dim_ws < s_hi + 1 + max_fg {
            return Err(Error::Domain(format!(
                "feature_dim_ws {} too small for {} class prototypes",
                self.feature_dim_ws,
                s_hi + 1 + max_fg
            )));
        }
        Ok(())
    }
}

/// A generated scene plus the planted structure the tests check against.
#[derive(Debug, Clone)]
pub struct SceneRecord {
    pub bundle: SceneBundle,
    /// Foreground classes grouped by super-class.
    pub super_partition: Vec<Vec<u8>>,
    pub minor_classes: Vec<u8>,
    /// Minors erased from the degraded base mask.
    pub absorbed_classes: Vec<u8>,
    /// Per class id (0 = background): the noiseless USS prototype.
    pub uss_prototypes: Vec<Vec<f64>>,
    /// Per class id (0 = background): the noiseless WSS prototype.
    pub wss_prototypes: Vec<Vec<f64>>,
    pub scene_seed: u64,
}

fn derive_seed(seed: u64, scene_index: u64, tag: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    feed(&seed.to_le_bytes());
    feed(&scene_index.to_le_bytes());
    feed(tag.as_bytes());
    h
}

fn field_rng(cfg: &SynthConfig, scene_index: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, scene_index, tag))
}

fn sample_range(rng: &mut ChaCha8Rng, range: (usize, usize)) -> usize {
    if range.0 == range.1 {
        range.0
    } else {
        rng.gen_range(range.0..=range.1)
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Placement {
    /// Disk inside the anchor region of a different super-class.
    Inter,
    /// Disk inside the own super's anchor region.
    Intra,
    /// Disk across the border between the own anchor and a foreign one.
    Straddle,
}

struct Layout {
    gt: LabelMask,
    super_partition: Vec<Vec<u8>>,
    minor_classes: Vec<u8>,
    /// Super index per foreground class id.
    super_of: Vec<usize>,
    num_classes: usize,
}

pub fn generate_scene(cfg: &SynthConfig, scene_index: u64) -> Result<SceneRecord> {
    cfg.validate()?;
    let mut layout_rng = field_rng(cfg, scene_index, "layout");
    let mut layout = None;
    for _ in 0..100 {
        if let Some(l) = try_layout(cfg, &mut layout_rng) {
            layout = Some(l);
            break;
        }
    }
    let layout = layout.ok_or_else(|| {
        Error::Generation(format!("no feasible layout for scene {scene_index} after 100 attempts"))
    })?;

    let (uss_protos, wss_protos) = build_prototypes(cfg, scene_index, &layout);
    let uss_features = prototype_field(
        cfg,
        scene_index,
        "uss_noise",
        &layout.gt,
        &uss_protos,
        cfg.feature_dim_us,
    );
    let wss_features = prototype_field(
        cfg,
        scene_index,
        "wss_noise",
        &layout.gt,
        &wss_protos,
        cfg.feature_dim_ws,
    );

    let cams = build_cams(cfg, scene_index, &layout);
    let rgb = build_rgb(cfg, scene_index, &layout);

    let mut degrade_rng = field_rng(cfg, scene_index, "degrade");
    let (base_mask, absorbed) = degrade_base_mask(&layout.gt, &layout.minor_classes, cfg, &mut degrade_rng);

    let image_labels: BTreeSet<u8> = (1..layout.num_classes as u8).collect();
    let bundle = SceneBundle {
        id: format!("scene_{scene_index:04}"),
        cams,
        base_mask,
        uss_features,
        wss_features,
        image_labels,
        num_classes: layout.num_classes,
        rgb: Some(rgb),
        ground_truth: Some(layout.gt.clone()),
    };

    Ok(SceneRecord {
        bundle,
        super_partition: layout.super_partition,
        minor_classes: layout.minor_classes,
        absorbed_classes: absorbed,
        uss_prototypes: uss_protos,
        wss_prototypes: wss_protos,
        scene_seed: derive_seed(cfg.seed, scene_index, "layout"),
    })
}

fn try_layout(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Option<Layout> {
    let (h, w) = (cfg.height, cfg.width);
    let n_super = sample_range(rng, cfg.n_superclasses);

    let mut classes_per_super: Vec<usize> =
        (0..n_super).map(|_| sample_range(rng, cfg.classes_per_super)).collect();
    if classes_per_super.iter().all(|&k| k == 1) {
        classes_per_super[0] = 2;
    }

    // Class ids: 1.. in super order; the first class of each super anchors a
    // Voronoi region, the rest are minors.
    let mut anchor_of_super = Vec::new();
    let mut minors: Vec<(u8, usize)> = Vec::new(); // (class, super index)
    let mut super_partition = Vec::new();
    let mut super_of = vec![usize::MAX]; // index 0 = background placeholder
    let mut next_class = 1u8;
    for (s, &k) in classes_per_super.iter().enumerate() {
        let mut members = Vec::new();
        for j in 0..k {
            let class = next_class;
            next_class += 1;
            members.push(class);
            super_of.push(s);
            if j == 0 {
                anchor_of_super.push(class);
            } else {
                minors.push((class, s));
            }
        }
        super_partition.push(members);
    }
    let num_classes = next_class as usize;

    // Voronoi sites: one per super anchor plus one for background.
    let n_sites = n_super + 1;
    let min_dist = (h.min(w) as f64) / (n_sites as f64 + 1.0);
    let mut sites: Vec<(f64, f64)> = Vec::new();
    for _ in 0..n_sites {
        let mut placed = false;
        for _ in 0..100 {
            let y = rng.gen_range(0.0..h as f64);
            let x = rng.gen_range(0.0..w as f64);
            if sites.iter().all(|&(sy, sx)| ((sy - y).powi(2) + (sx - x).powi(2)).sqrt() >= min_dist) {
                sites.push((y, x));
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }

    let mut gt = vec![0u8; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (i, &(sy, sx)) in sites.iter().enumerate() {
                let d = (sy - (r as f64 + 0.5)).powi(2) + (sx - (c as f64 + 0.5)).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            // Site n_super is background (label 0).
            gt[r * w + c] = if best < n_super { anchor_of_super[best] } else { 0 };
        }
    }

    // Minor placements: first inter, second intra, then alternating. A lone
    // minor straddles its own and a foreign anchor so both adjacency cases
    // exist in every scene.
    let placements: Vec<Placement> = if minors.len() == 1 {
        vec![Placement::Straddle]
    } else {
        (0..minors.len())
            .map(|i| if i % 2 == 0 { Placement::Inter } else { Placement::Intra })
            .collect()
    };

    for (&(class, own_super), &placement) in minors.iter().zip(placements.iter()) {
        let frac = rng.gen_range(cfg.minor_area_frac.0..=cfg.minor_area_frac.1);
        let radius = ((frac * (h * w) as f64) / std::f64::consts::PI).sqrt();
        let placed = match placement {
            Placement::Inter => {
                let hosts: Vec<usize> = (0..n_super).filter(|&s| s != own_super).collect();
                let host = hosts[rng.gen_range(0..hosts.len())];
                place_disk_inside(rng, &mut gt, h, w, anchor_of_super[host], class, radius)
            }
            Placement::Intra => {
                place_disk_inside(rng, &mut gt, h, w, anchor_of_super[own_super], class, radius)
            }
            Placement::Straddle => {
                let own_anchor = anchor_of_super[own_super];
                let foreign: Vec<u8> =
                    (0..n_super).filter(|&s| s != own_super).map(|s| anchor_of_super[s]).collect();
                place_disk_straddle(rng, &mut gt, h, w, own_anchor, &foreign, class, radius)
            }
        };
        if !placed {
            return None;
        }
    }

    let gt = LabelMask::from_raw(h, w, gt).ok()?;

    // Invariant checks: every class has area, the first minor touches a
    // different super, and some same-super adjacency exists.
    let areas = gt.class_areas(num_classes);
    if areas.iter().skip(1).any(|&a| a == 0) {
        return None;
    }
    let mut inter_ok = false;
    let mut intra_ok = false;
    for r in 0..h {
        for c in 0..w {
            let own = gt.get(r, c);
            if own == 0 {
                continue;
            }
            for (nr, nc) in neighbors8(r, c, h, w) {
                let other = gt.get(nr, nc);
                if other == 0 || other == own {
                    continue;
                }
                if super_of[own as usize] == super_of[other as usize] {
                    intra_ok = true;
                } else if minors.iter().any(|&(m, _)| m == own || m == other) {
                    inter_ok = true;
                }
            }
        }
    }
    if !inter_ok || !intra_ok {
        return None;
    }

    Some(Layout { gt, super_partition, minor_classes: minors.iter().map(|&(c, _)| c).collect(), super_of, num_classes })
}

fn neighbors8(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    const OFFS: [(isize, isize); 8] =
        [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFS.iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w {
            Some((nr as usize, nc as usize))
        } else {
            None
        }
    })
}

/// Paints a disk of `class` centered somewhere strictly inside the region
/// currently labeled `host`, leaving a one-pixel host ring around it.
fn place_disk_inside(
    rng: &mut ChaCha8Rng,
    gt: &mut [u8],
    h: usize,
    w: usize,
    host: u8,
    class: u8,
    radius: f64,
) -> bool {
    let margin = radius.ceil() as isize + 1;
    let host_pixels: Vec<(usize, usize)> = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| gt[r * w + c] == host)
        .collect();
    if host_pixels.is_empty() {
        return false;
    }
    'attempt: for _ in 0..200 {
        let &(cy, cx) = &host_pixels[rng.gen_range(0..host_pixels.len())];
        for dy in -margin..=margin {
            for dx in -margin..=margin {
                let ny = cy as isize + dy;
                let nx = cx as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue 'attempt;
                }
                if gt[ny as usize * w + nx as usize] != host {
                    continue 'attempt;
                }
            }
        }
        paint_disk(gt, h, w, cy, cx, radius, class, &[host]);
        return true;
    }
    false
}

/// Paints a disk centered on a border pixel between `own` and one of the
/// `foreign` anchors; only pixels of those two regions are overwritten.
#[allow(clippy::too_many_arguments)]
fn place_disk_straddle(
    rng: &mut ChaCha8Rng,
    gt: &mut [u8],
    h: usize,
    w: usize,
    own: u8,
    foreign: &[u8],
    class: u8,
    radius: f64,
) -> bool {
    let mut border: Vec<(usize, usize, u8)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if gt[r * w + c] != own {
                continue;
            }
            for (nr, nc) in neighbors8(r, c, h, w) {
                let other = gt[nr * w + nc];
                if foreign.contains(&other) {
                    border.push((r, c, other));
                    break;
                }
            }
        }
    }
    if border.is_empty() {
        return false;
    }
    for _ in 0..200 {
        let &(cy, cx, other) = &border[rng.gen_range(0..border.len())];
        // The disk may clip other regions near triple points; require that
        // most of its box lies in the two target regions so both sides keep
        // an adjacency, then paint only target pixels.
        let margin = radius.ceil() as isize;
        let mut inside = 0usize;
        let mut total = 0usize;
        for dy in -margin..=margin {
            for dx in -margin..=margin {
                let ny = cy as isize + dy;
                let nx = cx as isize + dx;
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                total += 1;
                let l = gt[ny as usize * w + nx as usize];
                if l == own || l == other {
                    inside += 1;
                }
            }
        }
        if total == 0 || (inside as f64) < 0.9 * total as f64 {
            continue;
        }
        paint_disk(gt, h, w, cy, cx, radius, class, &[own, other]);
        return true;
    }
    false
}

#[allow(clippy::too_many_arguments)]
fn paint_disk(gt: &mut [u8], h: usize, w: usize, cy: usize, cx: usize, radius: f64, class: u8, over: &[u8]) {
    let r2 = radius * radius;
    let margin = radius.ceil() as isize;
    for dy in -margin..=margin {
        for dx in -margin..=margin {
            if (dy * dy + dx * dx) as f64 > r2 {
                continue;
            }
            let ny = cy as isize + dy;
            let nx = cx as isize + dx;
            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                continue;
            }
            let cell = &mut gt[ny as usize * w + nx as usize];
            if over.contains(cell) {
                *cell = class;
            }
        }
    }
}

/// Unit-norm vector orthogonal to all of `basis`, drawn from the rng.
fn orthonormal_draw(rng: &mut ChaCha8Rng, dim: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for b in basis {
            let dot: f64 = v.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b.iter()) {
                *x -= dot * y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in &mut v {
                *x /= norm;
            }
            return v;
        }
    }
}

/// Builds per-class prototypes: USS prototypes are shared within a super,
/// WSS prototypes are the super base plus a 0.5-norm orthogonal offset, so
/// same-super USS similarity is near 1 and cross-super near 0.
fn build_prototypes(cfg: &SynthConfig, scene_index: u64, layout: &Layout) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n_super = layout.super_partition.len();
    let mut rng = field_rng(cfg, scene_index, "protos");

    // USS: orthonormal prototype per super plus one for background.
    let mut uss_basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..=n_super {
        let v = orthonormal_draw(&mut rng, cfg.feature_dim_us, &uss_basis);
        uss_basis.push(v);
    }
    let mut uss_protos = vec![uss_basis[n_super].clone()]; // class 0 = background
    for class in 1..layout.num_classes {
        let s = layout.super_of[class];
        uss_protos.push(uss_basis[s].clone());
    }

    // WSS: orthonormal base per super (and background), plus per-class
    // orthogonal offsets of norm 0.5 before renormalization.
    let mut wss_basis: Vec<Vec<f64>> = Vec::new();
    for _ in 0..=n_super {
        let v = orthonormal_draw(&mut rng, cfg.feature_dim_ws, &wss_basis);
        wss_basis.push(v);
    }
    let mut all = wss_basis.clone();
    let mut wss_protos = vec![wss_basis[n_super].clone()];
    for class in 1..layout.num_classes {
        let s = layout.super_of[class];
        let offset = orthonormal_draw(&mut rng, cfg.feature_dim_ws, &all);
        all.push(offset.clone());
        let mut proto: Vec<f64> =
            wss_basis[s].iter().zip(offset.iter()).map(|(b, o)| b + 0.5 * o).collect();
        let norm: f64 = proto.iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut proto {
            *x /= norm;
        }
        wss_protos.push(proto);
    }

    (uss_protos, wss_protos)
}

fn prototype_field(
    cfg: &SynthConfig,
    scene_index: u64,
    tag: &str,
    gt: &LabelMask,
    protos: &[Vec<f64>],
    dim: usize,
) -> FeatureMap {
    let (h, w) = (gt.height(), gt.width());
    let mut rng = field_rng(cfg, scene_index, tag);
    let mut values = Array3::zeros((dim, h, w));
    for r in 0..h {
        for c in 0..w {
            let proto = &protos[gt.get(r, c) as usize];
            for d in 0..dim {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                values[(d, r, c)] = proto[d] + cfg.noise_sigma * noise;
            }
        }
    }
    FeatureMap::new(values).expect("synthetic features are finite")
}

fn box_blur(plane: &mut [f64], h: usize, w: usize, radius: usize) {
    if radius == 0 {
        return;
    }
    let r = radius as isize;
    // Horizontal then vertical pass, normalizing by the in-bounds window.
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dx in -r..=r {
                let nx = x as isize + dx;
                if nx >= 0 && (nx as usize) < w {
                    sum += plane[y * w + nx as usize];
                    count += 1.0;
                }
            }
            tmp[y * w + x] = sum / count;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in -r..=r {
                let ny = y as isize + dy;
                if ny >= 0 && (ny as usize) < h {
                    sum += tmp[ny as usize * w + x];
                    count += 1.0;
                }
            }
            plane[y * w + x] = sum / count;
        }
    }
}

fn build_cams(cfg: &SynthConfig, scene_index: u64, layout: &Layout) -> ScoreStack {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = field_rng(cfg, scene_index, "cam_noise");
    let n_fg = layout.num_classes - 1;
    let mut values = Array3::zeros((n_fg, h, w));
    for class in 1..layout.num_classes {
        let attenuation = if layout.minor_classes.contains(&(class as u8)) { 0.5 } else { 1.0 };
        let mut plane: Vec<f64> = (0..h * w)
            .map(|i| if layout.gt.as_slice()[i] == class as u8 { 1.0 } else { 0.0 })
            .collect();
        box_blur(&mut plane, h, w, cfg.cam_blur_radius);
        for r in 0..h {
            for c in 0..w {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                let factor = (1.0 + cfg.noise_sigma * noise).max(0.0);
                values[(class - 1, r, c)] = (attenuation * plane[r * w + c] * factor).clamp(0.0, 1.0);
            }
        }
    }
    ScoreStack::new(values).expect("cams clamped to range")
}

fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (hue.fract() + 1.0).fract() * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Evenly spaced hues for foreground classes; background is dark gray.
pub fn class_color(class: u8, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.15, 0.15, 0.15];
    }
    let n_fg = (num_classes - 1).max(1) as f64;
    hsv_to_rgb((class as f64 - 1.0) / n_fg, 0.7, 0.85)
}

fn build_rgb(cfg: &SynthConfig, scene_index: u64, layout: &Layout) -> RgbImage {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = field_rng(cfg, scene_index, "rgb_noise");
    let sigma = cfg.noise_sigma * 0.1;
    let mut data = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let color = class_color(layout.gt.get(r, c), layout.num_classes);
            for &ch in &color {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal);
                let v = (ch + sigma * noise).clamp(0.0, 1.0);
                data.push((v * 255.0).round() as u8);
            }
        }
    }
    RgbImage::from_raw(h, w, data).expect("rgb buffer sized to grid")
}

/// Degrades the ground truth into a base mask: minors are absorbed into
/// their largest neighboring class with probability `absorb_prob`, then all
/// boundaries get one pixel of label dither (skipped when noise_sigma is 0).
/// Returns the one-hot base stack and the list of absorbed minors.
pub fn degrade_base_mask(
    gt: &LabelMask,
    minor_classes: &[u8],
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> (ScoreStack, Vec<u8>) {
    let (h, w) = (gt.height(), gt.width());
    let num_classes = gt
        .labels()
        .iter()
        .filter(|&&l| l != crate::tensor::IGNORE)
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(1);
    let areas = gt.class_areas(num_classes);
    let mut labels: Vec<u8> = gt.as_slice().to_vec();

    let mut absorbed = Vec::new();
    for &minor in minor_classes {
        if rng.gen::<f64>() >= cfg.absorb_prob {
            continue;
        }
        // Largest-area class adjacent to the minor's region.
        let mut neighbor_classes = BTreeSet::new();
        for r in 0..h {
            for c in 0..w {
                if gt.get(r, c) != minor {
                    continue;
                }
                for (nr, nc) in neighbors8(r, c, h, w) {
                    let other = gt.get(nr, nc);
                    if other != minor && other != crate::tensor::IGNORE {
                        neighbor_classes.insert(other);
                    }
                }
            }
        }
        let Some(&target) = neighbor_classes.iter().max_by_key(|&&c| (areas[c as usize], std::cmp::Reverse(c))) else {
            continue;
        };
        for (i, l) in labels.iter_mut().enumerate() {
            if gt.as_slice()[i] == minor {
                *l = target;
            }
        }
        absorbed.push(minor);
    }

    if cfg.noise_sigma > 0.0 {
        let snapshot = labels.clone();
        for r in 0..h {
            for c in 0..w {
                let own = snapshot[r * w + c];
                let boundary = neighbors8(r, c, h, w).any(|(nr, nc)| snapshot[nr * w + nc] != own);
                if !boundary {
                    continue;
                }
                let neigh: Vec<(usize, usize)> = neighbors8(r, c, h, w).collect();
                let (nr, nc) = neigh[rng.gen_range(0..neigh.len())];
                labels[r * w + c] = snapshot[nr * w + nc];
            }
        }
    }

    let mask = LabelMask::from_raw(h, w, labels).expect("degraded labels sized to grid");
    let stack = one_hot(&mask, num_classes).expect("degraded labels in range");
    (stack, absorbed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    pub scene_index: u64,
    pub scene_seed: u64,
    pub num_classes: usize,
    pub super_partition: Vec<Vec<u8>>,
    pub minor_classes: Vec<u8>,
    pub absorbed_classes: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub config: SynthConfig,
    pub scenes: Vec<SceneEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Generates `n` scenes into `out_dir` using the on-disk scene layout and
/// writes a manifest with the per-scene seeds and planted structure.
pub fn generate_suite(cfg: &SynthConfig, n: usize, out_dir: &Path) -> Result<SuiteManifest> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Domain("suite must contain at least one scene".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for idx in 0..n as u64 {
        let record = generate_scene(cfg, idx)?;
        write_scene(out_dir, &record)?;
        entries.push(SceneEntry {
            id: record.bundle.id.clone(),
            scene_index: idx,
            scene_seed: record.scene_seed,
            num_classes: record.bundle.num_classes,
            super_partition: record.super_partition.clone(),
            minor_classes: record.minor_classes.clone(),
            absorbed_classes: record.absorbed_classes.clone(),
        });
    }
    let manifest = SuiteManifest { config: cfg.clone(), scenes: entries };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Json { path: path.clone(), source: e })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn write_scene(out_dir: &Path, record: &SceneRecord) -> Result<()> {
    let bundle = &record.bundle;
    let dir = out_dir.join(&bundle.id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_npy(&dir.join(CAM_FILE), &bundle.cams.to_npy())?;
    save_mask_png(&dir.join(BASE_MASK_FILE), &argmax_labels(&bundle.base_mask))?;
    save_npy(&dir.join(USS_FEAT_FILE), &bundle.uss_features.to_npy())?;
    save_npy(&dir.join(WSS_FEAT_FILE), &bundle.wss_features.to_npy())?;
    let labels = LabelsJson {
        classes: bundle.image_labels.iter().copied().collect(),
        num_classes: bundle.num_classes,
    };
    let labels_path = dir.join(LABELS_FILE);
    let json = serde_json::to_string_pretty(&labels)
        .map_err(|e| Error::Json { path: labels_path.clone(), source: e })?;
    fs::write(&labels_path, json).map_err(|e| Error::io(&labels_path, e))?;
    if let Some(rgb) = &bundle.rgb {
        save_rgb_png(&dir.join(RGB_FILE), rgb)?;
    }
    if let Some(gt) = &bundle.ground_truth {
        save_mask_png(&dir.join(GT_FILE), gt)?;
    }
    Ok(())
}
