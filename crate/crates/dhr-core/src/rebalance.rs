//! Dual-feature hierarchical rebalancing.
//!
//! Class centroids are pooled from a feature map under the current hard
//! mask. Cosine similarity against those centroids yields per-class score
//! fields, which are OT-gated. Classes whose centroids correlate above tau
//! form groups; inside each multi-class group the class mass is
//! redistributed by a second, group-local transport over the other feature
//! field.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};
use crate::ot::{estimate_col_marginal, solve_with_marginals, OtConfig, OtOutcome};
use crate::tensor::{argmax_labels, FeatureMap, LabelMask, ScoreStack, IGNORE};

/// Per-class mean feature vectors. Classes without pixels are absent, not
/// zero-filled: a zero vector has no direction to compare against.
#[derive(Debug, Clone)]
pub struct ClassCentroids {
    classes: Vec<u8>,
    vectors: Vec<Vec<f64>>,
}

impl ClassCentroids {
    pub fn from_parts(classes: Vec<u8>, vectors: Vec<Vec<f64>>) -> Self {
        assert_eq!(classes.len(), vectors.len());
        ClassCentroids { classes, vectors }
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn vector(&self, class: u8) -> Option<&[f64]> {
        self.classes.iter().position(|&c| c == class).map(|i| self.vectors[i].as_slice())
    }

    /// Drops entries outside the given class set.
    pub fn retain(&self, keep: impl Fn(u8) -> bool) -> ClassCentroids {
        let mut classes = Vec::new();
        let mut vectors = Vec::new();
        for (c, v) in self.classes.iter().zip(self.vectors.iter()) {
            if keep(*c) {
                classes.push(*c);
                vectors.push(v.clone());
            }
        }
        ClassCentroids { classes, vectors }
    }
}

/// Disjoint groups of class indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassGroups {
    groups: Vec<Vec<u8>>,
}

impl ClassGroups {
    pub fn new(mut groups: Vec<Vec<u8>>) -> Self {
        for g in &mut groups {
            g.sort_unstable();
        }
        groups.sort();
        ClassGroups { groups }
    }

    pub fn groups(&self) -> &[Vec<u8>] {
        &self.groups
    }

    pub fn same_group(&self, a: u8, b: u8) -> bool {
        self.groups.iter().any(|g| g.contains(&a) && g.contains(&b))
    }

    pub fn group_of(&self, class: u8) -> Option<&[u8]> {
        self.groups.iter().find(|g| g.contains(&class)).map(|g| g.as_slice())
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RebalanceConfig {
    /// Centroid-correlation threshold for grouping.
    pub tau: f64,
    pub ot: OtConfig,
    /// Read the group indicator as a plain elementwise product instead of
    /// group-mass redistribution.
    pub literal_product_mode: bool,
}

impl Default for RebalanceConfig {
    fn default() -> Self {
        RebalanceConfig { tau: 0.8, ot: OtConfig::default(), literal_product_mode: false }
    }
}

impl RebalanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Domain(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        self.ot.validate()
    }
}

/// Mean feature vector per class under the mask. IGNORE pixels and empty
/// classes contribute nothing.
pub fn class_average_pool(features: &FeatureMap, mask: &LabelMask) -> Result<ClassCentroids> {
    if features.height() != mask.height() || features.width() != mask.width() {
        return Err(Error::ShapeMismatch(format!(
            "features {}x{} vs mask {}x{}; resample first",
            features.height(),
            features.width(),
            mask.height(),
            mask.width()
        )));
    }
    let dim = features.dim();
    let mut sums: std::collections::BTreeMap<u8, (Vec<f64>, usize)> = std::collections::BTreeMap::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let l = mask.get(r, c);
            if l == IGNORE {
                continue;
            }
            let entry = sums.entry(l).or_insert_with(|| (vec![0.0; dim], 0));
            for (d, acc) in entry.0.iter_mut().enumerate() {
                *acc += features.values()[(d, r, c)];
            }
            entry.1 += 1;
        }
    }
    let mut classes = Vec::with_capacity(sums.len());
    let mut vectors = Vec::with_capacity(sums.len());
    for (class, (sum, count)) in sums {
        classes.push(class);
        vectors.push(sum.into_iter().map(|s| s / count as f64).collect());
    }
    Ok(ClassCentroids { classes, vectors })
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na <= 0.0 || nb <= 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// ReLU cosine similarity of every pixel against every present centroid,
/// scattered into a stack of `num_classes` channels (absent classes stay 0).
pub fn similarity_scores(features: &FeatureMap, centroids: &ClassCentroids, num_classes: usize) -> Result<ScoreStack> {
    if centroids.is_empty() {
        return Err(Error::DegenerateInput("no centroids to compare against".into()));
    }
    if centroids.dim() != features.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs centroid dim {}",
            features.dim(),
            centroids.dim()
        )));
    }
    let (height, width) = (features.height(), features.width());
    let mut values = Array3::zeros((num_classes, height, width));
    let mut pixel = vec![0.0; features.dim()];
    for r in 0..height {
        for c in 0..width {
            for (d, p) in pixel.iter_mut().enumerate() {
                *p = features.values()[(d, r, c)];
            }
            for (k, class) in centroids.classes.iter().enumerate() {
                let sim = cosine(&pixel, &centroids.vectors[k]).clamp(0.0, 1.0);
                values[(*class as usize, r, c)] = sim;
            }
        }
    }
    ScoreStack::new(values)
}

/// Inter-class rebalancing: pool centroids from the init mask, score every
/// pixel against them, and OT-gate the result.
pub fn uss_rebalance(
    uss_features: &FeatureMap,
    m_init: &ScoreStack,
    cfg: &RebalanceConfig,
) -> Result<(ScoreStack, OtOutcome)> {
    let mask = argmax_labels(m_init);
    let centroids = class_average_pool(uss_features, &mask)?;
    let scores = similarity_scores(uss_features, &centroids, m_init.classes())?;
    crate::ot::f_ot_mask(&scores, &cfg.ot)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        UnionFind { parent: (0..len).collect() }
    }

    fn find(&mut self, x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        let mut cur = x;
        while self.parent[cur] != root {
            let next = self.parent[cur];
            self.parent[cur] = root;
            cur = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the centroid-correlation graph: edge (a, b) iff
/// cosine(V_a, V_b) > tau.
pub fn correlation_groups(centroids: &ClassCentroids, tau: f64) -> ClassGroups {
    let n = centroids.len();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        for j in (i + 1)..n {
            if cosine(&centroids.vectors[i], &centroids.vectors[j]) > tau {
                uf.union(i, j);
            }
        }
    }
    let mut by_root: std::collections::BTreeMap<usize, Vec<u8>> = std::collections::BTreeMap::new();
    for i in 0..n {
        let root = uf.find(i);
        by_root.entry(root).or_default().push(centroids.classes[i]);
    }
    ClassGroups::new(by_root.into_values().collect())
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct GroupOtOutcome {
    pub group: Vec<u8>,
    pub pixels: usize,
    pub outcome: OtOutcome,
    /// Group skipped entirely (no pixels, no mass, or no usable centroids).
    pub skipped: bool,
}

/// Intra-class rebalancing within centroid-correlation groups.
///
/// Default (group-mass) mode: for each group with two or more classes,
/// restrict to the pixels whose gated-USS argmax lies in the group, run a
/// group-local transport on WSS similarities, row-normalize it, and spread
/// each pixel's group mass over the group by that assignment. Channels
/// outside multi-class groups pass through unchanged.
///
/// Literal mode: one transport over all present classes; channels in
/// multi-class groups become Q ⊙ Ŝ^us, the rest pass through.
pub fn wss_rebalance(
    s_hat_us: &ScoreStack,
    wss_features: &FeatureMap,
    m_init: &ScoreStack,
    groups: &ClassGroups,
    cfg: &RebalanceConfig,
) -> Result<(ScoreStack, Vec<GroupOtOutcome>)> {
    let (_, height, width) = s_hat_us.values().dim();
    if wss_features.height() != height || wss_features.width() != width {
        return Err(Error::ShapeMismatch("wss features not aligned to score grid".into()));
    }
    let mask = argmax_labels(m_init);
    let centroids = class_average_pool(wss_features, &mask)?;

    if cfg.literal_product_mode {
        return wss_rebalance_literal(s_hat_us, wss_features, &centroids, groups, cfg);
    }

    let mut out = s_hat_us.values().clone();
    let mut outcomes = Vec::new();
    let us_labels = argmax_labels(s_hat_us);

    for group in groups.groups() {
        if group.len() < 2 {
            continue;
        }
        // Classes that still have a WSS centroid under the init mask.
        let usable: Vec<u8> = group.iter().copied().filter(|c| centroids.vector(*c).is_some()).collect();
        if usable.len() < 2 {
            outcomes.push(GroupOtOutcome {
                group: group.clone(),
                pixels: 0,
                outcome: OtOutcome { iterations: 0, violation: 0.0, converged: true, fell_back: false },
                skipped: true,
            });
            continue;
        }
        let member: BTreeSet<u8> = group.iter().copied().collect();
        let pixels: Vec<(usize, usize)> = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .filter(|&(r, c)| member.contains(&us_labels.get(r, c)))
            .collect();
        if pixels.is_empty() {
            outcomes.push(GroupOtOutcome {
                group: group.clone(),
                pixels: 0,
                outcome: OtOutcome { iterations: 0, violation: 0.0, converged: true, fell_back: false },
                skipped: true,
            });
            continue;
        }

        // WSS similarity submatrix over the group's pixels and classes.
        let n = pixels.len();
        let k = usable.len();
        let mut sub = Array2::zeros((n, k));
        let mut pixel = vec![0.0; wss_features.dim()];
        for (i, &(r, c)) in pixels.iter().enumerate() {
            for (d, p) in pixel.iter_mut().enumerate() {
                *p = wss_features.values()[(d, r, c)];
            }
            for (j, class) in usable.iter().enumerate() {
                let v = centroids.vector(*class).expect("usable classes have centroids");
                sub[(i, j)] = cosine(&pixel, v).clamp(0.0, 1.0);
            }
        }
        if sub.sum() <= 0.0 {
            outcomes.push(GroupOtOutcome {
                group: group.clone(),
                pixels: n,
                outcome: OtOutcome { iterations: 0, violation: 0.0, converged: true, fell_back: false },
                skipped: true,
            });
            continue;
        }

        let row_marginal = vec![1.0 / n as f64; n];
        let col_marginal =
            estimate_col_marginal(&sub, cfg.ot.col_marginal_mode, cfg.ot.col_floor / k as f64)?;
        let plan = solve_with_marginals(&sub, &row_marginal, &col_marginal, &cfg.ot)?;
        let outcome = OtOutcome {
            iterations: plan.iterations,
            violation: plan.violation,
            converged: plan.converged,
            fell_back: !plan.converged,
        };
        outcomes.push(GroupOtOutcome { group: group.clone(), pixels: n, outcome, skipped: false });
        if !plan.converged {
            continue; // keep the gated USS scores for this group
        }

        // Row-normalized within-group assignment times the pixel's group mass.
        for (i, &(r, c)) in pixels.iter().enumerate() {
            let group_mass: f64 = group.iter().map(|&g| s_hat_us.values()[(g as usize, r, c)]).sum();
            let row_sum: f64 = plan.values.row(i).sum();
            // Zero out all group channels first: classes dropped from
            // `usable` hand their share to the surviving ones.
            for &g in group {
                out[(g as usize, r, c)] = 0.0;
            }
            if row_sum > 0.0 {
                for (j, class) in usable.iter().enumerate() {
                    let assign = plan.values[(i, j)] / row_sum;
                    out[(*class as usize, r, c)] = (assign * group_mass).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok((ScoreStack::new(out)?, outcomes))
}

fn wss_rebalance_literal(
    s_hat_us: &ScoreStack,
    wss_features: &FeatureMap,
    centroids: &ClassCentroids,
    groups: &ClassGroups,
    cfg: &RebalanceConfig,
) -> Result<(ScoreStack, Vec<GroupOtOutcome>)> {
    let multi: BTreeSet<u8> = groups
        .groups()
        .iter()
        .filter(|g| g.len() >= 2)
        .flat_map(|g| g.iter().copied())
        .collect();
    if multi.is_empty() {
        return Ok((s_hat_us.clone(), Vec::new()));
    }
    let scores = similarity_scores(wss_features, centroids, s_hat_us.classes())?;
    let (height, width) = (s_hat_us.height(), s_hat_us.width());
    let n = height * width;
    let present = centroids.classes();
    let mut flat = Array2::zeros((n, present.len()));
    for (j, &class) in present.iter().enumerate() {
        let plane = scores.values().index_axis(Axis(0), class as usize);
        for r in 0..height {
            for c in 0..width {
                flat[(r * width + c, j)] = plane[(r, c)];
            }
        }
    }
    let row_marginal = vec![1.0 / n as f64; n];
    let col_marginal = estimate_col_marginal(
        &flat,
        cfg.ot.col_marginal_mode,
        cfg.ot.col_floor / present.len() as f64,
    )?;
    let plan = solve_with_marginals(&flat, &row_marginal, &col_marginal, &cfg.ot)?;
    let outcome = OtOutcome {
        iterations: plan.iterations,
        violation: plan.violation,
        converged: plan.converged,
        fell_back: !plan.converged,
    };
    let summary = GroupOtOutcome {
        group: multi.iter().copied().collect(),
        pixels: n,
        outcome,
        skipped: false,
    };
    if !plan.converged {
        return Ok((s_hat_us.clone(), vec![summary]));
    }
    let mut out = s_hat_us.values().clone();
    let scale = n as f64;
    for (j, &class) in present.iter().enumerate() {
        if !multi.contains(&class) {
            continue;
        }
        for r in 0..height {
            for c in 0..width {
                let q = plan.values[(r * width + c, j)] * scale;
                let cell = &mut out[(class as usize, r, c)];
                *cell = (q * *cell).clamp(0.0, 1.0);
            }
        }
    }
    Ok((ScoreStack::new(out)?, vec![summary]))
}
