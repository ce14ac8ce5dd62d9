//! End-to-end propagation for one scene: seed initialization, inter-class
//! rebalancing, grouped intra-class rebalancing, boundary correction.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ot::{OtConfig, OtOutcome};
use crate::rebalance::{
    class_average_pool, correlation_groups, uss_rebalance, wss_rebalance, ClassGroups,
    GroupOtOutcome, RebalanceConfig,
};
use crate::refine::Refiner;
use crate::scene::SceneBundle;
use crate::seed::{attach_background, compute_seed, detect_vanished, merge_init, SeedConfig};
use crate::tensor::{argmax_labels, FeatureMap, ScoreStack};

/// Stage configuration for the whole propagation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DhrConfig {
    pub seed: SeedConfig,
    pub ot: OtConfig,
    pub rebalance: RebalanceConfig,
    /// Boundary correction for the final output.
    pub refiner: Refiner,
    /// Boundary correction inside seed computation. Defaults to identity:
    /// gated CAM evidence for a weak minor class is scattered and barely
    /// above the background score, and spatial averaging resolves that
    /// near-tie winner-take-all before the class can be detected as
    /// vanished. The feature-driven stages rebuild full-strength regions
    /// that the final refiner then preserves.
    pub seed_refiner: Refiner,
}

impl Default for DhrConfig {
    fn default() -> Self {
        DhrConfig {
            seed: SeedConfig::default(),
            ot: OtConfig::default(),
            rebalance: RebalanceConfig::default(),
            refiner: Refiner::default(),
            seed_refiner: Refiner::Identity,
        }
    }
}

impl DhrConfig {
    pub fn validate(&self) -> Result<()> {
        self.seed.validate()?;
        self.ot.validate()?;
        self.rebalance.validate()
    }

    /// Keeps the shared OT settings in sync when built from a single config
    /// source (the rebalance stage carries its own copy).
    pub fn with_ot(mut self, ot: OtConfig) -> Self {
        self.ot = ot;
        self.rebalance.ot = ot;
        self
    }
}

/// Per-scene audit record of every stage decision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub scene: String,
    pub vanished_classes: Vec<u8>,
    pub groups: Vec<Vec<u8>>,
    pub seed_ot: OtOutcome,
    pub uss_ot: OtOutcome,
    pub wss_groups: Vec<GroupOtOutcome>,
    /// Refiner fell back to identity because rgb was missing.
    pub refiner_fell_back: bool,
    /// Any OT stage fell back to ungated scores.
    pub ot_fallback: bool,
}

/// Output of one propagation with all intermediate stacks retained for
/// auditing and for metric comparisons.
#[derive(Debug, Clone)]
pub struct DhrOutput {
    pub m_seed: ScoreStack,
    pub m_init: ScoreStack,
    pub s_hat_us: ScoreStack,
    pub s_hat_dh: ScoreStack,
    pub m_dh: ScoreStack,
    pub provenance: Provenance,
}

/// Runs the full propagation over one scene.
pub fn dhr_propagate(scene: &SceneBundle, cfg: &DhrConfig) -> Result<DhrOutput> {
    dhr_propagate_inner(scene, cfg).map_err(|e| e.in_scene(&scene.id))
}

fn dhr_propagate_inner(scene: &SceneBundle, cfg: &DhrConfig) -> Result<DhrOutput> {
    cfg.validate()?;
    let rgb = scene.rgb.as_ref();

    // Step 1: OT-gated seed from CAMs, then recovery of vanished classes.
    let cams_bg = attach_background(&scene.cams, &cfg.seed);
    let (m_seed, seed_ot, refine_fell_back) =
        compute_seed(&cams_bg, &scene.image_labels, &cfg.seed_refiner, rgb, &cfg.ot)?;
    let vanished = detect_vanished(&scene.base_mask, &m_seed, &scene.image_labels, cfg.seed.vanish_ratio);
    let m_init = merge_init(&scene.base_mask, &m_seed, &vanished)?;

    // Features aligned to the mask grid.
    let uss = scene.uss_features.resampled(m_init.height(), m_init.width())?;
    let wss = scene.wss_features.resampled(m_init.height(), m_init.width())?;

    // Step 2: inter-class rebalancing on unsupervised features.
    let (s_hat_us, uss_ot) = uss_rebalance(&uss, &m_init, &cfg.rebalance)?;

    // Step 3: grouped intra-class rebalancing on weakly-supervised features.
    // Background stays out of multi-class groups.
    let groups = foreground_groups(&uss, &m_init, cfg.rebalance.tau)?;
    let (s_hat_dh, wss_outcomes) = wss_rebalance(&s_hat_us, &wss, &m_init, &groups, &cfg.rebalance)?;

    let (m_dh, refine_fell_back_final) = cfg.refiner.refine(&s_hat_dh, rgb)?;

    let ot_fallback = seed_ot.fell_back
        || uss_ot.fell_back
        || wss_outcomes.iter().any(|g| g.outcome.fell_back);
    let provenance = Provenance {
        scene: scene.id.clone(),
        vanished_classes: vanished.iter().copied().collect(),
        groups: groups.groups().to_vec(),
        seed_ot,
        uss_ot,
        wss_groups: wss_outcomes,
        refiner_fell_back: refine_fell_back || refine_fell_back_final,
        ot_fallback,
    };

    Ok(DhrOutput { m_seed, m_init, s_hat_us, s_hat_dh, m_dh, provenance })
}

/// Correlation groups over foreground centroids pooled from the init mask.
pub fn foreground_groups(uss: &FeatureMap, m_init: &ScoreStack, tau: f64) -> Result<ClassGroups> {
    let mask = argmax_labels(m_init);
    let centroids = class_average_pool(uss, &mask)?;
    let fg = centroids.retain(|c| c != 0);
    Ok(correlation_groups(&fg, tau))
}

/// Largest off-diagonal foreground-centroid similarity under the init mask;
/// any tau at or above it makes every group a singleton.
pub fn max_offdiag_centroid_similarity(uss: &FeatureMap, m_init: &ScoreStack) -> Result<f64> {
    let mask = argmax_labels(m_init);
    let centroids = class_average_pool(uss, &mask)?;
    let fg = centroids.retain(|c| c != 0);
    let classes = fg.classes();
    let mut max_sim: f64 = 0.0;
    for i in 0..classes.len() {
        for j in (i + 1)..classes.len() {
            let a = fg.vector(classes[i]).unwrap();
            let b = fg.vector(classes[j]).unwrap();
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            if na > 0.0 && nb > 0.0 {
                max_sim = max_sim.max(dot / (na.sqrt() * nb.sqrt()));
            }
        }
    }
    Ok(max_sim)
}
