//! Run configuration: a TOML file with every key overridable by a CLI flag;
//! flags win. `DHR_THREADS` overrides the worker count last.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dhr_core::ot::{ColMarginalMode, OtConfig};
use dhr_core::pipeline::DhrConfig;
use dhr_core::rebalance::RebalanceConfig;
use dhr_core::refine::{PamrConfig, Refiner};
use dhr_core::seed::{BgMode, SeedConfig};
use dhr_core::synth::SynthConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RebalanceSection {
    pub tau: f64,
    pub literal_product_mode: bool,
}

impl Default for RebalanceSection {
    fn default() -> Self {
        RebalanceSection { tau: 0.8, literal_product_mode: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RefinerSection {
    /// Final boundary correction: "pamr" or "identity".
    pub kind: String,
    /// Seed-stage boundary correction: "pamr" or "identity".
    pub seed_kind: String,
    pub iterations: usize,
    pub dilations: Vec<usize>,
    pub sigma_color: f64,
}

impl Default for RefinerSection {
    fn default() -> Self {
        let pamr = PamrConfig::default();
        RefinerSection {
            kind: "pamr".into(),
            seed_kind: "identity".into(),
            iterations: pamr.iterations,
            dilations: pamr.dilations,
            sigma_color: pamr.sigma_color,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct IoSection {
    /// 0 means "use all available cores".
    pub workers: usize,
}


/// Aggregate of every stage configuration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub ot: OtConfig,
    pub seed: SeedConfig,
    pub rebalance: RebalanceSection,
    pub refiner: RefinerSection,
    pub synth: SynthConfig,
    pub io: IoSection,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let cfg: PipelineConfig =
            toml::from_str(&raw).with_context(|| format!("parsing config file {}", path.display()))?;
        Ok(cfg)
    }

    fn refiner_of_kind(&self, kind: &str) -> Result<Refiner> {
        match kind {
            "identity" => Ok(Refiner::Identity),
            "pamr" => {
                if self.refiner.dilations.is_empty() {
                    bail!("pamr refiner requires at least one dilation");
                }
                Ok(Refiner::Pamr(PamrConfig {
                    iterations: self.refiner.iterations,
                    dilations: self.refiner.dilations.clone(),
                    sigma_color: self.refiner.sigma_color,
                }))
            }
            other => bail!("unknown refiner kind {other:?} (expected \"identity\" or \"pamr\")"),
        }
    }

    pub fn build_refiner(&self) -> Result<Refiner> {
        self.refiner_of_kind(&self.refiner.kind)
    }

    /// Stage configuration for the propagation pipeline.
    pub fn build_dhr(&self) -> Result<DhrConfig> {
        let cfg = DhrConfig {
            seed: self.seed,
            ot: self.ot,
            rebalance: RebalanceConfig {
                tau: self.rebalance.tau,
                ot: self.ot,
                literal_product_mode: self.rebalance.literal_product_mode,
            },
            refiner: self.refiner_of_kind(&self.refiner.kind)?,
            seed_refiner: self.refiner_of_kind(&self.refiner.seed_kind)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Worker count after applying the DHR_THREADS override.
    pub fn resolve_workers(&self) -> Result<usize> {
        let mut workers = self.io.workers;
        if let Ok(env) = std::env::var("DHR_THREADS") {
            workers = env
                .trim()
                .parse::<usize>()
                .with_context(|| format!("DHR_THREADS must be a positive integer, got {env:?}"))?;
        }
        if workers == 0 {
            workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
        }
        if workers < 1 {
            bail!("worker count must be >= 1");
        }
        Ok(workers)
    }
}

/// Flag-level overrides; `None` keeps the config-file value.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub lambda: Option<f64>,
    pub ot_tol: Option<f64>,
    pub ot_max_iter: Option<usize>,
    pub col_marginal: Option<String>,
    pub col_floor: Option<f64>,
    pub raw_plan: bool,
    pub theta_v: Option<f64>,
    pub bg_mode: Option<String>,
    pub bg_score: Option<f64>,
    pub tau: Option<f64>,
    pub literal_product: bool,
    pub refiner: Option<String>,
    pub seed_refiner: Option<String>,
    pub pamr_iters: Option<usize>,
    pub pamr_dilations: Option<String>,
    pub pamr_sigma: Option<f64>,
    pub workers: Option<usize>,
    pub synth_seed: Option<u64>,
    pub grid: Option<String>,
    pub n_super: Option<String>,
    pub classes_per_super: Option<String>,
    pub minor_area_frac: Option<String>,
    pub noise_sigma: Option<f64>,
    pub cam_blur: Option<usize>,
    pub absorb_prob: Option<f64>,
    pub feature_dim_us: Option<usize>,
    pub feature_dim_ws: Option<usize>,
}

fn parse_usize_range(raw: &str) -> Result<(usize, usize)> {
    let (lo, hi) = raw.split_once('-').unwrap_or((raw, raw));
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

fn parse_f64_range(raw: &str) -> Result<(f64, f64)> {
    let (lo, hi) = raw.split_once('-').unwrap_or((raw, raw));
    Ok((lo.trim().parse()?, hi.trim().parse()?))
}

pub fn parse_grid(raw: &str) -> Result<(usize, usize)> {
    let (h, w) = raw
        .split_once('x')
        .with_context(|| format!("grid must look like 64x64, got {raw:?}"))?;
    Ok((h.trim().parse()?, w.trim().parse()?))
}

pub fn apply_overrides(cfg: &mut PipelineConfig, ov: &Overrides) -> Result<()> {
    if let Some(v) = ov.lambda {
        cfg.ot.lambda = v;
    }
    if let Some(v) = ov.ot_tol {
        cfg.ot.tol = v;
    }
    if let Some(v) = ov.ot_max_iter {
        cfg.ot.max_iter = v;
    }
    if let Some(mode) = &ov.col_marginal {
        cfg.ot.col_marginal_mode = match mode.as_str() {
            "mass_proportional" => ColMarginalMode::MassProportional,
            "uniform" => ColMarginalMode::Uniform,
            other => bail!("unknown column-marginal mode {other:?}"),
        };
    }
    if let Some(v) = ov.col_floor {
        cfg.ot.col_floor = v;
    }
    if ov.raw_plan {
        cfg.ot.scale_rows = false;
    }
    if let Some(v) = ov.theta_v {
        cfg.seed.vanish_ratio = v;
    }
    if let Some(mode) = &ov.bg_mode {
        cfg.seed.bg_mode = match mode.as_str() {
            "one_minus_max" => BgMode::OneMinusMax,
            "fixed" => BgMode::Fixed,
            other => bail!("unknown background mode {other:?}"),
        };
    }
    if let Some(v) = ov.bg_score {
        cfg.seed.bg_fixed_score = v;
    }
    if let Some(v) = ov.tau {
        cfg.rebalance.tau = v;
    }
    if ov.literal_product {
        cfg.rebalance.literal_product_mode = true;
    }
    if let Some(kind) = &ov.refiner {
        cfg.refiner.kind = kind.clone();
    }
    if let Some(kind) = &ov.seed_refiner {
        cfg.refiner.seed_kind = kind.clone();
    }
    if let Some(v) = ov.pamr_iters {
        cfg.refiner.iterations = v;
    }
    if let Some(raw) = &ov.pamr_dilations {
        cfg.refiner.dilations = raw
            .split(',')
            .map(|p| p.trim().parse::<usize>().map_err(Into::into))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(v) = ov.pamr_sigma {
        cfg.refiner.sigma_color = v;
    }
    if let Some(v) = ov.workers {
        cfg.io.workers = v;
    }
    if let Some(v) = ov.synth_seed {
        cfg.synth.seed = v;
    }
    if let Some(raw) = &ov.grid {
        let (h, w) = parse_grid(raw)?;
        cfg.synth.height = h;
        cfg.synth.width = w;
    }
    if let Some(raw) = &ov.n_super {
        cfg.synth.n_superclasses = parse_usize_range(raw)?;
    }
    if let Some(raw) = &ov.classes_per_super {
        cfg.synth.classes_per_super = parse_usize_range(raw)?;
    }
    if let Some(raw) = &ov.minor_area_frac {
        cfg.synth.minor_area_frac = parse_f64_range(raw)?;
    }
    if let Some(v) = ov.noise_sigma {
        cfg.synth.noise_sigma = v;
    }
    if let Some(v) = ov.cam_blur {
        cfg.synth.cam_blur_radius = v;
    }
    if let Some(v) = ov.absorb_prob {
        cfg.synth.absorb_prob = v;
    }
    if let Some(v) = ov.feature_dim_us {
        cfg.synth.feature_dim_us = v;
    }
    if let Some(v) = ov.feature_dim_ws {
        cfg.synth.feature_dim_ws = v;
    }
    Ok(())
}
