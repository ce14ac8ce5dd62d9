//! Pluggable boundary correction.
//!
//! The non-trivial refiner iteratively averages each pixel's score vector
//! over a multi-dilation 8-neighborhood, weighting neighbors by color
//! affinity exp(-||rgb_p - rgb_q||^2 / (2 sigma^2)). Affinities are
//! normalized over the neighborhood, so per-pixel score mass is preserved.

use ndarray::Array3;

use crate::error::Result;
use crate::tensor::{RgbImage, ScoreStack};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PamrConfig {
    pub iterations: usize,
    pub dilations: Vec<usize>,
    /// Color bandwidth on [0, 1]-scaled channels.
    pub sigma_color: f64,
}

impl Default for PamrConfig {
    fn default() -> Self {
        PamrConfig { iterations: 10, dilations: vec![1, 2, 4, 8], sigma_color: 0.1 }
    }
}

/// Boundary-correction operator applied after seed initialization and after
/// the final rebalancing pass.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Refiner {
    Identity,
    Pamr(PamrConfig),
}

impl Default for Refiner {
    fn default() -> Self {
        Refiner::Pamr(PamrConfig::default())
    }
}

impl Refiner {
    /// Applies the refiner. Returns the refined stack and whether the call
    /// fell back to identity because the rgb image was missing.
    pub fn refine(&self, scores: &ScoreStack, rgb: Option<&RgbImage>) -> Result<(ScoreStack, bool)> {
        match self {
            Refiner::Identity => Ok((scores.clone(), false)),
            Refiner::Pamr(cfg) => match rgb {
                Some(rgb) => Ok((refine_pamr(scores, rgb, cfg)?, false)),
                None => Ok((scores.clone(), true)),
            },
        }
    }
}

const OFFSETS: [(isize, isize); 8] =
    [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

pub fn refine_pamr(scores: &ScoreStack, rgb: &RgbImage, cfg: &PamrConfig) -> Result<ScoreStack> {
    let (classes, height, width) = scores.values().dim();
    if rgb.height() != height || rgb.width() != width {
        return Err(crate::error::Error::ShapeMismatch(format!(
            "rgb {}x{} does not match scores {}x{}",
            rgb.height(),
            rgb.width(),
            height,
            width
        )));
    }
    if cfg.iterations == 0 {
        return Ok(scores.clone());
    }

    let colors: Vec<[f64; 3]> = (0..height * width)
        .map(|i| rgb.unit_color(i / width, i % width))
        .collect();
    let inv_two_sigma_sq = 1.0 / (2.0 * cfg.sigma_color * cfg.sigma_color);

    // Precompute normalized affinity weights per pixel; they do not change
    // across iterations.
    let mut neighbor_idx: Vec<Vec<u32>> = vec![Vec::new(); height * width];
    let mut neighbor_w: Vec<Vec<f64>> = vec![Vec::new(); height * width];
    for r in 0..height {
        for c in 0..width {
            let p = r * width + c;
            let cp = colors[p];
            let mut total = 0.0;
            for &d in &cfg.dilations {
                for &(dr, dc) in &OFFSETS {
                    let nr = r as isize + dr * d as isize;
                    let nc = c as isize + dc * d as isize;
                    if nr < 0 || nc < 0 || nr >= height as isize || nc >= width as isize {
                        continue;
                    }
                    let q = nr as usize * width + nc as usize;
                    let cq = colors[q];
                    let dist2 = (cp[0] - cq[0]).powi(2) + (cp[1] - cq[1]).powi(2) + (cp[2] - cq[2]).powi(2);
                    let w = (-dist2 * inv_two_sigma_sq).exp();
                    neighbor_idx[p].push(q as u32);
                    neighbor_w[p].push(w);
                    total += w;
                }
            }
            if total > 0.0 {
                for w in &mut neighbor_w[p] {
                    *w /= total;
                }
            }
        }
    }

    let mut current = scores.values().clone();
    let mut next = Array3::zeros((classes, height, width));
    for _ in 0..cfg.iterations {
        for k in 0..classes {
            for r in 0..height {
                for c in 0..width {
                    let p = r * width + c;
                    if neighbor_idx[p].is_empty() {
                        next[(k, r, c)] = current[(k, r, c)];
                        continue;
                    }
                    let mut acc = 0.0;
                    for (qi, &q) in neighbor_idx[p].iter().enumerate() {
                        let q = q as usize;
                        acc += neighbor_w[p][qi] * current[(k, q / width, q % width)];
                    }
                    next[(k, r, c)] = acc;
                }
            }
        }
        std::mem::swap(&mut current, &mut next);
    }

    ScoreStack::new(current.mapv(|v| v.clamp(0.0, 1.0)))
}
