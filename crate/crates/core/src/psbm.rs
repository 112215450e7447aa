//! Pluggable spatially-correlated Bayesian module (PSBM).
//!
//! A block-structured Bernoulli mask is shared by every channel of a feature
//! map. Seeds are drawn i.i.d. Bernoulli(γ) at each location of the centered
//! valid region (the `(H−L+1)×(W−L+1)` positions whose `L×L` block fits in
//! the map). Each seed zeroes the block around it, which is what a stride-1
//! max-pool of the seed map with `L/2` padding followed by `1 − ·` produces.
//! Surviving activations are rescaled by `total / kept`.
//!
//! `p` is the keep probability throughout; `1 − p` is the target dropped
//! fraction.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Redraws attempted before giving up on a mask that keeps nothing.
const MAX_REDRAWS: usize = 256;

/// How the per-location seed probability is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedRate {
    /// `γ = ((1−p)/L²)·(W²/(W−L+1)²)` as written, which ignores block overlap
    /// and therefore drops less than `1 − p` of the map.
    Formula,
    /// γ solved numerically so that the expected dropped fraction of the map
    /// is exactly `1 − p`, accounting for overlapping blocks.
    #[default]
    OverlapCorrected,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PsbmConfig {
    /// Keep probability `p` in `(0, 1]`.
    pub keep_prob: f64,
    /// Block side `L` in feature-map cells; odd.
    pub block_size: usize,
    /// Whether the module stays stochastic at inference time.
    pub active_in_eval: bool,
    pub seed_rate: SeedRate,
}

impl Default for PsbmConfig {
    fn default() -> Self {
        Self {
            keep_prob: 0.5,
            block_size: 3,
            active_in_eval: true,
            seed_rate: SeedRate::default(),
        }
    }
}

impl PsbmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::param(format!(
                "PSBM keep probability {} outside (0, 1]",
                self.keep_prob
            )));
        }
        if self.block_size == 0 || self.block_size % 2 == 0 {
            return Err(Error::param(format!(
                "PSBM block size {} must be odd and positive",
                self.block_size
            )));
        }
        Ok(())
    }

    pub fn drop_fraction(&self) -> f64 {
        1.0 - self.keep_prob
    }

    /// Seed probability for an `h×w` feature map under the configured rate.
    pub fn seed_probability(&self, h: usize, w: usize) -> Result<f64> {
        self.validate()?;
        match self.seed_rate {
            SeedRate::Formula => gamma_rect(self.keep_prob, self.block_size, h, w),
            SeedRate::OverlapCorrected => corrected_gamma(self.keep_prob, self.block_size, h, w),
        }
    }
}

/// Seed probability for a square `W×W` map: `((1−p)/L²)·(W²/(W−L+1)²)`,
/// clamped to 1.
pub fn gamma(p: f64, block: usize, width: usize) -> Result<f64> {
    gamma_rect(p, block, width, width)
}

/// [`gamma`] generalized to `h×w` maps: `((1−p)/L²)·(hw/((h−L+1)(w−L+1)))`.
pub fn gamma_rect(p: f64, block: usize, h: usize, w: usize) -> Result<f64> {
    check_rate_args(p, block, h, w)?;
    let l = block as f64;
    let valid = ((h - block + 1) * (w - block + 1)) as f64;
    let g = (1.0 - p) / (l * l) * ((h * w) as f64 / valid);
    Ok(g.min(1.0))
}

fn check_rate_args(p: f64, block: usize, h: usize, w: usize) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::param(format!("keep probability {p} outside (0, 1]")));
    }
    if block == 0 {
        return Err(Error::param("block size must be at least 1"));
    }
    if block > h || block > w {
        return Err(Error::param(format!(
            "block size {block} exceeds feature map {h}x{w}"
        )));
    }
    Ok(())
}

/// Number of valid seed positions along an axis of length `n` whose block
/// covers index `i`.
fn coverage_1d(n: usize, block: usize) -> Vec<usize> {
    let half = block / 2;
    let lo = half;
    let hi = n - half; // exclusive
    (0..n)
        .map(|i| {
            let a = i.saturating_sub(half).max(lo);
            let b = (i + half + 1).min(hi);
            b.saturating_sub(a)
        })
        .collect()
}

/// Expected dropped fraction of an `h×w` map when every valid location is
/// seeded with probability `gamma`.
pub fn expected_drop_fraction(gamma: f64, block: usize, h: usize, w: usize) -> f64 {
    let rows = coverage_1d(h, block);
    let cols = coverage_1d(w, block);
    let keep = 1.0 - gamma;
    let mut total = 0.0;
    for &r in &rows {
        for &c in &cols {
            total += 1.0 - keep.powi((r * c) as i32);
        }
    }
    total / (h * w) as f64
}

/// Seed probability whose expected dropped fraction equals `1 − p`.
pub fn corrected_gamma(p: f64, block: usize, h: usize, w: usize) -> Result<f64> {
    check_rate_args(p, block, h, w)?;
    let target = 1.0 - p;
    if target <= 0.0 {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if expected_drop_fraction(mid, block, h, w) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Sampled spatial keep-mask (1 = keep, 0 = dropped).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<u8>,
    pub kept_count: usize,
    pub total_count: usize,
}

impl BlockMask {
    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
            kept_count: height * width,
            total_count: height * width,
        }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn dropped_fraction(&self) -> f64 {
        1.0 - self.kept_count as f64 / self.total_count as f64
    }

    /// `total / kept`, the renormalization factor.
    pub fn scale(&self) -> f64 {
        self.total_count as f64 / self.kept_count as f64
    }
}

pub fn sample_block_mask(
    h: usize,
    w: usize,
    gamma: f64,
    block: usize,
    rng: &mut Rng,
) -> Result<BlockMask> {
    if block == 0 || block % 2 == 0 {
        return Err(Error::param(format!("block size {block} must be odd")));
    }
    if h == 0 || w == 0 || block > h || block > w {
        return Err(Error::param(format!(
            "block size {block} does not fit a {h}x{w} map"
        )));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::param(format!("seed probability {gamma} outside [0, 1]")));
    }
    let half = block / 2;
    let mut values = vec![1u8; h * w];
    for cy in half..h - half {
        for cx in half..w - half {
            if gamma > 0.0 && rng.random::<f64>() < gamma {
                for y in cy - half..=cy + half {
                    values[y * w + cx - half..=y * w + cx + half].fill(0);
                }
            }
        }
    }
    let kept_count = values.iter().map(|&v| v as usize).sum();
    Ok(BlockMask {
        height: h,
        width: w,
        values,
        kept_count,
        total_count: h * w,
    })
}

/// Multiplies every channel by `mask` and rescales by `total / kept`.
pub fn apply<S: Scalar>(features: &Tensor<S>, mask: &BlockMask) -> Result<Tensor<S>> {
    if (features.height, features.width) != (mask.height, mask.width) {
        return Err(Error::shape(
            format!("mask {}x{}", mask.height, mask.width),
            format!("features {}x{}", features.height, features.width),
        ));
    }
    if mask.kept_count == 0 {
        return Err(Error::ResampleRequired);
    }
    let scale = S::lit(mask.scale());
    let mut out = features.clone();
    for c in 0..out.channels {
        for (v, &m) in out.channel_mut(c).iter_mut().zip(&mask.values) {
            *v = if m == 1 { *v * scale } else { S::zero() };
        }
    }
    Ok(out)
}

/// Draws a mask for an `h×w` map, redrawing while it keeps no cell.
pub fn draw_mask(config: &PsbmConfig, h: usize, w: usize, rng: &mut Rng) -> Result<BlockMask> {
    let gamma = config.seed_probability(h, w)?;
    for _ in 0..MAX_REDRAWS {
        let mask = sample_block_mask(h, w, gamma, config.block_size, rng)?;
        if mask.kept_count > 0 {
            return Ok(mask);
        }
    }
    Err(Error::ResampleRequired)
}

/// Full PSBM layer. Returns the output and, when stochastic, the mask used.
pub fn forward_with_mask<S: Scalar>(
    features: &Tensor<S>,
    config: &PsbmConfig,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<(Tensor<S>, Option<BlockMask>)> {
    config.validate()?;
    if !stochastic {
        return Ok((features.clone(), None));
    }
    let mask = draw_mask(config, features.height, features.width, rng)?;
    let out = apply(features, &mask)?;
    Ok((out, Some(mask)))
}

pub fn psbm_forward<S: Scalar>(
    features: &Tensor<S>,
    config: &PsbmConfig,
    stochastic: bool,
    rng: &mut Rng,
) -> Result<Tensor<S>> {
    forward_with_mask(features, config, stochastic, rng).map(|(t, _)| t)
}

/// Aggregate statistics over many sampled masks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskStats {
    pub keep_prob: f64,
    pub block_size: usize,
    pub height: usize,
    pub width: usize,
    pub gamma: f64,
    pub draws: usize,
    pub mean_dropped_fraction: f64,
    pub expected_dropped_fraction: f64,
}

pub fn mask_stats(
    config: &PsbmConfig,
    h: usize,
    w: usize,
    draws: usize,
    rng: &mut Rng,
) -> Result<MaskStats> {
    let gamma = config.seed_probability(h, w)?;
    let mut dropped = 0.0;
    for _ in 0..draws {
        dropped += sample_block_mask(h, w, gamma, config.block_size, rng)?.dropped_fraction();
    }
    Ok(MaskStats {
        keep_prob: config.keep_prob,
        block_size: config.block_size,
        height: h,
        width: w,
        gamma,
        draws,
        mean_dropped_fraction: dropped / draws.max(1) as f64,
        expected_dropped_fraction: expected_drop_fraction(gamma, config.block_size, h, w),
    })
}
