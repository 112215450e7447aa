//! Monte-Carlo inference: average `T` stochastic passes into a probability
//! map and bound the defect by the intersection and union of the binarized
//! passes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::rough_core::{rough_from_samples, ProbabilityMask, RegionPartition, RoughLabel, DEFAULT_TOL};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    #[serde(rename = "T")]
    pub t: usize,
    pub binarize_threshold: f64,
    pub tol: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t: 16,
            binarize_threshold: 0.5,
            tol: DEFAULT_TOL,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 {
            return Err(Error::param("T must be at least 1"));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::param(format!(
                "binarize_threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        if !(0.0..0.5).contains(&self.tol) {
            return Err(Error::param(format!("tol must lie in [0, 0.5), got {}", self.tol)));
        }
        Ok(())
    }
}

/// `t` forward passes. They are stochastic iff the model's PSBM layers are
/// active at evaluation time.
pub fn passes<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    t: usize,
    rng: &mut Rng,
) -> Result<Vec<ProbabilityMask<S>>> {
    let stochastic = model.spec().psbm.active_in_eval;
    (0..t).map(|_| model.forward(image, stochastic, rng)).collect()
}

/// Pixelwise mean of equally shaped masks.
pub fn mean_of<S: Scalar>(samples: &[ProbabilityMask<S>]) -> Result<ProbabilityMask<S>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::param("need at least one sample"))?;
    let mut acc = vec![S::zero(); first.len()];
    for s in samples {
        if !s.same_shape(first) {
            return Err(Error::shape(
                format!("{}x{}", first.height(), first.width()),
                format!("{}x{}", s.height(), s.width()),
            ));
        }
        for (a, &v) in acc.iter_mut().zip(s.values()) {
            *a += v;
        }
    }
    let n = S::lit(samples.len() as f64);
    acc.iter_mut().for_each(|a| *a /= n);
    ProbabilityMask::from_clamped(first.height(), first.width(), acc)
}

/// Segmentation probability: mean of `cfg.t` passes.
pub fn mc_probability<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    cfg: &InferenceConfig,
    rng: &mut Rng,
) -> Result<ProbabilityMask<S>> {
    cfg.validate()?;
    mean_of(&passes(model, image, cfg.t, rng)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoughInference<S> {
    pub probability: ProbabilityMask<S>,
    pub rough: RoughLabel,
    pub partition: RegionPartition,
}

/// Rough bounds and probability from the same set of samples.
pub fn rough_from_passes<S: Scalar>(
    samples: &[ProbabilityMask<S>],
    threshold: f64,
) -> Result<RoughInference<S>> {
    let cut = S::lit(threshold);
    let binary: Vec<_> = samples.iter().map(|s| s.threshold(cut)).collect();
    let rough = rough_from_samples(&binary)?;
    Ok(RoughInference {
        probability: mean_of(samples)?,
        partition: rough.partition(),
        rough,
    })
}

pub fn infer_rough<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    cfg: &InferenceConfig,
    rng: &mut Rng,
) -> Result<RoughInference<S>> {
    cfg.validate()?;
    if cfg.t < 2 {
        return Err(Error::param("rough inference needs T >= 2"));
    }
    rough_from_passes(&passes(model, image, cfg.t, rng)?, cfg.binarize_threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    #[serde(rename = "T")]
    pub t: usize,
    pub param_count: usize,
    pub per_image_ms: Vec<f64>,
    pub mean_ms: f64,
}

/// Wall time of [`infer_rough`] per image.
pub fn timing_report<S: Scalar>(
    model: &Model<S>,
    images: &[Tensor<S>],
    cfg: &InferenceConfig,
    rng: &mut Rng,
) -> Result<TimingReport> {
    if images.is_empty() {
        return Err(Error::param("timing needs at least one image"));
    }
    let mut per_image_ms = Vec::with_capacity(images.len());
    for image in images {
        let start = Instant::now();
        infer_rough(model, image, cfg, rng)?;
        per_image_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    let mean_ms = per_image_ms.iter().sum::<f64>() / per_image_ms.len() as f64;
    Ok(TimingReport {
        t: cfg.t,
        param_count: model.param_count(),
        per_image_ms,
        mean_ms,
    })
}
