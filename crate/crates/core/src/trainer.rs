//! Training with variance-based label correction.
//!
//! After the warm-up epochs each sample goes through `T_train` stochastic
//! passes without gradients. Their pixelwise variance, min-max normalized to
//! `σ̂`, turns the crisp noisy label `y` into a soft rough label
//!
//! ```text
//! lower = y·(1 − σ̂)      upper = min(1, y + σ̂)
//! ```
//!
//! and one further stochastic pass is trained against it with the rough
//! Tversky loss plus the L2 penalty.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mc_infer::{infer_rough, InferenceConfig};
use crate::metrics::{self, ImageMetrics};
use crate::model::{Checkpoint, Gradients, Model};
use crate::rng::{stream, Purpose, Rng};
use crate::rough_core::{BinaryMask, ProbabilityMask, SoftRoughLabel};
use crate::rough_loss::{add_l2_grad, l2_penalty, rough_tversky_grad, LossConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Linear decay per step: `lr · max(0, 1 − lr_decay · step)`.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stochastic passes used for label correction.
    #[serde(rename = "T_train")]
    pub t_train: usize,
    /// Epochs trained on the crisp labels before correction starts.
    pub warmup_epochs: usize,
    pub loss: LossConfig,
    pub optimizer: Optimizer,
    /// Samples scored for the per-epoch metric log.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            lr_decay: 1e-4,
            batch_size: 4,
            epochs: 10,
            t_train: 8,
            warmup_epochs: 2,
            loss: LossConfig::default(),
            optimizer: Optimizer::Adam,
            eval_samples: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_train < 2 {
            return Err(Error::param("T_train must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if !(self.lr_decay >= 0.0) {
            return Err(Error::param("lr_decay must be non-negative"));
        }
        self.loss.validate()
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_decay * step as f64).max(0.0)
    }
}

/// One training pair: image and its noisy crisp label.
#[derive(Clone, Debug)]
pub struct TrainSample<S> {
    pub image: Tensor<S>,
    pub label: BinaryMask,
}

/// Pixelwise mean and variance of `t` stochastic passes.
pub fn mc_stats<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    t: usize,
    rng: &mut Rng,
) -> Result<(ProbabilityMask<S>, Vec<S>)> {
    if t < 2 {
        return Err(Error::param("mc_stats needs T >= 2"));
    }
    let samples = (0..t)
        .map(|_| model.forward(image, true, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(stats_of(&samples))
}

fn stats_of<S: Scalar>(samples: &[ProbabilityMask<S>]) -> (ProbabilityMask<S>, Vec<S>) {
    let mean = crate::mc_infer::mean_of(samples).expect("non-empty, same shape");
    let n = S::lit(samples.len() as f64);
    let mut var = vec![S::zero(); mean.len()];
    for s in samples {
        for ((v, &x), &m) in var.iter_mut().zip(s.values()).zip(mean.values()) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Min-max normalization to `[0, 1]`; a constant raster maps to zeros.
pub fn normalize_var<S: Scalar>(variance: &[S]) -> Vec<S> {
    let (lo, hi) = variance
        .iter()
        .fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if variance.is_empty() || hi <= lo {
        return vec![S::zero(); variance.len()];
    }
    let span = hi - lo;
    variance
        .iter()
        .map(|&v| ((v - lo) / span).max(S::zero()).min(S::one()))
        .collect()
}

pub fn correct_label<S: Scalar>(y: &BinaryMask, sigma_hat: &[S]) -> Result<SoftRoughLabel<S>> {
    if sigma_hat.len() != y.len() {
        return Err(Error::shape(
            format!("{} pixels", y.len()),
            format!("{} pixels", sigma_hat.len()),
        ));
    }
    if let Some(i) = sigma_hat.iter().position(|s| !(*s >= S::zero() && *s <= S::one())) {
        return Err(Error::param(format!("sigma_hat outside [0, 1] at pixel {i}")));
    }
    let (lower, upper): (Vec<S>, Vec<S>) = y
        .values()
        .iter()
        .zip(sigma_hat)
        .map(|(&yv, &s)| {
            let yv = if yv == 1 { S::one() } else { S::zero() };
            (yv * (S::one() - s), (yv + s).min(S::one()))
        })
        .unzip();
    SoftRoughLabel::new(
        ProbabilityMask::new(y.height(), y.width(), lower)?,
        ProbabilityMask::new(y.height(), y.width(), upper)?,
    )
}

/// Pixels where `lower ≤ y ≤ upper` fails.
pub fn containment_violations<S: Scalar>(y: &BinaryMask, rough: &SoftRoughLabel<S>) -> usize {
    y.values()
        .iter()
        .zip(rough.lower().values())
        .zip(rough.upper().values())
        .filter(|((&yv, &l), &u)| {
            let yv = if yv == 1 { S::one() } else { S::zero() };
            l > yv || yv > u
        })
        .count()
}

#[derive(Clone, Debug)]
pub struct CorrectionResult<S> {
    pub mean: ProbabilityMask<S>,
    pub variance: Vec<S>,
    pub sigma_hat: Vec<S>,
    pub rough: SoftRoughLabel<S>,
}

/// `mc_stats → normalize_var → correct_label`.
pub fn correct<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    y: &BinaryMask,
    t: usize,
    rng: &mut Rng,
) -> Result<CorrectionResult<S>> {
    let (mean, variance) = mc_stats(model, image, t, rng)?;
    let sigma_hat = normalize_var(&variance);
    let rough = correct_label(y, &sigma_hat)?;
    Ok(CorrectionResult {
        mean,
        variance,
        sigma_hat,
        rough,
    })
}

/// Loss and parameter gradients of one stochastic pass against `rough`.
pub fn sample_gradients<S: Scalar>(
    model: &Model<S>,
    image: &Tensor<S>,
    rough: &SoftRoughLabel<S>,
    loss: &LossConfig,
    rng: &mut Rng,
) -> Result<(S, Gradients<S>)> {
    let (pred, tape) = model.forward_train(image, true, rng)?;
    let (value, d_pred) = rough_tversky_grad(&pred, rough, loss)?;
    Ok((value.loss, model.backward(&tape, &d_pred)))
}

enum OptimState<S> {
    Sgd,
    Adam { m: Vec<Vec<S>>, v: Vec<Vec<S>>, t: i32 },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl<S: Scalar> OptimState<S> {
    fn new(kind: Optimizer, model: &Model<S>) -> Self {
        match kind {
            Optimizer::Sgd => OptimState::Sgd,
            Optimizer::Adam => {
                let zeros: Vec<Vec<S>> = model.params().iter().map(|p| vec![S::zero(); p.len()]).collect();
                OptimState::Adam {
                    m: zeros.clone(),
                    v: zeros,
                    t: 0,
                }
            }
        }
    }

    fn step(&mut self, model: &mut Model<S>, grads: &Gradients<S>, lr: f64) {
        let lr_s = S::lit(lr);
        match self {
            OptimState::Sgd => {
                for (p, g) in model.params_mut().iter_mut().zip(&grads.tensors) {
                    for (pv, &gv) in p.iter_mut().zip(g) {
                        *pv -= lr_s * gv;
                    }
                }
            }
            OptimState::Adam { m, v, t } => {
                *t += 1;
                let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
                let c1 = S::lit(1.0 - ADAM_BETA1.powi(*t));
                let c2 = S::lit(1.0 - ADAM_BETA2.powi(*t));
                let eps = S::lit(ADAM_EPS);
                for (((p, g), m), v) in model
                    .params_mut()
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                {
                    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mv = b1 * *mv + (S::one() - b1) * gv;
                        *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                        let mh = *mv / c1;
                        let vh = *vv / c2;
                        *pv -= lr_s * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean step loss including the L2 term.
    pub loss: f64,
    pub recall_upper: f64,
    pub precision_lower: f64,
    pub iou: f64,
    pub learning_rate: f64,
    pub corrected: bool,
    pub containment_checked_pixels: u64,
}

pub struct FitOutcome<S> {
    pub checkpoint: Checkpoint<S>,
    pub log: Vec<EpochLog>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    /// Pixels checked against `lower ≤ y ≤ upper`; every check passed.
    pub containment_checked_pixels: u64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Trains `model` in place. With `out_dir` set, the checkpoint is rewritten
/// and one metric line appended after every epoch.
pub fn fit<S: Scalar>(
    model: &mut Model<S>,
    data: &[TrainSample<S>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FitOutcome<S>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let hash = cfg.hash();
    let metrics_path: Option<PathBuf> = out_dir.map(|d| d.join(METRICS_FILE));
    if let Some(dir) = out_dir {
        crate::io::create_dir(dir)?;
        let path = metrics_path.as_ref().expect("set with out_dir");
        std::fs::write(path, b"").map_err(|e| Error::io(path, e))?;
    }
    let correct_enabled = model.spec().has_psbm();
    if !correct_enabled {
        log::info!("model has no PSBM layer; training on crisp labels");
    }
    let mut optim = OptimState::new(cfg.optimizer, model);
    let n = data.len();
    let mut step = 0usize;
    let mut step_losses = Vec::new();
    let mut log_lines = Vec::with_capacity(cfg.epochs);
    let mut checked_total = 0u64;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let corrected = correct_enabled && epoch >= cfg.warmup_epochs;
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        let mut checked = 0u64;
        let mut lr = cfg.learning_rate_at(step);

        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(model);
            let mut batch_loss = S::zero();
            for (j, &idx) in batch.iter().enumerate() {
                let sample = &data[idx];
                let k = (epoch * n + b * cfg.batch_size + j) as u64;
                let rough = if corrected {
                    let mut rng = stream(cfg.seed, Purpose::Masks, 2 * k);
                    let c = correct(model, &sample.image, &sample.label, cfg.t_train, &mut rng)?;
                    let bad = containment_violations(&sample.label, &c.rough);
                    assert_eq!(bad, 0, "label correction broke lower <= y <= upper");
                    checked += sample.label.len() as u64;
                    c.rough
                } else {
                    SoftRoughLabel::crisp(&sample.label)
                };
                let mut rng = stream(cfg.seed, Purpose::Masks, 2 * k + 1);
                let (loss, g) = sample_gradients(model, &sample.image, &rough, &cfg.loss, &mut rng)?;
                batch_loss += loss;
                grads.add_assign(&g);
            }
            let inv = S::lit(1.0 / batch.len() as f64);
            grads.scale(inv);
            add_l2_grad(model, cfg.loss.weight_decay, &mut grads);
            let loss = (batch_loss * inv + l2_penalty(model, cfg.loss.weight_decay)).to_f64_lossy();
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            lr = cfg.learning_rate_at(step);
            optim.step(model, &grads, lr);
            step += 1;
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
        }
        checked_total += checked;

        let m = evaluate_subset(model, data, cfg, epoch)?;
        let line = EpochLog {
            epoch: epoch + 1,
            loss: epoch_loss / epoch_steps as f64,
            recall_upper: m.recall_upper,
            precision_lower: m.precision_lower,
            iou: m.iou,
            learning_rate: lr,
            corrected,
            containment_checked_pixels: checked,
        };
        log::info!(
            "epoch {}: loss {:.4} recall_upper {:.3} precision_lower {:.3} iou {:.3}",
            line.epoch,
            line.loss,
            line.recall_upper,
            line.precision_lower,
            line.iou
        );
        if let Some(dir) = out_dir {
            let ckpt = Checkpoint {
                model: model.clone(),
                training_config_hash: hash.clone(),
                epoch: epoch + 1,
            };
            ckpt.save(dir.join(CHECKPOINT_FILE))?;
            append_line(metrics_path.as_ref().expect("set with out_dir"), &line)?;
        }
        log_lines.push(line);
    }

    Ok(FitOutcome {
        checkpoint: Checkpoint {
            model: model.clone(),
            training_config_hash: hash,
            epoch: cfg.epochs,
        },
        log: log_lines,
        step_losses,
        containment_checked_pixels: checked_total,
    })
}

fn evaluate_subset<S: Scalar>(
    model: &Model<S>,
    data: &[TrainSample<S>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<ImageMetrics> {
    let icfg = InferenceConfig {
        t: cfg.t_train,
        ..InferenceConfig::default()
    };
    let mut rng = stream(cfg.seed, Purpose::Inference, epoch as u64);
    let take = cfg.eval_samples.clamp(1, data.len());
    let rows = data[..take]
        .iter()
        .map(|s| {
            let r = infer_rough(model, &s.image, &icfg, &mut rng)?;
            let pred = r.probability.threshold(S::lit(icfg.binarize_threshold));
            metrics::evaluate(&r.rough, &pred, &s.label, None)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(metrics::aggregate(&rows).expect("non-empty"))
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut line = serde_json::to_vec(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(&line).map_err(|e| Error::io(path, e))
}
