//! Shared fixtures: the synthetic end-to-end comparison between the full
//! method and the crisp deterministic baseline.

#![allow(dead_code)]

use std::time::Instant;

use roughseg::mc_infer::{infer_rough, InferenceConfig};
use roughseg::metrics;
use roughseg::model::{self, center_encoder_placements, ModelSpec};
use roughseg::rng::{stream, Purpose};
use roughseg::rough_core::BinaryMask;
use roughseg::rough_loss::LossConfig;
use roughseg::synth_data::{self, core_with_halo_fraction, SynthConfig, SyntheticSample};
use roughseg::trainer::{self, TrainConfig, TrainSample};
use roughseg::Model32;

#[derive(Clone, Debug)]
pub struct E2eConfig {
    pub images: usize,
    pub size: usize,
    pub test_images: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub t_train: usize,
    pub t_infer: usize,
    pub learning_rate: f64,
    /// Precision weight of the rough loss, shared by both arms.
    pub alpha: f64,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            images: 200,
            size: 64,
            test_images: 40,
            base_channels: 8,
            depth: 3,
            epochs: 12,
            warmup_epochs: 4,
            t_train: 8,
            t_infer: 16,
            learning_rate: 0.003,
            alpha: 0.8,
        }
    }
}

/// Test-split means for one trained model.
#[derive(Clone, Copy, Debug, Default)]
pub struct ArmScores {
    /// Upper approximation against core ∪ halo.
    pub recall_upper: f64,
    /// Lower approximation against core.
    pub precision_lower: f64,
    /// Prediction at 0.5 against core ∪ inner half of the halo.
    pub iou_half_halo: f64,
    /// Boundary region against halo.
    pub boundary_iou: f64,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub full: ArmScores,
    pub baseline: ArmScores,
    pub untrained_boundary_iou: f64,
    pub containment_violations: usize,
    pub checked_pixels: u64,
    pub seconds: f64,
}

impl SeedOutcome {
    pub fn directional_win(&self) -> bool {
        self.full.recall_upper - self.baseline.recall_upper >= 0.03
            && self.full.precision_lower - self.baseline.precision_lower >= 0.03
    }

    pub fn iou_within(&self, points: f64) -> bool {
        (self.full.iou_half_halo - self.baseline.iou_half_halo).abs() <= points
    }
}

pub fn dataset(cfg: &E2eConfig, seed: u64) -> Vec<SyntheticSample> {
    let s = SynthConfig {
        count: cfg.images,
        size: cfg.size,
        halo_width: [3, 6],
        annotator_bias_range: [0.1, 0.9],
        seed,
        ..SynthConfig::default()
    };
    synth_data::generate_samples(&s).expect("synthetic data")
}

pub fn full_spec(cfg: &E2eConfig, seed: u64) -> ModelSpec {
    ModelSpec {
        base_channels: cfg.base_channels,
        depth: cfg.depth,
        psbm_placements: center_encoder_placements(cfg.depth),
        seed,
        ..ModelSpec::default()
    }
}

pub fn train_config(cfg: &E2eConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        warmup_epochs: cfg.warmup_epochs,
        t_train: cfg.t_train,
        learning_rate: cfg.learning_rate,
        eval_samples: 4,
        seed,
        loss: LossConfig {
            alpha: cfg.alpha,
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Scores `model` on `test`, counting rough-bound containment violations.
pub fn score(model: &Model32, test: &[SyntheticSample], t: usize, seed: u64) -> (ArmScores, usize) {
    let icfg = InferenceConfig { t, ..InferenceConfig::default() };
    let mut acc = ArmScores::default();
    let mut violations = 0;
    for (i, s) in test.iter().enumerate() {
        let image = s.to_train_sample::<f32>().image;
        let mut rng = stream(seed, Purpose::Inference, 1_000_000 + i as u64);
        let r = infer_rough(model, &image, &icfg, &mut rng).expect("inference");
        violations += containment_violations(r.rough.lower(), r.rough.upper(), &r.partition);
        let pred = r.probability.threshold(0.5);
        let truth_all = s.core.or(&s.halo);
        let half = core_with_halo_fraction(&s.core, &s.halo, 0.5);
        acc.recall_upper += metrics::recall_upper(r.rough.upper(), &truth_all).unwrap();
        acc.precision_lower += metrics::precision_lower(r.rough.lower(), &s.core).unwrap();
        acc.iou_half_halo += metrics::iou(&pred, &half).unwrap();
        acc.boundary_iou += metrics::iou(&r.rough.boundary(), &s.halo).unwrap();
    }
    let n = test.len() as f64;
    acc.recall_upper /= n;
    acc.precision_lower /= n;
    acc.iou_half_halo /= n;
    acc.boundary_iou /= n;
    (acc, violations)
}

/// Pixels where `lower ⊄ upper` or the partition is not an exact cover.
pub fn containment_violations(
    lower: &BinaryMask,
    upper: &BinaryMask,
    partition: &roughseg::rough_core::RegionPartition,
) -> usize {
    let mut bad = 0;
    for i in 0..lower.len() {
        let (l, u) = (lower.values()[i], upper.values()[i]);
        let cover = partition.anomaly.values()[i] + partition.boundary.values()[i] + partition.normal.values()[i];
        if l > u || cover != 1 {
            bad += 1;
        }
    }
    bad
}

pub fn run_seed(cfg: &E2eConfig, seed: u64) -> SeedOutcome {
    let start = Instant::now();
    let data = dataset(cfg, seed);
    let (train, test) = data.split_at(cfg.images - cfg.test_images);
    let samples: Vec<TrainSample<f32>> = synth_data::to_train_samples(train);
    let tcfg = train_config(cfg, seed);

    let spec = full_spec(cfg, seed);
    let mut full: Model32 = model::build(&spec).unwrap();
    let (untrained, _) = score(&full, test, cfg.t_infer, seed);
    let outcome = trainer::fit(&mut full, &samples, &tcfg, None).expect("full training");
    let (full_scores, v_full) = score(&full, test, cfg.t_infer, seed);

    let mut base: Model32 = model::build(&spec.without_psbm()).unwrap();
    trainer::fit(&mut base, &samples, &tcfg, None).expect("baseline training");
    let (base_scores, v_base) = score(&base, test, cfg.t_infer, seed);

    SeedOutcome {
        seed,
        full: full_scores,
        baseline: base_scores,
        untrained_boundary_iou: untrained.boundary_iou,
        containment_violations: v_full + v_base,
        checked_pixels: outcome.containment_checked_pixels,
        seconds: start.elapsed().as_secs_f64(),
    }
}
