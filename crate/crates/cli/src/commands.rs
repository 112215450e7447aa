//! Subcommand bodies. Each takes its resolved options and returns the main
//! output path.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use roughseg::confidence::{self, Policy, Standard};
use roughseg::io::{create_dir, read_json, save_png, write_json};
use roughseg::mc_infer::{self, InferenceConfig};
use roughseg::metrics::{self, ImageMetrics};
use roughseg::model::{self, all_layers, center_encoder_placements, Checkpoint, LayerId, ModelSpec};
use roughseg::psbm::{PsbmConfig, SeedRate};
use roughseg::rng::{stream, Purpose};
use roughseg::rough_core::{BinaryMask, ProbabilityMask, RoughLabel};
use roughseg::rough_loss::LossConfig;
use roughseg::synth_data::{self, SynthConfig};
use roughseg::trainer::{self, Optimizer, TrainConfig, TrainSample};
use roughseg::{Model32, ProbabilityMask32};

use crate::config::{output_path, require};

pub const PROBABILITY_DIR: &str = "probability";
pub const LOWER_DIR: &str = "lower";
pub const UPPER_DIR: &str = "upper";
pub const BOUNDARY_DIR: &str = "boundary";
pub const RECORDS_DIR: &str = "json";
pub const REPORTS_DIR: &str = "reports";
pub const OVERLAYS_DIR: &str = "overlays";

// synth

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOpts {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub count: usize,
    pub size: usize,
    pub defects_min: usize,
    pub defects_max: usize,
    pub halo_min: usize,
    pub halo_max: usize,
    pub bias_min: f64,
    pub bias_max: f64,
    pub texture_scale: f64,
}

impl Default for SynthOpts {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            out_dir: None,
            seed: None,
            count: d.count,
            size: d.size,
            defects_min: d.defects_per_image[0],
            defects_max: d.defects_per_image[1],
            halo_min: d.halo_width[0],
            halo_max: d.halo_width[1],
            bias_min: d.annotator_bias_range[0],
            bias_max: d.annotator_bias_range[1],
            texture_scale: d.texture_scale,
        }
    }
}

pub fn synth(opts: &SynthOpts) -> Result<PathBuf> {
    let cfg = SynthConfig {
        count: opts.count,
        size: opts.size,
        defects_per_image: [opts.defects_min, opts.defects_max],
        halo_width: [opts.halo_min, opts.halo_max],
        annotator_bias_range: [opts.bias_min, opts.bias_max],
        texture_scale: opts.texture_scale,
        seed: require(&opts.seed, "seed")?,
    };
    let dir = output_path(opts.out_dir.as_deref(), "dataset");
    let manifest = synth_data::generate_dataset(&cfg, &dir)?;
    log::info!("wrote {} samples to {}", manifest.samples.len(), dir.display());
    println!("manifest: {}", dir.join(synth_data::MANIFEST_FILE).display());
    println!("manifest sha256: {}", synth_data::manifest_hash(&dir)?);
    Ok(dir)
}

// train

/// `"default"`, `"all"`, `"none"`, a comma list, or a JSON array of layer ids.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Placements {
    Named(String),
    List(Vec<LayerId>),
}

impl Placements {
    pub fn resolve(&self, depth: usize) -> Result<Vec<LayerId>> {
        Ok(match self {
            Placements::List(v) => v.clone(),
            Placements::Named(s) => match s.trim() {
                "default" => center_encoder_placements(depth),
                "all" => all_layers(depth),
                "none" | "" => Vec::new(),
                list => list
                    .split(',')
                    .map(|t| t.parse::<LayerId>())
                    .collect::<Result<_, _>>()?,
            },
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(rename = "T_train")]
    pub t_train: usize,
    pub warmup_epochs: usize,
    pub eval_samples: usize,
    pub optimizer: Optimizer,
    pub alpha: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub base_channels: usize,
    pub depth: usize,
    pub placements: Placements,
    pub keep_norm: Vec<LayerId>,
    pub keep_prob: f64,
    pub block_size: usize,
    pub seed_rate: SeedRate,
    pub active_in_eval: bool,
    pub no_psbm: bool,
}

impl Default for TrainOpts {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = ModelSpec::default();
        Self {
            data_dir: None,
            out_dir: None,
            seed: t.seed,
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            batch_size: t.batch_size,
            epochs: t.epochs,
            t_train: t.t_train,
            warmup_epochs: t.warmup_epochs,
            eval_samples: t.eval_samples,
            optimizer: t.optimizer,
            alpha: t.loss.alpha,
            epsilon: t.loss.epsilon,
            weight_decay: t.loss.weight_decay,
            base_channels: m.base_channels,
            depth: m.depth,
            placements: Placements::Named("default".into()),
            keep_norm: m.keep_norm,
            keep_prob: m.psbm.keep_prob,
            block_size: m.psbm.block_size,
            seed_rate: m.psbm.seed_rate,
            active_in_eval: m.psbm.active_in_eval,
            no_psbm: false,
        }
    }
}

impl TrainOpts {
    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            input_channels: 1,
            base_channels: self.base_channels,
            depth: self.depth,
            psbm_placements: self.placements.resolve(self.depth)?,
            psbm: PsbmConfig {
                keep_prob: self.keep_prob,
                block_size: self.block_size,
                active_in_eval: self.active_in_eval,
                seed_rate: self.seed_rate,
            },
            keep_norm: self.keep_norm.clone(),
            seed: self.seed,
        };
        Ok(if self.no_psbm { spec.without_psbm() } else { spec })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            lr_decay: self.lr_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            t_train: self.t_train,
            warmup_epochs: self.warmup_epochs,
            loss: LossConfig {
                alpha: self.alpha,
                epsilon: self.epsilon,
                weight_decay: self.weight_decay,
            },
            optimizer: self.optimizer,
            eval_samples: self.eval_samples,
            seed: self.seed,
        }
    }
}

pub const RESOLVED_CONFIG_FILE: &str = "config.json";

pub fn train(opts: &TrainOpts) -> Result<PathBuf> {
    let data_dir = require(&opts.data_dir, "data_dir")?;
    ensure!(data_dir.is_dir(), "dataset directory not found: {}", data_dir.display());
    let spec = opts.model_spec()?;
    let cfg = opts.train_config();
    cfg.validate()?;
    let mut model: Model32 = model::build(&spec)?;
    if spec.has_psbm() {
        log::info!(
            "PSBM training at {} with keep probability {}",
            spec.psbm_placements.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            spec.psbm.keep_prob
        );
    } else {
        log::info!("baseline crisp training: no PSBM, labels are never corrected");
    }
    let pairs = synth_data::load_training_set(&data_dir)?;
    ensure!(!pairs.is_empty(), "no training images under {}", data_dir.display());
    let data: Vec<TrainSample<f32>> = pairs.iter().map(|p| p.to_train_sample()).collect::<Result<_, _>>()?;
    let out = output_path(opts.out_dir.as_deref(), "train");
    create_dir(&out)?;
    write_json(&out.join(RESOLVED_CONFIG_FILE), opts)?;
    log::info!("{} parameters, {} training images", model.param_count(), data.len());
    let outcome = trainer::fit(&mut model, &data, &cfg, Some(&out))?;
    log::info!("trained {} epochs, {} steps", outcome.log.len(), outcome.step_losses.len());
    let ckpt = out.join(trainer::CHECKPOINT_FILE);
    println!("checkpoint: {}", ckpt.display());
    println!("metrics: {}", out.join(trainer::METRICS_FILE).display());
    Ok(ckpt)
}

// infer

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOpts {
    pub checkpoint: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: u64,
    pub binarize_threshold: f64,
    pub tol: f64,
    pub timing: bool,
}

impl Default for InferOpts {
    fn default() -> Self {
        let d = InferenceConfig::default();
        Self {
            checkpoint: None,
            image_dir: None,
            out_dir: None,
            t: d.t,
            seed: 0,
            binarize_threshold: d.binarize_threshold,
            tol: d.tol,
            timing: false,
        }
    }
}

/// Per-image record written next to the rasters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferRecord {
    pub image: String,
    pub height: usize,
    pub width: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub seed: u64,
    pub stream_index: u64,
    pub binarize_threshold: f64,
    pub mean_probability: f64,
    pub lower_pixels: usize,
    pub upper_pixels: usize,
    pub boundary_pixels: usize,
    pub normal_pixels: usize,
}

fn worker_count(jobs: usize) -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(jobs).max(1)
}

/// Runs `f` over `items` on scoped threads, keeping input order.
fn fan_out<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let workers = worker_count(items.len());
    let chunk = items.len().div_ceil(workers).max(1);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, item)| f(c * chunk + k, item))
                        .collect::<Result<Vec<R>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

pub fn infer(opts: &InferOpts) -> Result<PathBuf> {
    let ckpt_path = require(&opts.checkpoint, "checkpoint")?;
    let image_dir = require(&opts.image_dir, "image_dir")?;
    let cfg = InferenceConfig {
        t: opts.t,
        binarize_threshold: opts.binarize_threshold,
        tol: opts.tol,
    };
    cfg.validate()?;
    let ckpt = Checkpoint::<f32>::load(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let model = &ckpt.model;
    ensure!(
        model.spec().input_channels == 1,
        "checkpoint expects {} input channels; grayscale images have 1",
        model.spec().input_channels
    );
    if !model.spec().has_psbm() || !model.spec().psbm.active_in_eval {
        log::warn!("model is deterministic at inference: lower and upper approximations coincide");
    }
    let names = synth_data::png_names(&image_dir)?;
    ensure!(!names.is_empty(), "no PNG images in {}", image_dir.display());
    let out = output_path(opts.out_dir.as_deref(), "infer");
    for sub in [PROBABILITY_DIR, LOWER_DIR, UPPER_DIR, BOUNDARY_DIR, RECORDS_DIR] {
        create_dir(&out.join(sub))?;
    }
    let records = fan_out(&names, |i, name| {
        let (h, w, pixels) = synth_data::load_gray(&image_dir.join(name))?;
        let image = model::image_tensor::<f32>(h, w, &pixels)?;
        let mut rng = stream(opts.seed, Purpose::Inference, i as u64);
        let r = mc_infer::infer_rough(model, &image, &cfg, &mut rng).with_context(|| format!("inferring {name}"))?;
        r.probability.save_png(out.join(PROBABILITY_DIR).join(name))?;
        r.rough.lower().save_png(out.join(LOWER_DIR).join(name))?;
        r.rough.upper().save_png(out.join(UPPER_DIR).join(name))?;
        r.partition.boundary.save_png(out.join(BOUNDARY_DIR).join(name))?;
        let v = r.probability.values();
        let rec = InferRecord {
            image: name.clone(),
            height: h,
            width: w,
            t: cfg.t,
            seed: opts.seed,
            stream_index: i as u64,
            binarize_threshold: cfg.binarize_threshold,
            mean_probability: v.iter().map(|&p| p as f64).sum::<f64>() / v.len() as f64,
            lower_pixels: r.rough.lower().count(),
            upper_pixels: r.rough.upper().count(),
            boundary_pixels: r.partition.boundary.count(),
            normal_pixels: r.partition.normal.count(),
        };
        write_json(&out.join(RECORDS_DIR).join(json_name(name)), &rec)?;
        Ok(rec)
    })?;
    log::info!("inferred {} images with T = {}", records.len(), cfg.t);
    if opts.timing {
        let images = names
            .iter()
            .map(|n| {
                let (h, w, px) = synth_data::load_gray(&image_dir.join(n))?;
                Ok(model::image_tensor::<f32>(h, w, &px)?)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = stream(opts.seed, Purpose::Inference, u64::MAX);
        let report = mc_infer::timing_report(model, &images, &cfg, &mut rng)?;
        write_json(&out.join("timing.json"), &report)?;
        println!("mean inference time: {:.2} ms per image (T = {})", report.mean_ms, report.t);
    }
    println!("outputs: {}", out.display());
    Ok(out)
}

fn json_name(png: &str) -> String {
    let stem = png.rsplit_once('.').map_or(png, |(s, _)| s);
    format!("{stem}.json")
}

// eval

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpts {
    pub pred_dir: Option<PathBuf>,
    pub label_dir: Option<PathBuf>,
    pub truth_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub binarize_threshold: f64,
}

impl Default for EvalOpts {
    fn default() -> Self {
        Self {
            pred_dir: None,
            label_dir: None,
            truth_dir: None,
            out: None,
            binarize_threshold: InferenceConfig::default().binarize_threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedMetrics {
    pub image: String,
    #[serde(flatten)]
    pub metrics: ImageMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<NamedMetrics>,
    pub aggregate: ImageMetrics,
}

pub fn eval(opts: &EvalOpts) -> Result<PathBuf> {
    let pred_dir = require(&opts.pred_dir, "pred_dir")?;
    let label_dir = require(&opts.label_dir, "label_dir")?;
    for d in [&pred_dir, &label_dir] {
        ensure!(d.is_dir(), "directory not found: {}", d.display());
    }
    let preds: BTreeSet<String> = synth_data::png_names(&pred_dir.join(PROBABILITY_DIR))?.into_iter().collect();
    let labels: BTreeSet<String> = synth_data::png_names(&label_dir)?.into_iter().collect();
    let only_pred: Vec<_> = preds.difference(&labels).cloned().collect();
    let only_label: Vec<_> = labels.difference(&preds).cloned().collect();
    if !only_pred.is_empty() || !only_label.is_empty() {
        bail!(
            "unmatched files: without label [{}]; without prediction [{}]",
            only_pred.join(", "),
            only_label.join(", ")
        );
    }
    ensure!(!preds.is_empty(), "no predictions in {}", pred_dir.join(PROBABILITY_DIR).display());
    let cut = opts.binarize_threshold as f32;
    let mut images = Vec::with_capacity(preds.len());
    for name in &preds {
        let prob = ProbabilityMask32::load_png(pred_dir.join(PROBABILITY_DIR).join(name))?;
        let rough = RoughLabel::new(
            BinaryMask::load_png(pred_dir.join(LOWER_DIR).join(name))?,
            BinaryMask::load_png(pred_dir.join(UPPER_DIR).join(name))?,
        )
        .with_context(|| format!("prediction {name}"))?;
        let label = BinaryMask::load_png(label_dir.join(name))?;
        let truth = match &opts.truth_dir {
            Some(t) => Some((
                BinaryMask::load_png(t.join("core").join(name))?,
                BinaryMask::load_png(t.join("halo").join(name))?,
            )),
            None => None,
        };
        let m = metrics::evaluate(&rough, &prob.threshold(cut), &label, truth.as_ref().map(|(c, h)| (c, h)))
            .with_context(|| format!("scoring {name}"))?;
        images.push(NamedMetrics {
            image: name.clone(),
            metrics: m,
        });
    }
    let per: Vec<ImageMetrics> = images.iter().map(|n| n.metrics.clone()).collect();
    let report = EvalReport {
        aggregate: metrics::aggregate(&per).expect("non-empty"),
        images,
    };
    let out = output_path(opts.out.as_deref(), "eval.json");
    write_json(&out, &report)?;
    println!("{}", serde_json::to_string_pretty(&report.aggregate)?);
    println!("report: {}", out.display());
    Ok(out)
}

// grade

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradeOpts {
    pub prob_dir: Option<PathBuf>,
    pub standards: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub pixel_equiv: f64,
    pub policy: Policy,
    pub lambda_min: f64,
    pub lambda_levels: usize,
}

impl Default for GradeOpts {
    fn default() -> Self {
        Self {
            prob_dir: None,
            standards: None,
            image_dir: None,
            out_dir: None,
            pixel_equiv: confidence::COMMUTATOR_PIXEL_EQUIVALENT_MM,
            policy: Policy::default(),
            lambda_min: 0.01,
            lambda_levels: 101,
        }
    }
}

pub fn load_standards(path: &Path) -> Result<Vec<Standard>> {
    let list: Vec<Standard> = read_json(path)?;
    ensure!(!list.is_empty(), "{}: no standards listed", path.display());
    for (i, s) in list.iter().enumerate() {
        s.validate().with_context(|| format!("{}: entry {i}", path.display()))?;
    }
    Ok(list)
}

pub fn grade(opts: &GradeOpts) -> Result<PathBuf> {
    let prob_dir = require(&opts.prob_dir, "prob_dir")?;
    ensure!(prob_dir.is_dir(), "directory not found: {}", prob_dir.display());
    let standards = match &opts.standards {
        Some(p) => load_standards(p)?,
        None => confidence::commutator_standards(),
    };
    ensure!(
        opts.pixel_equiv > 0.0 && opts.pixel_equiv.is_finite(),
        "pixel_equiv must be positive, got {}",
        opts.pixel_equiv
    );
    ensure!(opts.lambda_levels >= 2, "lambda_levels must be at least 2");
    let grid = confidence::linspace(opts.lambda_min, 1.0, opts.lambda_levels);
    let names = synth_data::png_names(&prob_dir)?;
    let out = output_path(opts.out_dir.as_deref(), "grade");
    create_dir(&out.join(REPORTS_DIR))?;
    create_dir(&out.join(OVERLAYS_DIR))?;
    let counts = fan_out(&names, |_, name| {
        let prob = ProbabilityMask::<f64>::load_png(prob_dir.join(name))?;
        let report = confidence::grade(&prob, &standards, opts.pixel_equiv, &grid, opts.policy)?;
        write_json(&out.join(REPORTS_DIR).join(json_name(name)), &report)?;
        let base = match &opts.image_dir {
            Some(d) => {
                let (h, w, px) = synth_data::load_gray(&d.join(name))?;
                ensure!((h, w) == (prob.height(), prob.width()), "{name}: image and probability sizes differ");
                px
            }
            None => prob.values().iter().map(|&v| v as f32).collect(),
        };
        let overlay = confidence::render_overlay(&base, &prob, grid[0])?;
        save_png(&out.join(OVERLAYS_DIR).join(name), &overlay)?;
        Ok(report.components.len())
    })?;
    log::info!(
        "graded {} maps, {} components",
        names.len(),
        counts.iter().sum::<usize>()
    );
    println!("reports: {}", out.join(REPORTS_DIR).display());
    Ok(out)
}
