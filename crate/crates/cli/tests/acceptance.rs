//! Acceptance suite. Each criterion runs in turn and prints one line:
//! `PASS` or `FAIL`, its name, wall time and the measured values.
//! The process exits non-zero when any criterion fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::Rng as _;
use roughseg::confidence::{
    self, commutator_standards, default_lambda_grid, discrimination_confidence, g_curve, linspace, Policy, Standard,
};
use roughseg::mc_infer::{infer_rough, InferenceConfig};
use roughseg::model::{self, center_encoder_placements, ModelSpec};
use roughseg::psbm::{self, PsbmConfig};
use roughseg::rng::{from_seed, stream, Purpose};
use roughseg::rough_core::{BinaryMask, ProbabilityMask, SoftRoughLabel};
use roughseg::rough_loss::{rough_tversky, rough_tversky_eps, rough_tversky_grad, LossConfig};
use roughseg::synth_data::{self, SynthConfig};
use roughseg::trainer::{self, TrainConfig};
use roughseg::Model32;

/// Outcome of one criterion: pass flag and a one-line summary of values.
type Verdict = (bool, String);

fn main() {
    let criteria: Vec<(&str, fn() -> Verdict)> = vec![
        ("psbm statistics", psbm_statistics),
        ("gamma formula", gamma_formula),
        ("loss correctness", loss_correctness),
        ("label-correction sandwich", label_correction_sandwich),
        ("rough-bound containment", rough_bound_containment),
        ("confidence monotonicity", confidence_monotonicity),
        ("end-to-end directional claim", end_to_end_directional),
        ("oracle boundary recovery", oracle_boundary_recovery),
        ("reproducibility", reproducibility),
        ("grading pipeline", grading_pipeline),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!ok);
        println!(
            "{} {name} ({:.1} s): {detail}",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {failed} criteria failed");
    if failed > 0 {
        std::process::exit(1);
    }
}

fn within(start: Instant, limit: Duration) -> bool {
    start.elapsed() <= limit
}

// PSBM masks on a 16×16 map: mean dropped area and block structure.
fn psbm_statistics() -> Verdict {
    let start = Instant::now();
    let (h, w, draws) = (16, 16, 10_000);
    let mut ok = true;
    let mut parts = Vec::new();
    for block in [3, 5, 7] {
        let cfg = PsbmConfig { keep_prob: 0.5, block_size: block, ..PsbmConfig::default() };
        let mut rng = stream(block as u64, Purpose::Masks, 0);
        let half = block / 2;
        let (mut dropped, mut stray) = (0.0, 0usize);
        for _ in 0..draws {
            let m = psbm::draw_mask(&cfg, h, w, &mut rng).expect("mask");
            dropped += m.dropped_fraction();
            let zero_window = |cy: usize, cx: usize| {
                (cy - half..=cy + half).all(|y| (cx - half..=cx + half).all(|x| !m.get(y, x)))
            };
            for y in 0..h {
                for x in 0..w {
                    if m.get(y, x) {
                        continue;
                    }
                    let lo_y = y.saturating_sub(half).max(half);
                    let hi_y = (y + half).min(h - 1 - half);
                    let lo_x = x.saturating_sub(half).max(half);
                    let hi_x = (x + half).min(w - 1 - half);
                    let covered = (lo_y..=hi_y).any(|cy| (lo_x..=hi_x).any(|cx| zero_window(cy, cx)));
                    stray += usize::from(!covered);
                }
            }
        }
        let mean = dropped / draws as f64;
        ok &= (mean - 0.5).abs() <= 0.05 && stray == 0;
        parts.push(format!("L={block} dropped={mean:.4} stray_cells={stray}"));
    }
    let fast = within(start, Duration::from_secs(30));
    parts.push(format!("under 30 s: {fast}"));
    (ok && fast, parts.join(", "))
}

fn gamma_formula() -> Verdict {
    let g = psbm::gamma(0.5, 3, 8).expect("gamma");
    let want = 32.0 / 324.0;
    let rel = ((g - want) / want).abs();
    let zeros: Vec<f64> = [(3, 8), (5, 16), (7, 32)]
        .iter()
        .map(|&(l, w)| psbm::gamma(1.0, l, w).expect("gamma"))
        .collect();
    let ok = rel <= 1e-9 && zeros.iter().all(|&z| z == 0.0);
    (ok, format!("gamma(0.5,3,8)={g:.12} rel_err={rel:.1e}, gamma(1,.,.)={zeros:?}"))
}

fn pm(h: usize, w: usize, v: Vec<f64>) -> ProbabilityMask<f64> {
    ProbabilityMask::new(h, w, v).expect("mask")
}

fn loss_correctness() -> Verdict {
    let start = Instant::now();

    let mut r = from_seed(5);
    let crisp = BinaryMask::from_fn(8, 8, |_, _| r.random::<f64>() < 0.4);
    let perfect = rough_tversky(&crisp.to_probability::<f64>(), &SoftRoughLabel::crisp(&crisp), &LossConfig::default())
        .expect("loss")
        .loss;

    let half = LossConfig { alpha: 0.5, ..LossConfig::default() };
    let label = SoftRoughLabel::new(pm(1, 4, vec![1.0, 0.0, 0.0, 0.0]), pm(1, 4, vec![1.0, 1.0, 0.0, 0.0])).expect("label");
    let worked = rough_tversky_eps(&pm(1, 4, vec![1.0, 0.5, 0.0, 0.0]), &label, &half, 0.0).expect("loss").loss;

    // Central differences of the loss in every predicted pixel.
    let mut worst: f64 = 0.0;
    let mut bad = 0;
    let mut rng = from_seed(17);
    for _ in 0..50 {
        let n = 64;
        let lower: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < 0.3 { rng.random() } else { 0.0 }).collect();
        let upper: Vec<f64> = lower.iter().map(|&l| (l + rng.random::<f64>()).min(1.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
        let cfg = LossConfig { alpha: rng.random_range(0.1..0.9), ..LossConfig::default() };
        let label = SoftRoughLabel::new(pm(8, 8, lower), pm(8, 8, upper)).expect("label");
        let (_, grad) = rough_tversky_grad(&pm(8, 8, pred.clone()), &label, &cfg).expect("grad");
        let h = 1e-6;
        for i in 0..n {
            let mut p = pred.clone();
            p[i] += h;
            let lp = rough_tversky(&pm(8, 8, p.clone()), &label, &cfg).expect("loss").loss;
            p[i] -= 2.0 * h;
            let lm = rough_tversky(&pm(8, 8, p), &label, &cfg).expect("loss").loss;
            let fd = (lp - lm) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-12);
            if rel > 1e-4 && (grad[i] - fd).abs() > 1e-12 {
                bad += 1;
            }
            worst = worst.max(rel);
        }
    }
    let fast = within(start, Duration::from_secs(60));
    let ok = perfect.abs() <= 1e-5 && (worked - 0.2916666666666667).abs() <= 1e-6 && bad == 0 && fast;
    (
        ok,
        format!(
            "perfect={perfect:.2e}, worked={worked:.9}, fd_worst_rel={worst:.1e} over 50 instances, bad={bad}, under 1 min: {fast}"
        ),
    )
}

fn small_spec(seed: u64) -> ModelSpec {
    ModelSpec {
        base_channels: 4,
        depth: 3,
        psbm_placements: center_encoder_placements(3),
        seed,
        ..ModelSpec::default()
    }
}

fn trained_small_model() -> (Model32, trainer::FitOutcome<f32>, Vec<trainer::TrainSample<f32>>) {
    let data = synth_data::generate_samples(&SynthConfig { count: 24, size: 32, seed: 21, ..SynthConfig::default() })
        .expect("synthetic data");
    let samples = synth_data::to_train_samples::<f32>(&data);
    let mut m: Model32 = model::build(&small_spec(21)).expect("model");
    let cfg = TrainConfig { epochs: 5, warmup_epochs: 1, t_train: 4, eval_samples: 4, seed: 21, ..TrainConfig::default() };
    let out = trainer::fit(&mut m, &samples, &cfg, None).expect("training");
    (m, out, samples)
}

fn label_correction_sandwich() -> Verdict {
    // `fit` asserts `lower ≤ y ≤ upper` on every corrected label it builds;
    // a violation panics and fails this criterion.
    let (m, out, samples) = trained_small_model();
    let expected = 4 * samples.len() as u64 * 32 * 32;
    let mut after = 0;
    for (i, s) in samples.iter().enumerate() {
        let c = trainer::correct(&m, &s.image, &s.label, 4, &mut stream(99, Purpose::Masks, i as u64)).expect("correct");
        after += trainer::containment_violations(&s.label, &c.rough);
    }
    let ok = out.containment_checked_pixels == expected && after == 0;
    (
        ok,
        format!(
            "checked {} of {expected} corrected pixels during training with 0 violations; post-training violations={after}",
            out.containment_checked_pixels
        ),
    )
}

fn rough_bound_containment() -> Verdict {
    let (m, _, _) = trained_small_model();
    let suite = synth_data::generate_samples(&SynthConfig { count: 50, size: 32, seed: 77, ..SynthConfig::default() })
        .expect("synthetic data");
    let icfg = InferenceConfig { t: 8, ..InferenceConfig::default() };
    let (mut bad, mut boundary) = (0, 0);
    for (i, s) in suite.iter().enumerate() {
        let x = s.to_train_sample::<f32>().image;
        let r = infer_rough(&m, &x, &icfg, &mut stream(77, Purpose::Inference, i as u64)).expect("inference");
        bad += common::containment_violations(r.rough.lower(), r.rough.upper(), &r.partition);
        boundary += r.partition.boundary.count();
    }
    (bad == 0, format!("50 images, violations={bad}, boundary pixels={boundary}"))
}

fn map(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> ProbabilityMask<f64> {
    pm(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect())
}

fn confidence_monotonicity() -> Verdict {
    let grid = default_lambda_grid();
    let mut fixtures = vec![
        map(24, 24, |y, x| {
            let r = ((y as f64 - 12.0).powi(2) + (x as f64 - 12.0).powi(2)).sqrt();
            (1.0 - r / 10.0).clamp(0.0, 1.0)
        }),
        map(20, 40, |y, x| if (5..15).contains(&y) && (3..37).contains(&x) { 0.3 + 0.7 * (x as f64 / 40.0) } else { 0.0 }),
        map(30, 30, |y, x| if (y + x) % 7 == 0 && y < 25 { 0.9 } else if y.abs_diff(x) < 3 { 0.6 } else { 0.0 }),
    ];
    let mut r = from_seed(3);
    for _ in 0..20 {
        fixtures.push(pm(24, 24, (0..576).map(|_| r.random::<f64>().powi(3)).collect()));
    }
    let mut violations = 0;
    let mut curves = 0;
    for f in &fixtures {
        let report = confidence::grade(f, &commutator_standards(), 0.014, &grid, Policy::Or).expect("grade");
        for c in &report.components {
            curves += 1;
            for s in [&c.g_length_mm, &c.g_width_mm] {
                violations += s.windows(2).filter(|w| w[1] > w[0]).count();
            }
        }
    }

    // Bar whose columns fade linearly from the middle; at 0.05 mm/pix its
    // length drops through 1.5 mm at λ = 0.7.
    let bar = map(9, 61, |y, x| if (2..7).contains(&y) { (1.0 - 0.02 * (x as f64 - 30.0).abs()).max(0.0) } else { 0.0 });
    let pe = 0.05;
    let row = &bar.values()[4 * 61..5 * 61];
    let oracle = 100.0
        * linspace(0.0001, 1.0, 10_000)
            .into_iter()
            .filter(|&l| row.iter().filter(|&&p| p >= l).count() as f64 * pe >= 1.5)
            .fold(0.0f64, f64::max);
    let tin = Standard::new("Tin color", 1.5, 1.5).expect("standard");
    let conf = discrimination_confidence(&g_curve(&bar, (4, 30), &grid, pe).expect("curve"), &tin, Policy::Or);
    let ok = violations == 0 && curves > 0 && (conf - 70.0).abs() <= 2.0 && (conf - oracle).abs() <= 2.0;
    (
        ok,
        format!("{curves} g-curves, violations={violations}; crossing fixture={conf:.2}% (dense oracle {oracle:.2}%)"),
    )
}

struct E2eRun {
    outcomes: Vec<common::SeedOutcome>,
    elapsed: Duration,
}

/// Five-seed comparison shared by the two end-to-end criteria.
fn e2e_run() -> &'static E2eRun {
    static RUN: OnceLock<E2eRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = common::E2eConfig::default();
        let outcomes = (0..5).map(|seed| common::run_seed(&cfg, seed)).collect::<Vec<_>>();
        for o in &outcomes {
            println!(
                "    seed {}: recall_upper {:.3} vs {:.3}, precision_lower {:.3} vs {:.3}, iou {:.3} vs {:.3}, \
                 boundary_iou {:.3} (untrained {:.3}), containment violations {}, {:.0} s",
                o.seed,
                o.full.recall_upper,
                o.baseline.recall_upper,
                o.full.precision_lower,
                o.baseline.precision_lower,
                o.full.iou_half_halo,
                o.baseline.iou_half_halo,
                o.full.boundary_iou,
                o.untrained_boundary_iou,
                o.containment_violations,
                o.seconds,
            );
        }
        E2eRun { outcomes, elapsed: start.elapsed() }
    })
}

fn end_to_end_directional() -> Verdict {
    let run = e2e_run();
    let wins: Vec<u64> = run
        .outcomes
        .iter()
        .filter(|o| o.directional_win() && o.iou_within(0.02))
        .map(|o| o.seed)
        .collect();
    let fast = run.elapsed <= Duration::from_secs(20 * 60);
    (
        wins.len() >= 4 && fast,
        format!("winning seeds {wins:?} (need 4 of 5), total {:.0} s, under 20 min: {fast}", run.elapsed.as_secs_f64()),
    )
}

fn oracle_boundary_recovery() -> Verdict {
    let run = e2e_run();
    let scores: Vec<String> = run.outcomes.iter().map(|o| format!("{:.3}", o.full.boundary_iou)).collect();
    let ok = run.outcomes.iter().all(|o| o.full.boundary_iou >= 0.25);
    (ok, format!("boundary IoU per seed {scores:?} (need >= 0.25)"))
}

fn roughseg(dir: &Path, args: &[&str]) {
    let out = Command::new(env!("CARGO_BIN_EXE_roughseg"))
        .args(args)
        .current_dir(dir)
        .env_remove("ROUGHSEG_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).expect("readable dir") {
        let p = e.expect("entry").path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn reproducibility() -> Verdict {
    let run = |dir: &Path| {
        roughseg(dir, &["synth", "--seed", "5", "--count", "6", "--size", "32", "--out", "ds"]);
        roughseg(
            dir,
            &[
                "train", "--data", "ds", "--out", "tr", "--seed", "5", "--epochs", "2", "--warmup-epochs", "1",
                "--T-train", "2", "--base-channels", "4", "--depth", "3",
            ],
        );
        roughseg(dir, &["infer", "--checkpoint", "tr/checkpoint.bin", "--images", "ds/images", "--out", "inf", "--T", "4", "--seed", "5"]);
        roughseg(dir, &["eval", "--pred", "inf", "--labels", "ds/labels", "--truth", "ds/truth", "--out", "eval.json"]);
        roughseg(dir, &["grade", "--prob", "inf/probability", "--images", "ds/images", "--out", "gr"]);
    };
    let (a, b) = (tempfile::tempdir().expect("tmp"), tempfile::tempdir().expect("tmp"));
    run(a.path());
    run(b.path());
    let fa = files_under(a.path());
    let fb = files_under(b.path());
    let rel = |root: &Path, v: &[PathBuf]| v.iter().map(|p| p.strip_prefix(root).expect("under root").to_path_buf()).collect::<Vec<_>>();
    let names_a = rel(a.path(), &fa);
    if names_a != rel(b.path(), &fb) {
        return (false, "the two runs wrote different file sets".into());
    }
    let differing: Vec<String> = names_a
        .iter()
        .filter(|n| fs::read(a.path().join(n)).ok() != fs::read(b.path().join(n)).ok())
        .map(|n| n.display().to_string())
        .collect();
    (
        differing.is_empty(),
        format!("{} files compared across two runs, differing={differing:?}", names_a.len()),
    )
}

fn grading_pipeline() -> Verdict {
    let tin = &commutator_standards()[0];
    let grade_bar = |len: usize| {
        let prob = map(9, len + 8, |y, x| if (3..6).contains(&y) && (4..4 + len).contains(&x) { 1.0 } else { 0.0 });
        let r = confidence::grade(&prob, std::slice::from_ref(tin), 0.014, &default_lambda_grid(), Policy::Or).expect("grade");
        assert_eq!(r.components.len(), 1);
        let c = &r.components[0];
        (c.g_length_mm[0], c.confidence[0].confidence_pct)
    };
    let (long_mm, long_pct) = grade_bar(143);
    let (short_mm, short_pct) = grade_bar(70);
    let ok = tin.defect_class == "Tin color" && long_pct == 100.0 && short_pct == 0.0;
    (
        ok,
        format!("143 px = {long_mm:.3} mm -> {long_pct}%, 70 px = {short_mm:.3} mm -> {short_pct}% against {}", tin.defect_class),
    )
}
