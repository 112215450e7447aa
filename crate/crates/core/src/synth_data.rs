//! Synthetic defect images with known ground truth and inconsistent labels.
//!
//! Every defect has a certain *core* and an ambiguous *halo* ring whose
//! contrast fades with distance from the core. Simulated annotators label the
//! core plus a bias-dependent part of the halo, so the same kind of region is
//! marked defective in some samples and normal in others.
//!
//! Dataset layout:
//!
//! ```text
//! images/NNNN.png       8-bit grayscale input
//! labels/NNNN.png       noisy annotator label (0 / 255)
//! truth/core/NNNN.png   true lower approximation
//! truth/halo/NNNN.png   true boundary region
//! manifest.json
//! ```

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, save_png, write_json};
use crate::rng::{derive_seed, from_seed, stream, Purpose, Rng};
use crate::rough_core::BinaryMask;
use crate::scalar::Scalar;
use crate::trainer::TrainSample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub count: usize,
    /// Side length of the square images.
    pub size: usize,
    /// Inclusive `[min, max]`.
    pub defects_per_image: [usize; 2],
    /// Inclusive `[min, max]` in pixels.
    pub halo_width: [usize; 2],
    pub annotator_bias_range: [f64; 2],
    /// Amplitude of the background texture.
    pub texture_scale: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            size: 64,
            defects_per_image: [1, 2],
            halo_width: [3, 6],
            annotator_bias_range: [0.1, 0.9],
            texture_scale: 0.3,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.size % 8 != 0 {
            return Err(Error::param(format!("size {} must be a positive multiple of 8", self.size)));
        }
        let [dmin, dmax] = self.defects_per_image;
        if dmin > dmax {
            return Err(Error::param("defects_per_image range is empty"));
        }
        let [hmin, hmax] = self.halo_width;
        if hmin > hmax {
            return Err(Error::param("halo_width range is empty"));
        }
        let [bmin, bmax] = self.annotator_bias_range;
        if !(0.0 <= bmin && bmin <= bmax && bmax <= 1.0) {
            return Err(Error::param("annotator_bias_range must be an ordered range within [0, 1]"));
        }
        if !(self.texture_scale >= 0.0 && self.texture_scale <= 1.0) {
            return Err(Error::param("texture_scale must lie in [0, 1]"));
        }
        if 2 * (hmax + 8) >= self.size && dmax > 0 {
            return Err(Error::param(format!(
                "size {} too small for halo width {hmax}",
                self.size
            )));
        }
        Ok(())
    }
}

/// Image with exact core and halo masks.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub size: usize,
    /// Row-major intensities, quantized to multiples of 1/255.
    pub image: Vec<f32>,
    pub core: BinaryMask,
    pub halo: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub image: Vec<f32>,
    pub core: BinaryMask,
    pub halo: BinaryMask,
    pub noisy_label: BinaryMask,
    pub annotator_bias: f64,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn size(&self) -> usize {
        self.core.height()
    }

    pub fn to_train_sample<S: Scalar>(&self) -> TrainSample<S> {
        let n = self.size();
        TrainSample {
            image: crate::model::image_tensor(n, n, &self.image).expect("square raster"),
            label: self.noisy_label.clone(),
        }
    }
}

const DEFECT_LEVEL: f32 = 0.12;
const BACKGROUND_LEVEL: f64 = 0.6;
const PIXEL_NOISE: f64 = 0.02;
const ANNOTATOR_NOISE: f32 = 0.5;

/// Smooth noise in `[0, 1]`: random values on a grid of `cell`-pixel cells,
/// interpolated bilinearly with a smoothstep profile.
fn value_noise(size: usize, cell: usize, rng: &mut Rng) -> Vec<f32> {
    let nodes = size / cell + 2;
    let grid: Vec<f32> = (0..nodes * nodes).map(|_| rng.random::<f32>()).collect();
    let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let gy = y as f32 / cell as f32;
        let (y0, ty) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..size {
            let gx = x as f32 / cell as f32;
            let (x0, tx) = (gx.floor() as usize, smooth(gx.fract()));
            let at = |yy: usize, xx: usize| grid[yy * nodes + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * size + x] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

fn texture(size: usize, rng: &mut Rng) -> Vec<f32> {
    let mut acc = vec![0.0f32; size * size];
    let mut amp = 1.0;
    let mut total = 0.0;
    for cell in [16usize, 8, 4] {
        let cell = cell.min(size.max(1));
        for (a, v) in acc.iter_mut().zip(value_noise(size, cell, rng)) {
            *a += amp * v;
        }
        total += amp;
        amp *= 0.5;
    }
    acc.iter_mut().for_each(|a| *a /= total);
    acc
}

fn raster_defect(size: usize, margin: usize, rng: &mut Rng) -> BinaryMask {
    let span = (margin as f64, (size - margin) as f64);
    let cy = rng.random_range(span.0..span.1);
    let cx = rng.random_range(span.0..span.1);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = theta.sin_cos();
    let mut mask = if rng.random_bool(0.7) {
        let a = rng.random_range(2.5..7.0);
        let b = rng.random_range(2.0..a);
        BinaryMask::from_fn(size, size, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        })
    } else {
        let half_len = rng.random_range(6.0..14.0);
        let half_w = rng.random_range(0.8..1.5);
        BinaryMask::from_fn(size, size, |y, x| {
            let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            u.abs() <= half_len && v.abs() <= half_w
        })
    };
    mask.set(cy as usize, cx as usize, true);
    mask
}

/// Euclidean distance from `(y, x)` to the nearest set pixel of `mask`,
/// searching square rings outward. `None` if the mask is empty.
fn nearest_distance(mask: &BinaryMask, y: usize, x: usize) -> Option<f64> {
    let (h, w) = (mask.height() as isize, mask.width() as isize);
    let (y, x) = (y as isize, x as isize);
    let mut best = f64::INFINITY;
    for r in 0..h.max(w) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dy.abs() != r && dx.abs() != r {
                    continue;
                }
                let (yy, xx) = (y + dy, x + dx);
                if yy < 0 || xx < 0 || yy >= h || xx >= w {
                    continue;
                }
                if mask.get(yy as usize, xx as usize) {
                    best = best.min(((dy * dy + dx * dx) as f64).sqrt());
                }
            }
        }
        // Ring r + 1 is at least r + 1 away.
        if best <= (r + 1) as f64 {
            return Some(best);
        }
    }
    best.is_finite().then_some(best)
}

/// Relative position of each halo pixel across its ring: `d_core / (d_core +
/// d_outside)`, in `(0, 1)`. Zero off the halo.
pub fn halo_depth(core: &BinaryMask, halo: &BinaryMask) -> Vec<f32> {
    let outside = core.or(halo).not();
    let mut depth = vec![0.0; core.len()];
    for y in 0..core.height() {
        for x in 0..core.width() {
            if !halo.get(y, x) {
                continue;
            }
            let dc = nearest_distance(core, y, x).unwrap_or(1.0);
            let edge = (y.min(x).min(core.height() - 1 - y).min(core.width() - 1 - x) + 1) as f64;
            let doff = nearest_distance(&outside, y, x).unwrap_or(edge);
            depth[y * core.width() + x] = (dc / (dc + doff)) as f32;
        }
    }
    depth
}

/// Core plus the inner part of the halo with depth at most `max_depth`.
pub fn core_with_halo_fraction(core: &BinaryMask, halo: &BinaryMask, max_depth: f32) -> BinaryMask {
    let depth = halo_depth(core, halo);
    let w = core.width();
    BinaryMask::from_fn(core.height(), w, |y, x| {
        core.get(y, x) || (halo.get(y, x) && depth[y * w + x] <= max_depth)
    })
}

pub fn generate_image(cfg: &SynthConfig, rng: &mut Rng) -> Result<GeneratedImage> {
    cfg.validate()?;
    let n = cfg.size;
    let tex = texture(n, rng);
    let count = rng.random_range(cfg.defects_per_image[0]..=cfg.defects_per_image[1]);
    let mut core = BinaryMask::zeros(n, n);
    let mut reach = BinaryMask::zeros(n, n);
    for _ in 0..count {
        let hw = rng.random_range(cfg.halo_width[0]..=cfg.halo_width[1]);
        let defect = raster_defect(n, hw + 8, rng);
        let (mut y0, mut y1, mut x0, mut x1) = (n, 0, n, 0);
        for (i, _) in defect.values().iter().enumerate().filter(|(_, &v)| v == 1) {
            let (y, x) = (i / n, i % n);
            (y0, y1, x0, x1) = (y0.min(y), y1.max(y), x0.min(x), x1.max(x));
        }
        for y in y0.saturating_sub(hw)..(y1 + hw + 1).min(n) {
            for x in x0.saturating_sub(hw)..(x1 + hw + 1).min(n) {
                if !defect.get(y, x) && !reach.get(y, x) {
                    let d = nearest_distance(&defect, y, x).expect("defect is non-empty");
                    if d <= hw as f64 {
                        reach.set(y, x, true);
                    }
                }
            }
        }
        core = core.or(&defect);
    }
    let halo = reach.minus(&core);
    let depth = halo_depth(&core, &halo);
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("valid sigma");
    let image = (0..n * n)
        .map(|i| {
            let bg = (BACKGROUND_LEVEL + cfg.texture_scale * (tex[i] as f64 - 0.5)) as f32;
            let alpha = if core.values()[i] == 1 {
                1.0
            } else if halo.values()[i] == 1 {
                1.0 - depth[i]
            } else {
                0.0
            };
            let v = bg * (1.0 - alpha) + DEFECT_LEVEL * alpha + noise.sample(rng) as f32;
            (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
        })
        .collect();
    Ok(GeneratedImage {
        size: n,
        image,
        core,
        halo,
    })
}

/// Annotator label: the core plus the `round(bias · |halo|)` halo pixels with
/// the lowest `depth + noise` score, where the noise is spatially smooth.
pub fn simulate_annotator(core: &BinaryMask, halo: &BinaryMask, bias: f64, rng: &mut Rng) -> Result<BinaryMask> {
    core.ensure_same_shape(halo)?;
    if !(0.0..=1.0).contains(&bias) {
        return Err(Error::param(format!("annotator bias {bias} outside [0, 1]")));
    }
    if !core.is_disjoint(halo) {
        return Err(Error::param("core and halo overlap"));
    }
    let (h, w) = (core.height(), core.width());
    let side = h.max(w).next_multiple_of(4);
    let noise = value_noise(side, 4, rng);
    let depth = halo_depth(core, halo);
    let mut ranked: Vec<(f32, usize)> = halo
        .values()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(i, _)| {
            let (y, x) = (i / w, i % w);
            (depth[i] + ANNOTATOR_NOISE * (noise[y * side + x] - 0.5), i)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let take = (bias * ranked.len() as f64).round() as usize;
    let mut label = core.clone();
    for &(_, i) in &ranked[..take] {
        label.set(i / w, i % w, true);
    }
    Ok(label)
}

/// Sample `index` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<SyntheticSample> {
    let seed = derive_seed(cfg.seed, Purpose::Geometry, index as u64);
    let g = generate_image(cfg, &mut from_seed(seed))?;
    let mut arng = stream(cfg.seed, Purpose::Annotators, index as u64);
    let [lo, hi] = cfg.annotator_bias_range;
    let bias = if hi > lo { arng.random_range(lo..=hi) } else { lo };
    let noisy_label = simulate_annotator(&g.core, &g.halo, bias, &mut arng)?;
    Ok(SyntheticSample {
        image: g.image,
        core: g.core,
        halo: g.halo,
        noisy_label,
        annotator_bias: bias,
        seed,
    })
}

pub fn generate_samples(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    (0..cfg.count).map(|i| generate_sample(cfg, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub annotator_bias: f64,
    pub core_pixels: usize,
    pub halo_pixels: usize,
    pub label_pixels: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub samples: Vec<ManifestEntry>,
}

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const TRUTH_CORE_DIR: &str = "truth/core";
pub const TRUTH_HALO_DIR: &str = "truth/halo";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn file_name(index: usize) -> String {
    format!("{index:04}.png")
}

pub fn raster_to_png(size: usize, pixels: &[f32]) -> image::GrayImage {
    let data = pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    image::GrayImage::from_raw(size as u32, size as u32, data).expect("square raster")
}

/// Writes the dataset under `dir` and returns its manifest.
pub fn generate_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    for sub in [IMAGES_DIR, LABELS_DIR, TRUTH_CORE_DIR, TRUTH_HALO_DIR] {
        create_dir(&dir.join(sub))?;
    }
    let mut samples = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let s = generate_sample(cfg, i)?;
        let name = file_name(i);
        save_png(&dir.join(IMAGES_DIR).join(&name), &raster_to_png(cfg.size, &s.image))?;
        s.noisy_label.save_png(dir.join(LABELS_DIR).join(&name))?;
        s.core.save_png(dir.join(TRUTH_CORE_DIR).join(&name))?;
        s.halo.save_png(dir.join(TRUTH_HALO_DIR).join(&name))?;
        samples.push(ManifestEntry {
            file: name,
            seed: s.seed,
            annotator_bias: s.annotator_bias,
            core_pixels: s.core.count(),
            halo_pixels: s.halo.count(),
            label_pixels: s.noisy_label.count(),
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        samples,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// SHA-256 of the manifest file.
pub fn manifest_hash(dir: &Path) -> Result<String> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

/// Grayscale image and its binary mask, loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedPair {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub image: Vec<f32>,
    pub label: BinaryMask,
}

impl LoadedPair {
    pub fn to_train_sample<S: Scalar>(&self) -> Result<TrainSample<S>> {
        Ok(TrainSample {
            image: crate::model::image_tensor(self.height, self.width, &self.image)?,
            label: self.label.clone(),
        })
    }
}

/// Sorted `*.png` file names in `dir`.
pub fn png_names(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(dir, e))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_gray(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    Ok((h as usize, w as usize, g.into_raw().into_iter().map(|v| v as f32 / 255.0).collect()))
}

/// Generic image + mask folder loader: every PNG in `image_dir` paired with the
/// same file name in `label_dir`.
pub fn load_pairs(image_dir: &Path, label_dir: &Path) -> Result<Vec<LoadedPair>> {
    let names = png_names(image_dir)?;
    let mut missing: Vec<PathBuf> = Vec::new();
    let mut out = Vec::with_capacity(names.len());
    for name in names {
        let lp = label_dir.join(&name);
        if !lp.exists() {
            missing.push(lp);
            continue;
        }
        let (h, w, image) = load_gray(&image_dir.join(&name))?;
        let label = BinaryMask::load_png(&lp)?;
        if (label.height(), label.width()) != (h, w) {
            return Err(Error::shape(format!("{h}x{w} label for {name}"), format!("{}x{}", label.height(), label.width())));
        }
        out.push(LoadedPair {
            name,
            height: h,
            width: w,
            image,
            label,
        });
    }
    if let Some(first) = missing.first() {
        return Err(Error::param(format!(
            "{} image(s) without a label, first missing: {}",
            missing.len(),
            first.display()
        )));
    }
    Ok(out)
}

/// Training pairs of a generated dataset. Only `images/` and `labels/` are
/// read; the `truth/` tree stays untouched.
pub fn load_training_set(dir: &Path) -> Result<Vec<LoadedPair>> {
    load_pairs(&dir.join(IMAGES_DIR), &dir.join(LABELS_DIR))
}

/// True `(core, halo)` masks for one file of a generated dataset.
pub fn load_truth(dir: &Path, name: &str) -> Result<(BinaryMask, BinaryMask)> {
    Ok((
        BinaryMask::load_png(dir.join(TRUTH_CORE_DIR).join(name))?,
        BinaryMask::load_png(dir.join(TRUTH_HALO_DIR).join(name))?,
    ))
}

/// Convenience for in-memory pipelines.
pub fn to_train_samples<S: Scalar>(samples: &[SyntheticSample]) -> Vec<TrainSample<S>> {
    samples.iter().map(|s| s.to_train_sample()).collect()
}
