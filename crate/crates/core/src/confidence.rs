//! Defect discrimination confidence.
//!
//! For a connected component of a probability map, `g(λ)` is the physical
//! size (length and width of the minimum-area rotated bounding rectangle) of
//! the component's `λ`-superlevel region. A factory threshold `Λ` maps to a
//! confidence:
//!
//! ```text
//! 0 %        the standard fails already at the lowest level
//! 100 %      the standard holds at λ = 1
//! 100·λ*     otherwise, λ* = largest level at which the standard holds
//! ```

use std::collections::VecDeque;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rough_core::ProbabilityMask;
use crate::scalar::Scalar;

/// Thresholds for one defect class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standard {
    #[serde(rename = "class")]
    pub defect_class: String,
    pub length_mm: f64,
    pub width_mm: f64,
}

impl Standard {
    pub fn new(defect_class: impl Into<String>, length_mm: f64, width_mm: f64) -> Result<Self> {
        let s = Self {
            defect_class: defect_class.into(),
            length_mm,
            width_mm,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("length_mm", self.length_mm), ("width_mm", self.width_mm)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::param(format!(
                    "standard '{}': {name} must be positive, got {v}",
                    self.defect_class
                )));
            }
        }
        Ok(())
    }
}

/// Motor-commutator thresholds (length, width in mm).
pub fn commutator_standards() -> Vec<Standard> {
    [
        ("Tin color", 1.5, 1.5),
        ("Scratches", 2.0, 2.0),
        ("Indentations", 0.80, 0.30),
        ("Smudge", 0.30, 0.14),
    ]
    .into_iter()
    .map(|(c, l, w)| Standard {
        defect_class: c.into(),
        length_mm: l,
        width_mm: w,
    })
    .collect()
}

pub const COMMUTATOR_PIXEL_EQUIVALENT_MM: f64 = 0.014;

/// How length and width thresholds combine.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// Either dimension reaching its threshold meets the standard.
    #[default]
    Or,
    /// Both dimensions must reach their thresholds.
    And,
}

/// `n` evenly spaced levels from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![hi],
        _ => (0..n)
            .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
            .collect(),
    }
}

/// 101 levels from 0.01 to 1.
pub fn default_lambda_grid() -> Vec<f64> {
    linspace(0.01, 1.0, 101)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda <= 1.0 {
        Ok(())
    } else {
        Err(Error::param(format!("lambda {lambda} outside (0, 1]")))
    }
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::param("lambda grid is empty"));
    }
    grid.iter().try_for_each(|&l| check_lambda(l))?;
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("lambda grid must be strictly ascending"));
    }
    Ok(())
}

const NEIGHBOURS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected flood fill of `inside` from `seed`; returns sorted indices.
fn flood(h: usize, w: usize, seed: usize, inside: impl Fn(usize) -> bool, seen: &mut [bool]) -> Vec<usize> {
    let mut out = vec![seed];
    seen[seed] = true;
    let mut queue = VecDeque::from([seed]);
    while let Some(i) = queue.pop_front() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for (dy, dx) in NEIGHBOURS {
            let (yy, xx) = (y + dy, x + dx);
            if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                continue;
            }
            let j = yy as usize * w + xx as usize;
            if !seen[j] && inside(j) {
                seen[j] = true;
                out.push(j);
                queue.push_back(j);
            }
        }
    }
    out.sort_unstable();
    out
}

/// 8-connected components of `{p ≥ λ}` as sorted row-major pixel indices,
/// ordered by their first pixel.
pub fn superlevel_components<S: Scalar>(prob: &ProbabilityMask<S>, lambda: f64) -> Result<Vec<Vec<usize>>> {
    check_lambda(lambda)?;
    let (h, w) = (prob.height(), prob.width());
    let v = prob.values();
    let inside = |i: usize| v[i].to_f64_lossy() >= lambda;
    let mut seen = vec![false; v.len()];
    let mut comps = Vec::new();
    for i in 0..v.len() {
        if !seen[i] && inside(i) {
            comps.push(flood(h, w, i, inside, &mut seen));
        }
    }
    Ok(comps)
}

/// Component of `{p ≥ λ}` containing `anchor`; empty if the anchor is below λ.
fn component_at<S: Scalar>(prob: &ProbabilityMask<S>, lambda: f64, anchor: usize) -> Vec<usize> {
    let v = prob.values();
    if v[anchor].to_f64_lossy() < lambda {
        return Vec::new();
    }
    let mut seen = vec![false; v.len()];
    flood(prob.height(), prob.width(), anchor, |i| v[i].to_f64_lossy() >= lambda, &mut seen)
}

type Pt = (i64, i64);

fn cross(o: Pt, a: Pt, b: Pt) -> i64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull without collinear points.
pub(crate) fn convex_hull(mut pts: Vec<Pt>) -> Vec<Pt> {
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<Pt> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &Pt>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

/// Corners of every pixel, as `(x, y)` lattice points.
fn pixel_corners(pixels: &[usize], width: usize) -> Vec<Pt> {
    let mut pts = Vec::with_capacity(pixels.len() * 4);
    for &i in pixels {
        let (y, x) = ((i / width) as i64, (i % width) as i64);
        pts.extend([(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
    }
    pts
}

/// `(long side, short side)` of the minimum-area rectangle enclosing a convex
/// polygon, by rotating calipers over its edges.
pub(crate) fn min_area_rect(hull: &[Pt]) -> (f64, f64) {
    let n = hull.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    if n < 3 {
        let d = if n == 2 {
            (((hull[1].0 - hull[0].0).pow(2) + (hull[1].1 - hull[0].1).pow(2)) as f64).sqrt()
        } else {
            0.0
        };
        return (d, 0.0);
    }
    let p = |i: usize| {
        let (x, y) = hull[i % n];
        (x as f64, y as f64)
    };
    let dot = |a: (f64, f64), b: (f64, f64)| a.0 * b.0 + a.1 * b.1;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let (mut right, mut top, mut left) = (0usize, 0usize, 0usize);
    for i in 0..n {
        let (a, b) = (p(i), p(i + 1));
        let len = ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt();
        let e = ((b.0 - a.0) / len, (b.1 - a.1) / len);
        let nrm = (-e.1, e.0);
        let rel = |j: usize| {
            let q = p(j);
            (q.0 - a.0, q.1 - a.1)
        };
        if i == 0 {
            right = (0..n).max_by(|&x, &y| dot(rel(x), e).total_cmp(&dot(rel(y), e))).expect("n > 0");
            top = (0..n).max_by(|&x, &y| dot(rel(x), nrm).total_cmp(&dot(rel(y), nrm))).expect("n > 0");
            left = (0..n).min_by(|&x, &y| dot(rel(x), e).total_cmp(&dot(rel(y), e))).expect("n > 0");
        } else {
            while dot(rel(right + 1), e) > dot(rel(right), e) + 1e-9 {
                right += 1;
            }
            while dot(rel(top + 1), nrm) > dot(rel(top), nrm) + 1e-9 {
                top += 1;
            }
            while dot(rel(left + 1), e) < dot(rel(left), e) - 1e-9 {
                left += 1;
            }
        }
        let along = dot(rel(right), e) - dot(rel(left), e);
        let across = dot(rel(top), nrm).abs();
        let area = along * across;
        if area < best.0 - 1e-9 {
            best = (area, along, across);
        }
    }
    (best.1.max(best.2), best.1.min(best.2))
}

/// `(length, width)` in pixels of a component; a single pixel is `1 × 1`.
pub fn component_dimensions(pixels: &[usize], width: usize) -> (f64, f64) {
    if pixels.is_empty() {
        return (0.0, 0.0);
    }
    min_area_rect(&convex_hull(pixel_corners(pixels, width)))
}

/// Dimension curves of one component over a λ grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GCurve {
    pub lambda: Vec<f64>,
    pub length_mm: Vec<f64>,
    pub width_mm: Vec<f64>,
}

/// Raw per-level dimensions of the superlevel component containing `anchor`
/// (`(y, x)`). These need not be monotone: the longer side of a subset's
/// minimum rectangle can exceed the superset's.
pub fn g_curve_raw<S: Scalar>(
    prob: &ProbabilityMask<S>,
    anchor: (usize, usize),
    lambda_grid: &[f64],
    pixel_equivalent_mm: f64,
) -> Result<GCurve> {
    check_grid(lambda_grid)?;
    if !(pixel_equivalent_mm > 0.0) {
        return Err(Error::param("pixel equivalent must be positive"));
    }
    let (ay, ax) = anchor;
    if ay >= prob.height() || ax >= prob.width() {
        return Err(Error::param(format!("anchor ({ay}, {ax}) outside the map")));
    }
    let a = ay * prob.width() + ax;
    if prob.values()[a].to_f64_lossy() < lambda_grid[0] {
        return Err(Error::param(format!(
            "anchor ({ay}, {ax}) lies outside every component at lambda {}",
            lambda_grid[0]
        )));
    }
    let mut curve = GCurve {
        lambda: lambda_grid.to_vec(),
        length_mm: Vec::with_capacity(lambda_grid.len()),
        width_mm: Vec::with_capacity(lambda_grid.len()),
    };
    for &l in lambda_grid {
        let comp = component_at(prob, l, a);
        let (len, wid) = component_dimensions(&comp, prob.width());
        curve.length_mm.push(len * pixel_equivalent_mm);
        curve.width_mm.push(wid * pixel_equivalent_mm);
    }
    Ok(curve)
}

/// Non-increasing envelope `g(λ) = max over λ' ≥ λ of g_raw(λ')`.
pub fn g_curve<S: Scalar>(
    prob: &ProbabilityMask<S>,
    anchor: (usize, usize),
    lambda_grid: &[f64],
    pixel_equivalent_mm: f64,
) -> Result<GCurve> {
    let mut c = g_curve_raw(prob, anchor, lambda_grid, pixel_equivalent_mm)?;
    for v in [&mut c.length_mm, &mut c.width_mm] {
        for i in (0..v.len().saturating_sub(1)).rev() {
            v[i] = v[i].max(v[i + 1]);
        }
    }
    Ok(c)
}

enum Crossing {
    Never,
    Always,
    At(f64),
}

fn crossing(lambda: &[f64], g: &[f64], threshold: f64) -> Crossing {
    let last = g.len() - 1;
    if g[0] < threshold {
        return Crossing::Never;
    }
    if g[last] >= threshold {
        return if lambda[last] >= 1.0 {
            Crossing::Always
        } else {
            Crossing::At(lambda[last])
        };
    }
    let i = g.iter().rposition(|&v| v >= threshold).expect("g[0] meets");
    let (g0, g1) = (g[i], g[i + 1]);
    let t = if g0 > g1 { (g0 - threshold) / (g0 - g1) } else { 0.0 };
    Crossing::At(lambda[i] + t * (lambda[i + 1] - lambda[i]))
}

/// Confidence in percent that the component is a defect under `standard`.
pub fn discrimination_confidence(curve: &GCurve, standard: &Standard, policy: Policy) -> f64 {
    let dims = [
        crossing(&curve.lambda, &curve.length_mm, standard.length_mm),
        crossing(&curve.lambda, &curve.width_mm, standard.width_mm),
    ];
    let level = |c: &Crossing| match c {
        Crossing::Never => None,
        Crossing::Always => Some(1.0),
        Crossing::At(l) => Some(*l),
    };
    let combined = match policy {
        Policy::Or => dims.iter().filter_map(level).fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l)))),
        Policy::And => dims.iter().map(level).collect::<Option<Vec<f64>>>().map(|v| v.into_iter().fold(1.0, f64::min)),
    };
    match combined {
        None => 0.0,
        Some(l) if l >= 1.0 => 100.0,
        Some(l) => 100.0 * l,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StandardResult {
    #[serde(rename = "class")]
    pub defect_class: String,
    pub length_mm: f64,
    pub width_mm: f64,
    pub confidence_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component_id: usize,
    /// `[y, x]` of the component's most probable pixel.
    pub anchor: [usize; 2],
    pub pixel_count: usize,
    pub pixel_equivalent_mm: f64,
    pub lambda_grid: Vec<f64>,
    pub g_length_mm: Vec<f64>,
    pub g_width_mm: Vec<f64>,
    pub confidence: Vec<StandardResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradeReport {
    pub pixel_equivalent_mm: f64,
    pub policy: Policy,
    pub components: Vec<ComponentReport>,
}

/// One report per component of the lowest-level superlevel set.
pub fn grade<S: Scalar>(
    prob: &ProbabilityMask<S>,
    standards: &[Standard],
    pixel_equivalent_mm: f64,
    lambda_grid: &[f64],
    policy: Policy,
) -> Result<GradeReport> {
    check_grid(lambda_grid)?;
    standards.iter().try_for_each(Standard::validate)?;
    let w = prob.width();
    let v = prob.values();
    let mut components = Vec::new();
    for (id, comp) in superlevel_components(prob, lambda_grid[0])?.into_iter().enumerate() {
        let anchor = *comp
            .iter()
            .max_by(|&&a, &&b| v[a].partial_cmp(&v[b]).expect("finite").then(b.cmp(&a)))
            .expect("components are non-empty");
        let curve = g_curve(prob, (anchor / w, anchor % w), lambda_grid, pixel_equivalent_mm)?;
        let confidence = standards
            .iter()
            .map(|s| StandardResult {
                defect_class: s.defect_class.clone(),
                length_mm: s.length_mm,
                width_mm: s.width_mm,
                confidence_pct: discrimination_confidence(&curve, s, policy),
            })
            .collect();
        components.push(ComponentReport {
            component_id: id,
            anchor: [anchor / w, anchor % w],
            pixel_count: comp.len(),
            pixel_equivalent_mm,
            lambda_grid: curve.lambda,
            g_length_mm: curve.length_mm,
            g_width_mm: curve.width_mm,
            confidence,
        });
    }
    Ok(GradeReport {
        pixel_equivalent_mm,
        policy,
        components,
    })
}

/// `base` (grayscale, row-major in `[0, 1]`) with the outline of every
/// component of `{p ≥ λ}` drawn in red.
pub fn render_overlay<S: Scalar>(base: &[f32], prob: &ProbabilityMask<S>, lambda: f64) -> Result<RgbImage> {
    let (h, w) = (prob.height(), prob.width());
    if base.len() != h * w {
        return Err(Error::shape(format!("{h}x{w} base image"), format!("{} pixels", base.len())));
    }
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let g = (base[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([g, g, g])
    });
    let mut member = vec![false; h * w];
    for comp in superlevel_components(prob, lambda)? {
        comp.iter().for_each(|&i| member[i] = true);
    }
    for i in (0..h * w).filter(|&i| member[i]) {
        let (y, x) = (i / w, i % w);
        let edge = y == 0
            || x == 0
            || y + 1 == h
            || x + 1 == w
            || !member[i - w]
            || !member[i + w]
            || !member[i - 1]
            || !member[i + 1];
        if edge {
            img.put_pixel(x as u32, y as u32, Rgb([255, 0, 0]));
        }
    }
    Ok(img)
}
