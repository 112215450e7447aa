//! Pixel-level rough-set representation of anomaly regions.
//!
//! A [`ProbabilityMask`] holds the per-pixel probability that a pixel is
//! anomalous. Its lower approximation contains the pixels that are certainly
//! anomalous (probability 1), its upper approximation the pixels that possibly
//! are (probability > 0). Every pixel is its own elementary set, so the
//! approximations reduce to thresholds. Because probabilities come from float
//! averaging, both thresholds are relaxed by a tolerance `tol`.
//!
//! File formats: a [`BinaryMask`] is an 8-bit grayscale PNG holding 0 and 255;
//! a [`ProbabilityMask`] is a 16-bit grayscale PNG holding `round(p * 65535)`.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default tolerance for the `v = 1` / `v > 0` thresholds.
pub const DEFAULT_TOL: f64 = 1e-6;

/// H×W raster of anomaly probabilities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMask<S> {
    height: usize,
    width: usize,
    values: Vec<S>,
}

impl<S: Scalar> ProbabilityMask<S> {
    pub fn new(height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some((i, v)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v >= S::zero() && **v <= S::one()))
        {
            return Err(Error::param(format!(
                "probability at index {i} is {v}, outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    /// Build from values that are clamped into `[0, 1]`; NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, values: Vec<S>) -> Result<Self> {
        let values = values
            .into_iter()
            .map(|v| if v.is_nan() { S::zero() } else { v.max(S::zero()).min(S::one()) })
            .collect();
        Self::new(height, width, values)
    }

    pub fn filled(height: usize, width: usize, value: S) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }

    pub fn get(&self, y: usize, x: usize) -> S {
        self.values[y * self.width + x]
    }

    pub fn max_value(&self) -> S {
        self.values.iter().copied().fold(S::zero(), S::max)
    }

    /// Pixels with `p >= threshold`.
    pub fn threshold(&self, threshold: S) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| u8::from(v >= threshold)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> ProbabilityMask<T> {
        ProbabilityMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|v| T::lit(v.to_f64_lossy())).collect(),
        }
    }

    pub fn same_shape<T>(&self, other: &ProbabilityMask<T>) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn to_png16(&self) -> ImageBuffer<Luma<u16>, Vec<u16>> {
        let data = self
            .values
            .iter()
            .map(|v| (v.to_f64_lossy() * 65535.0).round() as u16)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::save_png(path, &self.to_png16())
    }

    /// Loads a grayscale PNG; 8-bit inputs are rescaled by 255, 16-bit by 65535.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let g = img.to_luma16();
        let (w, h) = g.dimensions();
        let values = g
            .into_raw()
            .into_iter()
            .map(|v| S::lit(v as f64 / 65535.0))
            .collect();
        Self::new(h as usize, w as usize, values)
    }
}

/// H×W raster with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        check_dims(height, width, values.len())?;
        if let Some(i) = values.iter().position(|&v| v > 1) {
            return Err(Error::param(format!(
                "binary mask value at index {i} is {}, expected 0 or 1",
                values[i]
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![1; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                values.push(u8::from(f(y, x)));
            }
        }
        Self {
            height,
            width,
            values,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.values[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.values[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|&v| v as usize).sum()
    }

    pub fn same_shape(&self, other: &BinaryMask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn ensure_same_shape(&self, other: &BinaryMask) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ))
        }
    }

    fn zip_with(&self, other: &BinaryMask, f: impl Fn(u8, u8) -> u8) -> BinaryMask {
        assert!(self.same_shape(other), "binary mask shapes differ");
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn and(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn or(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a | b)
    }

    /// Pixels in `self` but not in `other`.
    pub fn minus(&self, other: &BinaryMask) -> BinaryMask {
        self.zip_with(other, |a, b| a & (1 - b))
    }

    pub fn not(&self) -> BinaryMask {
        BinaryMask {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| 1 - v).collect(),
        }
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.same_shape(other) && self.values.iter().zip(&other.values).all(|(&a, &b)| a <= b)
    }

    pub fn is_disjoint(&self, other: &BinaryMask) -> bool {
        self.values.iter().zip(&other.values).all(|(&a, &b)| a & b == 0)
    }

    pub fn to_probability<S: Scalar>(&self) -> ProbabilityMask<S> {
        ProbabilityMask {
            height: self.height,
            width: self.width,
            values: self
                .values
                .iter()
                .map(|&v| if v == 1 { S::one() } else { S::zero() })
                .collect(),
        }
    }

    pub fn to_png8(&self) -> GrayImage {
        let data = self.values.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, data)
            .expect("buffer matches dimensions")
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        crate::io::save_png(path, &self.to_png8())
    }

    /// Loads a grayscale PNG; pixels at or above mid-gray are set.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let g = img.to_luma8();
        let (w, h) = g.dimensions();
        let values = g.into_raw().into_iter().map(|v| u8::from(v >= 128)).collect();
        Self::new(h as usize, w as usize, values)
    }
}

/// Lower/upper approximation pair with `lower ⊆ upper`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RoughLabel {
    lower: BinaryMask,
    upper: BinaryMask,
}

impl RoughLabel {
    pub fn new(lower: BinaryMask, upper: BinaryMask) -> Result<Self> {
        lower.ensure_same_shape(&upper)?;
        if !lower.is_subset_of(&upper) {
            return Err(Error::param("lower approximation is not contained in upper"));
        }
        Ok(Self { lower, upper })
    }

    pub fn crisp(mask: BinaryMask) -> Self {
        Self {
            lower: mask.clone(),
            upper: mask,
        }
    }

    pub fn lower(&self) -> &BinaryMask {
        &self.lower
    }

    pub fn upper(&self) -> &BinaryMask {
        &self.upper
    }

    pub fn boundary(&self) -> BinaryMask {
        self.upper.minus(&self.lower)
    }

    /// Anomaly = lower, boundary = upper − lower, normal = complement of upper.
    pub fn partition(&self) -> RegionPartition {
        RegionPartition {
            anomaly: self.lower.clone(),
            boundary: self.boundary(),
            normal: self.upper.not(),
        }
    }

    pub fn to_soft<S: Scalar>(&self) -> SoftRoughLabel<S> {
        SoftRoughLabel {
            lower: self.lower.to_probability(),
            upper: self.upper.to_probability(),
        }
    }
}

/// Rough label whose bounds may take any value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftRoughLabel<S> {
    lower: ProbabilityMask<S>,
    upper: ProbabilityMask<S>,
}

impl<S: Scalar> SoftRoughLabel<S> {
    pub fn new(lower: ProbabilityMask<S>, upper: ProbabilityMask<S>) -> Result<Self> {
        if !lower.same_shape(&upper) {
            return Err(Error::shape(
                format!("{}x{}", lower.height(), lower.width()),
                format!("{}x{}", upper.height(), upper.width()),
            ));
        }
        if let Some(i) = lower
            .values()
            .iter()
            .zip(upper.values())
            .position(|(l, u)| l > u)
        {
            return Err(Error::param(format!(
                "soft rough label violates lower <= upper at pixel {i}"
            )));
        }
        Ok(Self { lower, upper })
    }

    pub fn crisp(mask: &BinaryMask) -> Self {
        Self {
            lower: mask.to_probability(),
            upper: mask.to_probability(),
        }
    }

    pub fn lower(&self) -> &ProbabilityMask<S> {
        &self.lower
    }

    pub fn upper(&self) -> &ProbabilityMask<S> {
        &self.upper
    }

    pub fn height(&self) -> usize {
        self.lower.height()
    }

    pub fn width(&self) -> usize {
        self.lower.width()
    }
}

/// Anomaly / boundary / normal split; every pixel is in exactly one region.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegionPartition {
    pub anomaly: BinaryMask,
    pub boundary: BinaryMask,
    pub normal: BinaryMask,
}

impl RegionPartition {
    /// True when each pixel belongs to exactly one of the three regions.
    pub fn is_exact_cover(&self) -> bool {
        self.anomaly.same_shape(&self.boundary)
            && self.anomaly.same_shape(&self.normal)
            && self
                .anomaly
                .values()
                .iter()
                .zip(self.boundary.values())
                .zip(self.normal.values())
                .all(|((&a, &b), &n)| a + b + n == 1)
    }
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::param(format!(
            "mask dimensions must be positive, got {height}x{width}"
        )));
    }
    if height * width != len {
        return Err(Error::shape(
            format!("{} values for {height}x{width}", height * width),
            format!("{len} values"),
        ));
    }
    Ok(())
}

fn check_tol(tol: f64) -> Result<()> {
    if !(0.0..0.5).contains(&tol) {
        return Err(Error::param(format!("tolerance {tol} outside [0, 0.5)")));
    }
    Ok(())
}

/// Lower approximation: pixels with `p >= 1 - tol`.
pub fn lower_of<S: Scalar>(prob: &ProbabilityMask<S>, tol: f64) -> Result<BinaryMask> {
    check_tol(tol)?;
    let cut = 1.0 - tol;
    Ok(BinaryMask {
        height: prob.height,
        width: prob.width,
        values: prob
            .values
            .iter()
            .map(|v| u8::from(v.to_f64_lossy() >= cut))
            .collect(),
    })
}

/// Upper approximation: pixels with `p > tol`.
pub fn upper_of<S: Scalar>(prob: &ProbabilityMask<S>, tol: f64) -> Result<BinaryMask> {
    check_tol(tol)?;
    Ok(BinaryMask {
        height: prob.height,
        width: prob.width,
        values: prob
            .values
            .iter()
            .map(|v| u8::from(v.to_f64_lossy() > tol))
            .collect(),
    })
}

pub fn partition<S: Scalar>(prob: &ProbabilityMask<S>, tol: f64) -> Result<RegionPartition> {
    let lower = lower_of(prob, tol)?;
    let upper = upper_of(prob, tol)?;
    Ok(RoughLabel { lower, upper }.partition())
}

/// Intersection (lower) and union (upper) of a set of binary samples.
pub fn rough_from_samples(samples: &[BinaryMask]) -> Result<RoughLabel> {
    let first = samples
        .first()
        .ok_or_else(|| Error::param("rough_from_samples needs at least one sample"))?;
    let mut lower = first.clone();
    let mut upper = first.clone();
    for s in &samples[1..] {
        first.ensure_same_shape(s)?;
        for ((l, u), &v) in lower.values.iter_mut().zip(upper.values.iter_mut()).zip(&s.values) {
            *l = (*l).min(v);
            *u = (*u).max(v);
        }
    }
    Ok(RoughLabel { lower, upper })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(values: &[f64]) -> ProbabilityMask<f64> {
        ProbabilityMask::new(1, values.len(), values.to_vec()).unwrap()
    }

    fn bits(values: &[u8]) -> BinaryMask {
        BinaryMask::new(1, values.len(), values.to_vec()).unwrap()
    }

    #[test]
    fn lower_thresholds() {
        let ones = ProbabilityMask::<f64>::filled(3, 3, 1.0).unwrap();
        assert_eq!(lower_of(&ones, 1e-6).unwrap(), BinaryMask::ones(3, 3));
        let zeros = ProbabilityMask::<f64>::filled(3, 3, 0.0).unwrap();
        assert_eq!(lower_of(&zeros, 1e-6).unwrap(), BinaryMask::zeros(3, 3));

        let p = row(&[0.2, 0.9999985, 1.0]);
        assert_eq!(lower_of(&p, 1e-6).unwrap().values(), &[0, 0, 1]);
        assert_eq!(lower_of(&p, 1e-5).unwrap().values(), &[0, 1, 1]);
        // The cut is inclusive.
        let p = row(&[0.999999]);
        assert_eq!(lower_of(&p, 1e-6).unwrap().values(), &[1]);
    }

    #[test]
    fn upper_thresholds() {
        let zeros = ProbabilityMask::<f64>::filled(2, 4, 0.0).unwrap();
        assert_eq!(upper_of(&zeros, 1e-6).unwrap(), BinaryMask::zeros(2, 4));
        let p = row(&[0.0, 1e-7, 0.3]);
        assert_eq!(upper_of(&p, 1e-6).unwrap().values(), &[0, 0, 1]);
        assert_eq!(upper_of(&p, 0.0).unwrap().values(), &[0, 1, 1]);
    }

    #[test]
    fn tolerance_out_of_range_is_rejected() {
        let p = row(&[0.5]);
        assert!(matches!(lower_of(&p, 0.5), Err(Error::Parameter(_))));
        assert!(matches!(upper_of(&p, -1e-3), Err(Error::Parameter(_))));
        assert!(partition(&p, 0.7).is_err());
    }

    #[test]
    fn partition_examples() {
        let part = partition(&row(&[0.0, 0.5, 1.0]), 1e-6).unwrap();
        assert_eq!(part.normal.values(), &[1, 0, 0]);
        assert_eq!(part.boundary.values(), &[0, 1, 0]);
        assert_eq!(part.anomaly.values(), &[0, 0, 1]);

        let all = partition(&ProbabilityMask::<f32>::filled(2, 2, 1.0).unwrap(), 1e-6).unwrap();
        assert_eq!(all.anomaly.count(), 4);
        assert_eq!(all.boundary.count() + all.normal.count(), 0);

        let none = partition(&ProbabilityMask::<f32>::filled(2, 2, 0.0).unwrap(), 1e-6).unwrap();
        assert_eq!(none.normal.count(), 4);
    }

    #[test]
    fn samples_to_rough_label() {
        let r = rough_from_samples(&[bits(&[1, 1, 0]), bits(&[1, 0, 0])]).unwrap();
        assert_eq!(r.lower().values(), &[1, 0, 0]);
        assert_eq!(r.upper().values(), &[1, 1, 0]);

        let s = bits(&[0, 1, 1]);
        let single = rough_from_samples(std::slice::from_ref(&s)).unwrap();
        assert_eq!(single.lower(), &s);
        assert_eq!(single.upper(), &s);

        let with_empty = rough_from_samples(&[bits(&[1, 1, 1]), bits(&[0, 0, 0])]).unwrap();
        assert_eq!(with_empty.lower().count(), 0);
    }

    #[test]
    fn samples_errors() {
        assert!(matches!(rough_from_samples(&[]), Err(Error::Parameter(_))));
        assert!(matches!(
            rough_from_samples(&[bits(&[1, 0]), bits(&[1, 0, 0])]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn invalid_masks_are_rejected() {
        assert!(ProbabilityMask::<f64>::new(1, 2, vec![0.5, 1.2]).is_err());
        assert!(ProbabilityMask::<f64>::new(1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(ProbabilityMask::<f64>::new(0, 2, vec![]).is_err());
        assert!(BinaryMask::new(1, 2, vec![0, 2]).is_err());
        assert!(RoughLabel::new(bits(&[1, 0]), bits(&[0, 1])).is_err());
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = ProbabilityMask::<f64>::new(2, 3, vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.0 / 3.0]).unwrap();
        let path = dir.path().join("p.png");
        p.save_png(&path).unwrap();
        let q = ProbabilityMask::<f64>::load_png(&path).unwrap();
        for (a, b) in p.values().iter().zip(q.values()) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-12);
        }
        let m = BinaryMask::from_fn(3, 2, |y, x| (y + x) % 2 == 0);
        let path = dir.path().join("m.png");
        m.save_png(&path).unwrap();
        assert_eq!(BinaryMask::load_png(&path).unwrap(), m);
    }

    fn prob_strategy() -> impl Strategy<Value = ProbabilityMask<f64>> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            proptest::collection::vec(
                prop_oneof![Just(0.0), Just(1.0), 0.0f64..=1.0],
                h * w,
            )
            .prop_map(move |v| ProbabilityMask::new(h, w, v).unwrap())
        })
    }

    fn samples_strategy() -> impl Strategy<Value = Vec<BinaryMask>> {
        (1usize..5, 1usize..5, 1usize..6).prop_flat_map(|(h, w, n)| {
            proptest::collection::vec(
                proptest::collection::vec(0u8..=1, h * w)
                    .prop_map(move |v| BinaryMask::new(h, w, v).unwrap()),
                n,
            )
        })
    }

    proptest! {
        #[test]
        fn lower_within_upper_and_partition_exact(p in prob_strategy(), tol in 0.0f64..0.49) {
            let lo = lower_of(&p, tol).unwrap();
            let up = upper_of(&p, tol).unwrap();
            prop_assert!(lo.is_subset_of(&up));
            prop_assert!(partition(&p, tol).unwrap().is_exact_cover());
        }

        #[test]
        fn thresholds_antitone_in_tol(p in prob_strategy(), a in 0.0f64..0.49, b in 0.0f64..0.49) {
            let (small, large) = if a <= b { (a, b) } else { (b, a) };
            // Larger tolerance admits more pixels into lower and fewer into upper.
            prop_assert!(lower_of(&p, small).unwrap().is_subset_of(&lower_of(&p, large).unwrap()));
            prop_assert!(upper_of(&p, large).unwrap().is_subset_of(&upper_of(&p, small).unwrap()));
        }

        #[test]
        fn samples_permutation_invariant_and_monotone(samples in samples_strategy(), extra_seed in any::<u64>()) {
            let r = rough_from_samples(&samples).unwrap();
            let mut rev = samples.clone();
            rev.reverse();
            prop_assert_eq!(&rough_from_samples(&rev).unwrap(), &r);

            let h = samples[0].height();
            let w = samples[0].width();
            let extra = BinaryMask::from_fn(h, w, |y, x| (extra_seed >> ((y * w + x) % 64)) & 1 == 1);
            let mut more = samples.clone();
            more.push(extra);
            let r2 = rough_from_samples(&more).unwrap();
            prop_assert!(r2.lower().is_subset_of(r.lower()));
            prop_assert!(r.upper().is_subset_of(r2.upper()));
            prop_assert!(r.lower().is_subset_of(r.upper()));
        }
    }
}
