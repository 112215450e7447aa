//! Segmentation metrics: recall against a predicted upper approximation,
//! precision of a predicted lower approximation, IoU, and oracle scores
//! against known synthetic truth.
//!
//! Every ratio with an empty denominator evaluates to 1.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rough_core::{BinaryMask, RoughLabel};

fn ratio(num: usize, den: usize, what: &str) -> f64 {
    if den == 0 {
        log::debug!("{what}: empty denominator, reporting 1");
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `|pred_upper ∩ label| / |label|`.
pub fn recall_upper(pred_upper: &BinaryMask, label: &BinaryMask) -> Result<f64> {
    pred_upper.ensure_same_shape(label)?;
    Ok(ratio(pred_upper.and(label).count(), label.count(), "recall_upper"))
}

/// `|pred_lower ∩ label| / |pred_lower|`.
pub fn precision_lower(pred_lower: &BinaryMask, label: &BinaryMask) -> Result<f64> {
    pred_lower.ensure_same_shape(label)?;
    Ok(ratio(pred_lower.and(label).count(), pred_lower.count(), "precision_lower"))
}

/// `|pred ∩ label| / |pred ∪ label|`.
pub fn iou(pred: &BinaryMask, label: &BinaryMask) -> Result<f64> {
    pred.ensure_same_shape(label)?;
    Ok(ratio(pred.and(label).count(), pred.or(label).count(), "iou"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub iou_lower_vs_core: f64,
    pub iou_upper_vs_core_halo: f64,
    /// IoU of the predicted boundary region against the true halo.
    pub boundary_agreement: f64,
}

pub fn oracle_eval(pred: &RoughLabel, core: &BinaryMask, halo: &BinaryMask) -> Result<OracleMetrics> {
    core.ensure_same_shape(halo)?;
    pred.lower().ensure_same_shape(core)?;
    Ok(OracleMetrics {
        iou_lower_vs_core: iou(pred.lower(), core)?,
        iou_upper_vs_core_halo: iou(pred.upper(), &core.or(halo))?,
        boundary_agreement: iou(&pred.boundary(), halo)?,
    })
}

/// Per-image record of the metrics JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub recall_upper: f64,
    pub precision_lower: f64,
    pub iou: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub oracle: Option<OracleMetrics>,
}

/// Scores one prediction against its (noisy) label and, optionally, the true
/// `(core, halo)` pair. `pred` is the binarized probability map.
pub fn evaluate(
    rough: &RoughLabel,
    pred: &BinaryMask,
    label: &BinaryMask,
    truth: Option<(&BinaryMask, &BinaryMask)>,
) -> Result<ImageMetrics> {
    Ok(ImageMetrics {
        recall_upper: recall_upper(rough.upper(), label)?,
        precision_lower: precision_lower(rough.lower(), label)?,
        iou: iou(pred, label)?,
        oracle: truth
            .map(|(core, halo)| oracle_eval(rough, core, halo))
            .transpose()?,
    })
}

/// Mean of each field. The oracle block is averaged only when every image
/// carries one. `None` for an empty slice.
pub fn aggregate(items: &[ImageMetrics]) -> Option<ImageMetrics> {
    if items.is_empty() {
        return None;
    }
    let n = items.len() as f64;
    let mean = |f: &dyn Fn(&ImageMetrics) -> f64| items.iter().map(f).sum::<f64>() / n;
    let oracles: Option<Vec<OracleMetrics>> = items.iter().map(|m| m.oracle).collect();
    let oracle = oracles.map(|o| OracleMetrics {
        iou_lower_vs_core: o.iter().map(|m| m.iou_lower_vs_core).sum::<f64>() / n,
        iou_upper_vs_core_halo: o.iter().map(|m| m.iou_upper_vs_core_halo).sum::<f64>() / n,
        boundary_agreement: o.iter().map(|m| m.boundary_agreement).sum::<f64>() / n,
    });
    Some(ImageMetrics {
        recall_upper: mean(&|m| m.recall_upper),
        precision_lower: mean(&|m| m.precision_lower),
        iou: mean(&|m| m.iou),
        oracle,
    })
}
