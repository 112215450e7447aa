//! Rough Tversky loss.
//!
//! With soft lower/upper bounds `l`, `u` and prediction `ŷ`, pixel sums give
//!
//! ```text
//! P = Σ l·ŷ / (Σ l·ŷ + Σ (1−l)·ŷ + ε)      precision against the lower bound
//! R = Σ u·ŷ / (Σ u·ŷ + Σ u·(1−ŷ) + ε)      recall against the upper bound
//! loss = 1 − α·P − (1−α)·R
//! ```
//!
//! plus an L2 penalty `λ·Σ‖W‖²` on the network weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, Model, ParamKind};
use crate::rough_core::{ProbabilityMask, SoftRoughLabel};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the precision term; the recall term gets `1 − alpha`.
    pub alpha: f64,
    /// Smoothing added to both denominators.
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: 1e-6,
            weight_decay: 1e-4,
        }
    }
}

impl LossConfig {
    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::param(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::param(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Loss value with its two soft terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoughTversky<S> {
    pub loss: S,
    pub precision: S,
    pub recall: S,
}

struct Sums<S> {
    lower_pred: S,
    pred: S,
    upper_pred: S,
    upper: S,
}

fn sums<S: Scalar>(pred: &ProbabilityMask<S>, label: &SoftRoughLabel<S>) -> Result<Sums<S>> {
    if !pred.same_shape(label.lower()) {
        return Err(Error::shape(
            format!("{}x{}", label.height(), label.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    let mut s = Sums {
        lower_pred: S::zero(),
        pred: S::zero(),
        upper_pred: S::zero(),
        upper: S::zero(),
    };
    for ((&p, &l), &u) in pred
        .values()
        .iter()
        .zip(label.lower().values())
        .zip(label.upper().values())
    {
        s.lower_pred += l * p;
        s.pred += p;
        s.upper_pred += u * p;
        s.upper += u;
    }
    Ok(s)
}

fn evaluate<S: Scalar>(s: &Sums<S>, alpha: S, beta: S, eps: S) -> RoughTversky<S> {
    let precision = s.lower_pred / (s.pred + eps);
    let recall = s.upper_pred / (s.upper + eps);
    RoughTversky {
        loss: S::one() - alpha * precision - beta * recall,
        precision,
        recall,
    }
}

/// Rough Tversky loss for one prediction. The smoothing `epsilon` comes from
/// `cfg`; use [`rough_tversky_eps`] to override it.
pub fn rough_tversky<S: Scalar>(
    pred: &ProbabilityMask<S>,
    label: &SoftRoughLabel<S>,
    cfg: &LossConfig,
) -> Result<RoughTversky<S>> {
    rough_tversky_eps(pred, label, cfg, cfg.epsilon)
}

/// As [`rough_tversky`] with an explicit `epsilon`, which may be 0 when both
/// denominators are known to be positive.
pub fn rough_tversky_eps<S: Scalar>(
    pred: &ProbabilityMask<S>,
    label: &SoftRoughLabel<S>,
    cfg: &LossConfig,
    epsilon: f64,
) -> Result<RoughTversky<S>> {
    let s = sums(pred, label)?;
    Ok(evaluate(
        &s,
        S::lit(cfg.alpha),
        S::lit(cfg.beta()),
        S::lit(epsilon),
    ))
}

/// Loss and its gradient with respect to every predicted pixel.
pub fn rough_tversky_grad<S: Scalar>(
    pred: &ProbabilityMask<S>,
    label: &SoftRoughLabel<S>,
    cfg: &LossConfig,
) -> Result<(RoughTversky<S>, Vec<S>)> {
    let s = sums(pred, label)?;
    let (alpha, beta, eps) = (S::lit(cfg.alpha), S::lit(cfg.beta()), S::lit(cfg.epsilon));
    let value = evaluate(&s, alpha, beta, eps);
    let pd = s.pred + eps;
    let ud = s.upper + eps;
    let grad = label
        .lower()
        .values()
        .iter()
        .zip(label.upper().values())
        .map(|(&l, &u)| {
            let dp = (l * pd - s.lower_pred) / (pd * pd);
            let dr = u / ud;
            -(alpha * dp + beta * dr)
        })
        .collect();
    Ok((value, grad))
}

/// `weight_decay · Σ‖W‖²` over the model's weight tensors.
pub fn l2_penalty<S: Scalar>(model: &Model<S>, weight_decay: f64) -> S {
    if weight_decay == 0.0 {
        return S::zero();
    }
    S::lit(weight_decay) * model.weight_sq_norm()
}

/// Adds `∂/∂W (λ·Σ‖W‖²) = 2λW` to the weight gradients.
pub fn add_l2_grad<S: Scalar>(model: &Model<S>, weight_decay: f64, grads: &mut Gradients<S>) {
    if weight_decay == 0.0 {
        return;
    }
    let two_wd = S::lit(2.0 * weight_decay);
    for ((g, p), info) in grads
        .tensors
        .iter_mut()
        .zip(model.params())
        .zip(model.param_info())
    {
        if info.kind == ParamKind::Weight {
            for (gv, &pv) in g.iter_mut().zip(p) {
                *gv += two_wd * pv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_core::BinaryMask;
    use proptest::prelude::*;

    fn pm(v: &[f64]) -> ProbabilityMask<f64> {
        ProbabilityMask::new(1, v.len(), v.to_vec()).unwrap()
    }

    fn label(l: &[f64], u: &[f64]) -> SoftRoughLabel<f64> {
        SoftRoughLabel::new(pm(l), pm(u)).unwrap()
    }

    #[test]
    fn perfect_crisp_prediction_has_zero_loss() {
        let y = BinaryMask::new(2, 3, vec![1, 0, 1, 1, 0, 0]).unwrap();
        let pred = y.to_probability::<f64>();
        let cfg = LossConfig::default();
        let v = rough_tversky(&pred, &SoftRoughLabel::crisp(&y), &cfg).unwrap();
        assert!(v.loss.abs() < 1e-5);
        let exact = rough_tversky_eps(&pred, &SoftRoughLabel::crisp(&y), &cfg, 0.0).unwrap();
        assert_eq!(exact.loss, 0.0);
    }

    #[test]
    fn empty_prediction_has_unit_loss() {
        let v = rough_tversky(
            &pm(&[0.0; 4]),
            &label(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]),
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(v.precision, 0.0);
        assert_eq!(v.recall, 0.0);
        assert_eq!(v.loss, 1.0);
    }

    #[test]
    fn worked_four_pixel_example() {
        let cfg = LossConfig {
            alpha: 0.5,
            ..LossConfig::default()
        };
        let v = rough_tversky_eps(
            &pm(&[1.0, 0.5, 0.0, 0.0]),
            &label(&[1.0, 0.0, 0.0, 0.0], &[1.0, 1.0, 0.0, 0.0]),
            &cfg,
            0.0,
        )
        .unwrap();
        assert!((v.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((v.recall - 0.75).abs() < 1e-15);
        assert!((v.loss - 0.291_666_666_666_666_7).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let l = label(&[0.0, 1.0], &[1.0, 1.0]);
        assert!(matches!(
            rough_tversky(&pm(&[0.1, 0.2, 0.3]), &l, &LossConfig::default()),
            Err(Error::Shape { .. })
        ));
        assert!(SoftRoughLabel::new(pm(&[0.6]), pm(&[0.5])).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossConfig { epsilon: 0.0, ..Default::default() }.validate().is_err());
        assert!((LossConfig { alpha: 0.3, ..Default::default() }.beta() - 0.7).abs() < 1e-15);
    }

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..20).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.01f64..0.99, n),
                proptest::collection::vec(0.0f64..1.0, n),
                proptest::collection::vec(0.0f64..1.0, n),
            )
                .prop_map(|(p, a, b)| {
                    let lo = a.iter().zip(&b).map(|(x, y)| x.min(*y)).collect();
                    let hi = a.iter().zip(&b).map(|(x, y)| x.max(*y)).collect();
                    (p, lo, hi)
                })
        })
    }

    proptest! {
        #[test]
        fn loss_is_permutation_invariant((p, l, u) in instance(), rot in 0usize..20) {
            let cfg = LossConfig::default();
            let a = rough_tversky(&pm(&p), &label(&l, &u), &cfg).unwrap().loss;
            let n = p.len();
            let r = rot % n;
            let rotate = |v: &Vec<f64>| { let mut w = v.clone(); w.rotate_left(r); w };
            let b = rough_tversky(&pm(&rotate(&p)), &label(&rotate(&l), &rotate(&u)), &cfg).unwrap().loss;
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!(a >= -1e-12 && a <= 1.0 + 1e-12);
        }

        #[test]
        fn loss_monotone_in_certain_pixels((p, l, u) in instance(), i in 0usize..20, bump in 0.0f64..0.5) {
            let cfg = LossConfig::default();
            let i = i % p.len();
            let mut raised = p.clone();
            raised[i] = (raised[i] + bump).min(1.0);

            let mut l1 = l.clone(); let mut u1 = u.clone();
            l1[i] = 1.0; u1[i] = 1.0;
            let base = rough_tversky(&pm(&p), &label(&l1, &u1), &cfg).unwrap().loss;
            let up = rough_tversky(&pm(&raised), &label(&l1, &u1), &cfg).unwrap().loss;
            prop_assert!(up <= base + 1e-12);

            let mut l0 = l.clone(); let mut u0 = u.clone();
            l0[i] = 0.0; u0[i] = 0.0;
            let base = rough_tversky(&pm(&p), &label(&l0, &u0), &cfg).unwrap().loss;
            let up = rough_tversky(&pm(&raised), &label(&l0, &u0), &cfg).unwrap().loss;
            prop_assert!(up >= base - 1e-12);
        }

        #[test]
        fn crisp_label_reduces_to_soft_confusion_counts(
            p in proptest::collection::vec(0.0f64..1.0, 1..30),
            seed in any::<u64>(),
        ) {
            let n = p.len();
            let y: Vec<f64> = (0..n).map(|i| ((seed >> (i % 64)) & 1) as f64).collect();
            let cfg = LossConfig { alpha: 0.3, ..Default::default() };
            let v = rough_tversky(&pm(&p), &label(&y, &y), &cfg).unwrap();
            // Soft confusion matrix.
            let tp: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
            let fp: f64 = p.iter().zip(&y).map(|(a, b)| a * (1.0 - b)).sum();
            let fneg: f64 = p.iter().zip(&y).map(|(a, b)| (1.0 - a) * b).sum();
            let precision = tp / (tp + fp + cfg.epsilon);
            let recall = tp / (tp + fneg + cfg.epsilon);
            prop_assert!((v.loss - (1.0 - 0.3 * precision - 0.7 * recall)).abs() < 1e-12);
        }
    }
}
