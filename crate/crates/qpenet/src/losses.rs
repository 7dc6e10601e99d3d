//! Composite training objective: binary cross-entropy on the preliminary,
//! reverse and final foreground predictions, plus background-mask supervision
//! against the complement masks.
//!
//! The background term substitutes a plain BCE-against-complement for the
//! original background-mining formulation; it preserves the supervisory role
//! (predict the background map) and is swappable through [`BgLossKind`].

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Tensor};
use crate::types::{Mask, MaskKind};

/// Prediction clamp used inside every BCE evaluation.
pub const BCE_DELTA: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

/// Hook for alternative background supervision. Only the BCE substitute is
/// implemented; the enum keeps the swap point explicit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BgLossKind {
    #[default]
    BceComplement,
}

/// Mean BCE of a soft prediction against a hard target on the tape.
pub fn bce_t(tape: &Tape, pred: &Tensor, target: &ArrayD<f64>) -> Tensor {
    tape.bce(pred, target, BCE_DELTA)
}

/// Mean BCE over domain masks.
pub fn bce(pred: &Mask, target: &Mask) -> Result<f64> {
    if pred.data.dim() != target.data.dim() {
        return Err(Error::ShapeMismatch(format!(
            "bce prediction {:?} vs target {:?}",
            pred.data.dim(),
            target.data.dim()
        )));
    }
    if target.kind != MaskKind::Hard {
        return Err(Error::InvalidConfig("bce target must be hard".into()));
    }
    let tape = Tape::eval();
    Ok(bce_t(
        &tape,
        &tape.constant2(pred.data.clone()),
        &target.data.clone().into_dyn(),
    )
    .scalar())
}

/// Background supervision target: the complement of the foreground mask.
pub fn bg_target(m: &Mask) -> ArrayD<f64> {
    m.complement().data.into_dyn()
}

/// Sum of the foreground BCE terms present in this pass. The preliminary and
/// reverse terms only exist while foreground evolution is enabled.
pub fn fg_loss_t(
    tape: &Tape,
    y_pre: Option<&Tensor>,
    y_rev: Option<&Tensor>,
    y_final: &Tensor,
    m_q_ds: &Mask,
    m_s_ds: &Mask,
) -> Tensor {
    let q_target = m_q_ds.data.clone().into_dyn();
    let s_target = m_s_ds.data.clone().into_dyn();
    let mut total = bce_t(tape, y_final, &q_target);
    if let Some(y_pre) = y_pre {
        total = tape.add(&total, &bce_t(tape, y_pre, &q_target));
    }
    if let Some(y_rev) = y_rev {
        total = tape.add(&total, &bce_t(tape, y_rev, &s_target));
    }
    total
}

/// Background loss over the complement targets. The support term exists only
/// in training mode; evaluation supervises nothing but callers may still
/// score the query term.
pub fn bg_loss_t(
    tape: &Tape,
    y_s_bg: Option<&Tensor>,
    y_q_bg: &Tensor,
    m_s_ds: &Mask,
    m_q_ds: &Mask,
) -> Tensor {
    let mut total = bce_t(tape, y_q_bg, &bg_target(m_q_ds));
    if let Some(y_s_bg) = y_s_bg {
        total = tape.add(&total, &bce_t(tape, y_s_bg, &bg_target(m_s_ds)));
    }
    total
}

/// `alpha * fg + beta * bg`.
pub fn total_loss_t(tape: &Tape, fg: &Tensor, bg: &Tensor, w: &LossWeights) -> Tensor {
    tape.add(&tape.scale(fg, w.alpha), &tape.scale(bg, w.beta))
}

/// Value-level total loss.
pub fn total_loss(fg: f64, bg: f64, w: &LossWeights) -> f64 {
    w.alpha * fg + w.beta * bg
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn soft(data: Array2<f64>) -> Mask {
        Mask::soft(data).unwrap()
    }

    fn hard(data: Array2<f64>) -> Mask {
        Mask::hard(data).unwrap()
    }

    #[test]
    fn bce_perfect_prediction_is_clamp_limited() {
        let t = hard(array![[1.0, 0.0], [0.0, 1.0]]);
        let p = soft(t.data.clone());
        let loss = bce(&p, &t).unwrap();
        assert!(loss >= 0.0);
        assert!(loss <= -(1.0 - BCE_DELTA).ln() + 1e-12);
    }

    #[test]
    fn bce_uniform_half_is_ln_two() {
        let t = hard(array![[1.0, 0.0], [1.0, 1.0]]);
        let p = soft(Array2::from_elem((2, 2), 0.5));
        let loss = bce(&p, &t).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_inverted_prediction_hits_clamp_maximum() {
        let t = hard(array![[1.0, 0.0]]);
        let p = soft(array![[0.0, 1.0]]);
        let loss = bce(&p, &t).unwrap();
        assert!((loss - (-(BCE_DELTA.ln()))).abs() < 1e-3);
    }

    #[test]
    fn bce_shape_mismatch_is_error() {
        let t = hard(Array2::zeros((2, 2)));
        let p = soft(Array2::zeros((3, 2)));
        assert!(bce(&p, &t).is_err());
    }

    #[test]
    fn fg_loss_three_uniform_halves() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 1.0]]);
        let half = tape.constant2(Array2::from_elem((2, 2), 0.5));
        let loss = fg_loss_t(&tape, Some(&half), Some(&half), &half, &m, &m).scalar();
        assert!((loss - 3.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn fg_loss_perfect_predictions_vanish() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 1.0]]);
        let exact = tape.constant2(m.data.clone());
        let loss = fg_loss_t(&tape, Some(&exact), Some(&exact), &exact, &m, &m).scalar();
        assert!(loss < 1e-6);
    }

    #[test]
    fn fg_loss_is_monotone_in_each_term() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 1.0]]);
        let good = tape.constant2(Array2::from_elem((2, 2), 0.5));
        let base = fg_loss_t(&tape, Some(&good), Some(&good), &good, &m, &m).scalar();
        // Worsen only the reverse term.
        let bad = tape.constant2(m.complement().data.mapv(|v| v * 0.98 + 0.01));
        let worse = fg_loss_t(&tape, Some(&good), Some(&bad), &good, &m, &m).scalar();
        assert!(worse > base);
    }

    #[test]
    fn bg_loss_complement_targets() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 0.0]]);
        // Exact complement prediction scores ~0.
        let y = tape.constant2(m.complement().data.clone());
        let loss = bg_loss_t(&tape, Some(&y), &y, &m, &m).scalar();
        assert!(loss < 1e-6);
        // Uniform half scores 2 ln 2 across both terms.
        let half = tape.constant2(Array2::from_elem((2, 2), 0.5));
        let loss = bg_loss_t(&tape, Some(&half), &half, &m, &m).scalar();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bg_loss_eval_mode_keeps_only_query_term() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 0.0]]);
        let half = tape.constant2(Array2::from_elem((2, 2), 0.5));
        let loss = bg_loss_t(&tape, None, &half, &m, &m).scalar();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn total_loss_hand_values_and_linearity() {
        let w0 = LossWeights { alpha: 0.0, beta: 0.0 };
        assert_eq!(total_loss(0.4, 0.9, &w0), 0.0);
        let w_fg = LossWeights { alpha: 1.0, beta: 0.0 };
        assert_eq!(total_loss(0.4, 0.9, &w_fg), 0.4);
        let w = LossWeights::default();
        assert!((total_loss(0.3, 0.2, &w) - 0.5).abs() < 1e-15);
        // Linearity in (fg, bg).
        let w2 = LossWeights { alpha: 2.0, beta: 3.0 };
        let a = total_loss(1.0, 0.0, &w2);
        let b = total_loss(0.0, 1.0, &w2);
        assert_eq!(total_loss(1.0, 1.0, &w2), a + b);
    }

    #[test]
    fn losses_stay_finite_for_extreme_soft_inputs() {
        let tape = Tape::eval();
        let m = hard(array![[1.0, 0.0], [0.0, 1.0]]);
        for v in [0.0, 1.0, 1e-300, 1.0 - 1e-16] {
            let p = tape.constant2(Array2::from_elem((2, 2), v));
            let loss = fg_loss_t(&tape, Some(&p), Some(&p), &p, &m, &m).scalar();
            assert!(loss.is_finite() && loss >= 0.0);
        }
    }
}
