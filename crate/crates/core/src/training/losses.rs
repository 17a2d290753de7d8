//! Scalar reference forms of the loss terms. The tape ops in
//! `autodiff` carry the same formulas with gradients.

use crate::autodiff::bce_with_logits;
use crate::geometry::{huber, BBox};
use crate::model::sigmoid;

/// Mean elementwise Huber loss (transition at 1).
pub fn smooth_l1(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "smooth_l1 length mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(target).map(|(p, t)| huber(p - t)).sum::<f64>() / pred.len() as f64
}

/// `1 - GIoU`, in `[0, 2)`.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> f64 {
    let iw = (pred.x_max.min(gt.x_max) - pred.x_min.max(gt.x_min)).max(0.0);
    let ih = (pred.y_max.min(gt.y_max) - pred.y_min.max(gt.y_min)).max(0.0);
    let inter = iw * ih;
    let union = pred.area() + gt.area() - inter;
    let cw = pred.x_max.max(gt.x_max) - pred.x_min.min(gt.x_min);
    let ch = pred.y_max.max(gt.y_max) - pred.y_min.min(gt.y_min);
    let hull = cw * ch;
    let iou = inter / union;
    1.0 - (iou - (hull - union) / hull)
}

pub fn bce_loss(logit: f64, label: f64) -> f64 {
    bce_with_logits(logit, label)
}

/// `|y - σ(x)|^β · BCE(σ(x), y)` with a soft label `y`.
pub fn quality_focal_loss(logit: f64, soft_label: f64, beta: f64) -> f64 {
    let gap = (soft_label - sigmoid(logit)).abs();
    let factor = if beta == 0.0 { 1.0 } else { gap.powf(beta) };
    factor * bce_with_logits(logit, soft_label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(smooth_l1(&[0.5], &[0.0]), 0.125);
        assert_eq!(smooth_l1(&[3.0], &[0.0]), 2.5);
    }

    #[test]
    fn giou_cases() {
        assert_eq!(giou_loss(&b(0.0, 0.0, 2.0, 1.0), &b(0.0, 0.0, 2.0, 1.0)), 0.0);
        assert!((giou_loss(&b(0.0, 0.0, 1.0, 1.0), &b(2.0, 0.0, 3.0, 1.0)) - 4.0 / 3.0).abs() < 1e-15);
        let gt = b(0.0, 0.0, 1.0, 1.0);
        let mut last = f64::INFINITY;
        for k in 0..40 {
            let x = 5.0 - 0.1 * k as f64;
            let l = giou_loss(&b(x, 0.0, x + 1.0, 1.0), &gt);
            assert!(l < last, "not decreasing at x={x}");
            last = l;
        }
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(20.0, 1.0) < 1e-8);
    }

    #[test]
    fn qfl_limits() {
        assert!(quality_focal_loss(0.0, 0.5, 2.0).abs() < 1e-18);
        for (x, y) in [(0.3, 0.7), (-2.0, 0.0), (1.5, 1.0)] {
            assert!((quality_focal_loss(x, y, 0.0) - bce_loss(x, y)).abs() < 1e-12);
            assert!(quality_focal_loss(x, y, 2.0) >= 0.0);
        }
    }
}
