//! Training loss formulas, evaluated forward only.
//!
//! ```text
//! overall   = l3d + l2d + aux
//! l2d       = detr2d + lambda1 * alpha
//! alpha     = mean |sin t - s| + |cos t - c|
//! aux       = roi2d + ins_depth + lambda2 * dense_depth
//! ```

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use super::{l1_4, log_sigmoid, normalized, Gt2D, Pred2D};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Anchor3D, Box2D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub w_cls_2d: f64,
    pub w_l1_2d: f64,
    pub w_giou_2d: f64,
    pub w_cls_3d: f64,
    pub w_box_3d: f64,
    pub depth_bins: usize,
    pub depth_range_max: f64,
    pub use_alpha: bool,
    pub use_aux: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.5,
            lambda2: 0.2,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            w_cls_2d: 2.0,
            w_l1_2d: 5.0,
            w_giou_2d: 2.0,
            w_cls_3d: 2.0,
            w_box_3d: 0.25,
            depth_bins: 64,
            depth_range_max: 60.0,
            use_alpha: true,
            use_aux: true,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.lambda1,
            self.lambda2,
            self.focal_alpha,
            self.focal_gamma,
            self.w_cls_2d,
            self.w_l1_2d,
            self.w_giou_2d,
            self.w_cls_3d,
            self.w_box_3d,
        ];
        if w.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Param("loss weights must be non-negative".into()));
        }
        if self.depth_bins == 0 || !(self.depth_range_max > 0.0) {
            return Err(Error::Param("depth bins need a positive count and range".into()));
        }
        Ok(())
    }
}

/// Binary focal loss of one logit against a 0/1 target.
pub fn focal_term(logit: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = 1.0 / (1.0 + (-logit).exp());
    if positive {
        -alpha * (1.0 - p).powf(gamma) * log_sigmoid(logit)
    } else {
        -(1.0 - alpha) * p.powf(gamma) * log_sigmoid(-logit)
    }
}

/// Sum of per-class sigmoid focal terms; `target = None` is background.
pub fn sigmoid_focal(logits: &[f64], target: Option<usize>, alpha: f64, gamma: f64) -> f64 {
    logits
        .iter()
        .enumerate()
        .map(|(c, &z)| focal_term(z, Some(c) == target, alpha, gamma))
        .sum()
}

/// Mean over matched pairs of `|sin t - s| + |cos t - c|`; zero when empty.
pub fn loss_alpha(pred_sin_cos: &[[f64; 2]], gt_theta: &[f64]) -> Result<f64> {
    if pred_sin_cos.len() != gt_theta.len() {
        return Err(Error::Shape(format!(
            "{} alpha predictions for {} targets",
            pred_sin_cos.len(),
            gt_theta.len()
        )));
    }
    if gt_theta.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = pred_sin_cos
        .iter()
        .zip(gt_theta)
        .map(|(&[s, c], t)| (t.sin() - s).abs() + (t.cos() - c).abs())
        .sum();
    Ok(sum / gt_theta.len() as f64)
}

/// Generalized IoU of two rectangles.
pub fn giou(a: &Box2D, b: &Box2D) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let hull = (ax1.max(bx1) - ax0.min(bx0)) * (ay1.max(by1) - ay0.min(by0));
    if union <= 0.0 || hull <= 0.0 {
        return 0.0;
    }
    inter / union - (hull - union) / hull
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detr2dTerms {
    pub cls: f64,
    pub l1: f64,
    pub giou: f64,
    pub total: f64,
}

/// Focal classification over every prediction plus L1 and `1 - GIoU` over
/// matched pairs, each normalized by the number of matches (at least 1).
pub fn loss_detr2d(
    preds: &[Pred2D],
    gts: &[Gt2D],
    pairs: &[(usize, usize)],
    image_size: [f64; 2],
    w: &LossWeights,
) -> Result<Detr2dTerms> {
    let mut target = vec![None; preds.len()];
    for &(i, j) in pairs {
        if i >= preds.len() || j >= gts.len() {
            return Err(Error::Shape(format!(
                "pair ({i}, {j}) outside {}x{}",
                preds.len(),
                gts.len()
            )));
        }
        target[i] = Some(gts[j].class);
    }
    let norm = pairs.len().max(1) as f64;
    let cls: f64 = preds
        .iter()
        .zip(&target)
        .map(|(p, t)| sigmoid_focal(&p.logits, *t, w.focal_alpha, w.focal_gamma))
        .sum::<f64>()
        / norm;
    let mut l1 = 0.0;
    let mut g = 0.0;
    for &(i, j) in pairs {
        l1 += l1_4(
            normalized(&preds[i].rect, image_size),
            normalized(&gts[j].rect, image_size),
        );
        g += 1.0 - giou(&preds[i].rect, &gts[j].rect);
    }
    let (l1, g) = (l1 / norm, g / norm);
    Ok(Detr2dTerms {
        cls,
        l1,
        giou: g,
        total: w.w_cls_2d * cls + w.w_l1_2d * l1 + w.w_giou_2d * g,
    })
}

/// `detr2d + lambda1 * alpha` (the alpha term is dropped when disabled).
pub fn loss_2d(detr2d: f64, alpha: f64, w: &LossWeights) -> f64 {
    if w.use_alpha {
        detr2d + w.lambda1 * alpha
    } else {
        detr2d
    }
}

/// 2D loss over matched pairs from one call: DETR terms plus alpha.
pub fn loss_2d_matched(
    preds: &[Pred2D],
    gts: &[Gt2D],
    pairs: &[(usize, usize)],
    image_size: [f64; 2],
    w: &LossWeights,
) -> Result<f64> {
    let d = loss_detr2d(preds, gts, pairs, image_size, w)?;
    let sc: Vec<[f64; 2]> = pairs.iter().map(|&(i, _)| preds[i].alpha).collect();
    let th: Vec<f64> = pairs.iter().map(|&(_, j)| gts[j].alpha).collect();
    Ok(loss_2d(d.total, loss_alpha(&sc, &th)?, w))
}

/// L1 over the nine box parameters with the yaw difference wrapped.
pub fn box_l1_3d(pred: &Anchor3D, gt: &Anchor3D) -> f64 {
    let p = pred.to_array();
    let g = gt.to_array();
    (0..9)
        .map(|k| {
            if k == 6 {
                wrap_angle(p[k] - g[k]).abs()
            } else {
                (p[k] - g[k]).abs()
            }
        })
        .sum()
}

/// Focal classification over all 3D predictions plus box L1 over matched
/// pairs, both normalized by the number of matches (at least 1).
pub fn loss_3d(
    logits: &[Vec<f64>],
    boxes: &[Anchor3D],
    gt_boxes: &[Anchor3D],
    gt_classes: &[usize],
    pairs: &[(usize, usize)],
    w: &LossWeights,
) -> Result<f64> {
    if logits.len() != boxes.len() || gt_boxes.len() != gt_classes.len() {
        return Err(Error::Shape("3D loss inputs disagree in length".into()));
    }
    let mut target = vec![None; boxes.len()];
    for &(i, j) in pairs {
        if i >= boxes.len() || j >= gt_boxes.len() {
            return Err(Error::Shape(format!(
                "pair ({i}, {j}) outside {}x{}",
                boxes.len(),
                gt_boxes.len()
            )));
        }
        target[i] = Some(gt_classes[j]);
    }
    let norm = pairs.len().max(1) as f64;
    let cls: f64 = logits
        .iter()
        .zip(&target)
        .map(|(z, t)| sigmoid_focal(z, *t, w.focal_alpha, w.focal_gamma))
        .sum::<f64>()
        / norm;
    let l1: f64 = pairs
        .iter()
        .map(|&(i, j)| box_l1_3d(&boxes[i], &gt_boxes[j]))
        .sum::<f64>()
        / norm;
    Ok(w.w_cls_3d * cls + w.w_box_3d * l1)
}

/// Bin of a depth value among `n_bins` uniform bins over `[0, range_max]`;
/// depths beyond the range fall into the last bin.
pub fn depth_bin(depth: f64, range_max: f64, n_bins: usize) -> usize {
    let b = (depth.max(0.0) / range_max * n_bins as f64).floor() as usize;
    b.min(n_bins - 1)
}

/// Mean focal loss of per-instance bin logits against the ground-truth bin.
pub fn loss_ins_depth(bin_logits: &[Vec<f64>], gt_depth: &[f64], w: &LossWeights) -> Result<f64> {
    if bin_logits.len() != gt_depth.len() {
        return Err(Error::Shape("instance depth logits and targets disagree".into()));
    }
    if gt_depth.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (z, &d) in bin_logits.iter().zip(gt_depth) {
        if z.len() != w.depth_bins {
            return Err(Error::Shape(format!(
                "{} depth logits for {} bins",
                z.len(),
                w.depth_bins
            )));
        }
        sum += sigmoid_focal(
            z,
            Some(depth_bin(d, w.depth_range_max, w.depth_bins)),
            w.focal_alpha,
            w.focal_gamma,
        );
    }
    Ok(sum / gt_depth.len() as f64)
}

/// Mean absolute error over pixels whose target depth is finite.
pub fn loss_dense_depth(pred: ArrayView2<'_, f64>, target: ArrayView2<'_, f64>) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::Shape(format!(
            "depth maps {:?} vs {:?}",
            pred.dim(),
            target.dim()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, t) in pred.iter().zip(target.iter()) {
        if t.is_finite() {
            sum += (p - t).abs();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

pub fn loss_aux(roi2d: f64, ins_depth: f64, dense_depth: f64, w: &LossWeights) -> f64 {
    roi2d + ins_depth + w.lambda2 * dense_depth
}

pub fn loss_total(l3d: f64, l2d: f64, aux: f64, w: &LossWeights) -> Result<f64> {
    if ![l3d, l2d, aux].iter().all(|v| v.is_finite()) {
        return Err(Error::Param("loss components must be finite".into()));
    }
    Ok(l3d + l2d + if w.use_aux { aux } else { 0.0 })
}
