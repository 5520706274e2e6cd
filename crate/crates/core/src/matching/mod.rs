//! Assignment, training losses and association/detection metrics.

mod aar;
mod ap;
mod hungarian;
pub mod losses;

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, Anchor3D, Box2D};

pub use aar::{aar, aar_curve, candidate_match, tau_sweep, AarResult};
pub use ap::{ap_2d, ApEntry};
pub use hungarian::{hungarian, Assignment};

/// Ground-truth 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gt3D {
    pub anchor: Anchor3D,
    pub class: usize,
}

/// Ground-truth 2D box derived from a 3D box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gt2D {
    pub rect: Box2D,
    pub class: usize,
    /// Index of the originating 3D box.
    pub box_index: usize,
    /// Observation angle in the view.
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Det3D {
    pub anchor: Anchor3D,
    pub class: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Det2D {
    pub rect: Box2D,
    pub class: usize,
    pub score: f64,
    /// 3D detection this 2D box was decoded alongside, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<usize>,
}

/// Ground truth of one frame: 3D boxes plus per-view 2D boxes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameGt {
    pub boxes: Vec<Gt3D>,
    pub views: BTreeMap<usize, Vec<Gt2D>>,
}

impl FrameGt {
    pub fn n_2d(&self) -> usize {
        self.views.values().map(Vec::len).sum()
    }

    /// `(view_id, box)` associations of every 3D box.
    pub fn associations(&self) -> Vec<Vec<(usize, Box2D)>> {
        let mut out = vec![Vec::new(); self.boxes.len()];
        for (&v, list) in &self.views {
            for g in list {
                out[g.box_index].push((v, g.rect));
            }
        }
        out
    }
}

/// Detections of one frame.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameDet {
    pub boxes3d: Vec<Det3D>,
    pub boxes2d: BTreeMap<usize, Vec<Det2D>>,
}

/// A 2D head output before thresholding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pred2D {
    pub rect: Box2D,
    pub logits: Vec<f64>,
    /// `(sin, cos)` of the observation angle.
    pub alpha: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    /// Center distance bound in meters.
    pub tau_dis: f64,
    pub tau_iou: f64,
    pub w_class: f64,
    pub w_l1: f64,
    pub w_iou: f64,
    /// `(W, H)` used to normalize box coordinates in the L1 cost.
    pub image_size: [f64; 2],
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            tau_dis: 2.0,
            tau_iou: 0.5,
            w_class: 2.0,
            w_l1: 5.0,
            w_iou: 2.0,
            image_size: [704.0, 256.0],
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_dis > 0.0) {
            return Err(Error::Param(format!("tau_dis must be positive, got {}", self.tau_dis)));
        }
        if !(0.0..=1.0).contains(&self.tau_iou) {
            return Err(Error::Param(format!(
                "tau_iou must lie in [0, 1], got {}",
                self.tau_iou
            )));
        }
        if [self.w_class, self.w_l1, self.w_iou].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Param("cost weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Box as `(cx, cy, w, h)` divided by the image size.
pub(crate) fn normalized(b: &Box2D, image_size: [f64; 2]) -> [f64; 4] {
    [
        b.center[0] / image_size[0],
        b.center[1] / image_size[1],
        b.size[0] / image_size[0],
        b.size[1] / image_size[1],
    ]
}

pub(crate) fn l1_4(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum()
}

/// Log-sigmoid without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `w_class * NLL + w_l1 * L1 + w_iou * (1 - IoU)` between one prediction and
/// one ground-truth box.
pub fn match_cost_2d(pred: &Pred2D, gt: &Gt2D, params: &MatchParams) -> f64 {
    let nll = pred.logits.get(gt.class).map_or(f64::INFINITY, |&z| -log_sigmoid(z));
    let l1 = l1_4(
        normalized(&pred.rect, params.image_size),
        normalized(&gt.rect, params.image_size),
    );
    params.w_class * nll + params.w_l1 * l1 + params.w_iou * (1.0 - iou_unchecked(&pred.rect, &gt.rect))
}

/// Independent Hungarian assignment inside every camera group. Views without
/// ground truth or without predictions get an empty assignment.
pub fn match_2d_per_camera(
    preds: &BTreeMap<usize, Vec<Pred2D>>,
    gt: &BTreeMap<usize, Vec<Gt2D>>,
    params: &MatchParams,
) -> Result<BTreeMap<usize, Assignment>> {
    params.validate()?;
    let mut out = BTreeMap::new();
    for (&view, p) in preds {
        let g = gt.get(&view).map_or(&[][..], Vec::as_slice);
        if let Some(bad) = p.iter().find(|q| g.iter().any(|t| q.logits.len() <= t.class)) {
            return Err(Error::Shape(format!(
                "{} class logits for ground-truth classes in view {view}",
                bad.logits.len()
            )));
        }
        let cost = Array2::from_shape_fn((p.len(), g.len()), |(i, j)| match_cost_2d(&p[i], &g[j], params));
        out.insert(view, hungarian(cost.view())?);
    }
    for &view in gt.keys() {
        out.entry(view).or_insert(Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(cx: f64, class: usize) -> Gt2D {
        Gt2D {
            rect: Box2D::new([cx, 50.0], [20.0, 30.0], 0),
            class,
            box_index: 0,
            alpha: 0.0,
        }
    }

    fn pred(cx: f64, logits: Vec<f64>) -> Pred2D {
        Pred2D {
            rect: Box2D::new([cx, 50.0], [20.0, 30.0], 0),
            logits,
            alpha: [0.0, 1.0],
        }
    }

    #[test]
    fn perfect_predictions_have_zero_localization_cost() {
        let params = MatchParams {
            w_class: 0.0,
            ..Default::default()
        };
        let preds = BTreeMap::from([(0, vec![pred(300.0, vec![0.0, 0.0]), pred(100.0, vec![0.0, 0.0])])]);
        let gts = BTreeMap::from([(0, vec![gt(100.0, 0), gt(300.0, 1)])]);
        let a = &match_2d_per_camera(&preds, &gts, &params).unwrap()[&0];
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn empty_gt_gives_empty_assignment() {
        let preds = BTreeMap::from([(2, vec![pred(1.0, vec![0.0])])]);
        let a = match_2d_per_camera(&preds, &BTreeMap::new(), &MatchParams::default()).unwrap();
        assert!(a[&2].pairs.is_empty());
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert_eq!(log_sigmoid(800.0), 0.0);
    }
}
