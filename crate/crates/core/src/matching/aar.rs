//! Association accuracy between 3D predictions and per-view 2D predictions.
//!
//! A 3D prediction and a 2D ground-truth box form a candidate when the 3D
//! centers are within `tau_dis`, the prediction's projected rectangle reaches
//! `tau_iou` against the 2D box, and classes agree. A candidate is valid when
//! a 2D prediction in the same view (decoded from the same 3D prediction, if
//! that link is known) also reaches `tau_iou` against the same 2D box with
//! the same class.
//!
//! ```text
//! AAR    = 100 * valid / candidates
//! Recall = 100 * candidates / n_gt_2d
//! ```

use serde::{Deserialize, Serialize};

use super::{Det3D, FrameDet, FrameGt, Gt2D, Gt3D};
use crate::error::{Error, Result};
use crate::geometry::{iou_unchecked, project_anchor, CameraView, Rig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AarResult {
    pub tau_dis: f64,
    pub tau_iou: f64,
    pub n_candidate: usize,
    pub n_valid: usize,
    pub n_gt_2d: usize,
    pub aar: f64,
    pub recall: f64,
    /// Set when there were no candidates and `aar` was reported as 0.
    pub no_candidates: bool,
}

pub fn candidate_match(pred: &Det3D, gt2d: &Gt2D, gt3d: &Gt3D, view: &CameraView, tau_dis: f64, tau_iou: f64) -> bool {
    if pred.class != gt3d.class || gt2d.class != gt3d.class {
        return false;
    }
    if (pred.anchor.center_vec() - gt3d.anchor.center_vec()).norm() > tau_dis {
        return false;
    }
    let p = project_anchor(view, &pred.anchor);
    match p.rect {
        Some(r) if p.valid => iou_unchecked(&r, &gt2d.rect) >= tau_iou,
        _ => false,
    }
}

pub fn aar(frames: &[(FrameGt, FrameDet)], rig: &Rig, tau_dis: f64, tau_iou: f64) -> Result<AarResult> {
    if !(tau_dis > 0.0) {
        return Err(Error::Param(format!("tau_dis must be positive, got {tau_dis}")));
    }
    let mut n_candidate = 0;
    let mut n_valid = 0;
    let mut n_gt_2d = 0;
    for (gt, det) in frames {
        n_gt_2d += gt.n_2d();
        for (&view_id, gts) in &gt.views {
            let view = rig.view(view_id)?;
            let preds2d = det.boxes2d.get(&view_id).map_or(&[][..], Vec::as_slice);
            for g in gts {
                let g3 = gt
                    .boxes
                    .get(g.box_index)
                    .ok_or_else(|| Error::Shape(format!("2D box links to missing 3D box {}", g.box_index)))?;
                for (i, p) in det.boxes3d.iter().enumerate() {
                    if !candidate_match(p, g, g3, view, tau_dis, tau_iou) {
                        continue;
                    }
                    n_candidate += 1;
                    let valid = preds2d.iter().any(|k| {
                        k.source.is_none_or(|s| s == i)
                            && k.class == g.class
                            && iou_unchecked(&k.rect, &g.rect) >= tau_iou
                    });
                    if valid {
                        n_valid += 1;
                    }
                }
            }
        }
    }
    let no_candidates = n_candidate == 0;
    Ok(AarResult {
        tau_dis,
        tau_iou,
        n_candidate,
        n_valid,
        n_gt_2d,
        aar: if no_candidates {
            0.0
        } else {
            100.0 * n_valid as f64 / n_candidate as f64
        },
        recall: if n_gt_2d == 0 {
            0.0
        } else {
            100.0 * n_candidate as f64 / n_gt_2d as f64
        },
        no_candidates,
    })
}

/// `start, start + step, ..., <= end` (inclusive up to rounding).
pub fn tau_sweep(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(end >= start) {
        return Err(Error::Param(format!("bad sweep {start}:{end}:{step}")));
    }
    let n = ((end - start) / step + 1e-9).floor() as usize;
    // rounded to 1e-9 so 0.1 * 3 prints as 0.3
    Ok((0..=n)
        .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
        .collect())
}

pub fn aar_curve(frames: &[(FrameGt, FrameDet)], rig: &Rig, tau_dis: f64, taus: &[f64]) -> Result<Vec<AarResult>> {
    taus.iter().map(|&t| aar(frames, rig, tau_dis, t)).collect()
}
