//! 11-point interpolated average precision for per-view 2D detections.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{Det2D, Gt2D};
use crate::geometry::iou_unchecked;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub class: usize,
    pub iou_threshold: f64,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub n_gt: usize,
    pub n_pred: usize,
}

type ViewMap<T> = BTreeMap<usize, Vec<T>>;

/// One entry per (class, threshold) over every class seen in ground truth or
/// predictions. Predictions are ranked by descending score (ties keep frame,
/// view and list order) and greedily take the best-overlapping unmatched
/// ground truth of their frame and view.
pub fn ap_2d(frames: &[(ViewMap<Gt2D>, ViewMap<Det2D>)], iou_thresholds: &[f64]) -> Vec<ApEntry> {
    let mut classes = BTreeSet::new();
    for (g, p) in frames {
        classes.extend(g.values().flatten().map(|b| b.class));
        classes.extend(p.values().flatten().map(|b| b.class));
    }
    let mut out = Vec::new();
    for &class in &classes {
        for &thr in iou_thresholds {
            out.push(ap_one(frames, class, thr));
        }
    }
    out
}

fn ap_one(frames: &[(ViewMap<Gt2D>, ViewMap<Det2D>)], class: usize, thr: f64) -> ApEntry {
    let mut preds: Vec<(f64, usize, usize, &Det2D)> = Vec::new();
    let mut n_gt = 0;
    for (f, (g, p)) in frames.iter().enumerate() {
        n_gt += g.values().flatten().filter(|b| b.class == class).count();
        for (&v, list) in p {
            preds.extend(list.iter().filter(|d| d.class == class).map(|d| (d.score, f, v, d)));
        }
    }
    let n_pred = preds.len();
    if n_gt == 0 {
        return ApEntry {
            class,
            iou_threshold: thr,
            ap: None,
            n_gt,
            n_pred,
        };
    }
    // stable sort keeps frame/view/list order among equal scores
    preds.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: BTreeMap<(usize, usize), Vec<bool>> = BTreeMap::new();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(n_pred);
    for (rank, (_, f, v, d)) in preds.iter().enumerate() {
        let gts = frames[*f].0.get(v).map_or(&[][..], Vec::as_slice);
        let flags = used.entry((*f, *v)).or_insert_with(|| vec![false; gts.len()]);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if flags[j] || g.class != class {
                continue;
            }
            let iou = iou_unchecked(&d.rect, &g.rect);
            if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            flags[j] = true;
            tp += 1;
        }
        curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
    }
    let ap = (0..=10)
        .map(|k| {
            let r = k as f64 / 10.0;
            curve
                .iter()
                .filter(|(rec, _)| *rec >= r - 1e-12)
                .map(|(_, prec)| *prec)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0;
    ApEntry {
        class,
        iou_threshold: thr,
        ap: Some(ap),
        n_gt,
        n_pred,
    }
}
