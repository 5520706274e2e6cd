//! JSON interchange for detections and ground truth.
//!
//! ```json
//! {
//!   "format": "mvdet-det/1",
//!   "frames": [{
//!     "boxes3d": [[x, y, z, w, l, h, yaw, vx, vy, class, score]],
//!     "boxes2d": {"0": [[cx, cy, w, h, class, score]]},
//!     "links":   {"0": [3]},
//!     "alpha":   {"0": [0.25]}
//!   }]
//! }
//! ```
//!
//! `links` maps each 2D box to a 3D box of the same frame (the originating
//! ground truth, or the 3D detection it was decoded with; `null` if unknown).
//! `alpha` carries ground-truth observation angles. Ground-truth files use
//! format `mvdet-gt/1` and embed the camera rig.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Anchor3D, Box2D, Rig};
use crate::matching::{Det2D, Det3D, FrameDet, FrameGt, Gt2D, Gt3D};

pub const DET_FORMAT: &str = "mvdet-det/1";
pub const GT_FORMAT: &str = "mvdet-gt/1";

pub fn encode_box3d(anchor: &Anchor3D, class: usize, score: f64) -> [f64; 11] {
    let a = anchor.to_array();
    [
        a[0],
        a[1],
        a[2],
        a[3],
        a[4],
        a[5],
        a[6],
        a[7],
        a[8],
        class as f64,
        score,
    ]
}

pub fn decode_box3d(row: &[f64; 11]) -> Result<(Anchor3D, usize, f64)> {
    let mut a = [0.0; 9];
    a.copy_from_slice(&row[..9]);
    Ok((Anchor3D::from_array(a), decode_class(row[9])?, row[10]))
}

pub fn encode_box2d(rect: &Box2D, class: usize, score: f64) -> [f64; 6] {
    [
        rect.center[0],
        rect.center[1],
        rect.size[0],
        rect.size[1],
        class as f64,
        score,
    ]
}

pub fn decode_box2d(row: &[f64; 6], view_id: usize) -> Result<(Box2D, usize, f64)> {
    Ok((
        Box2D::new([row[0], row[1]], [row[2], row[3]], view_id),
        decode_class(row[4])?,
        row[5],
    ))
}

fn decode_class(v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(Error::Param(format!(
            "class id must be a non-negative integer, got {v}"
        )))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct RawFrame {
    pub boxes3d: Vec<[f64; 11]>,
    pub boxes2d: BTreeMap<usize, Vec<[f64; 6]>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub links: BTreeMap<usize, Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub alpha: BTreeMap<usize, Vec<f64>>,
}

impl RawFrame {
    pub fn from_gt(gt: &FrameGt) -> Self {
        let mut raw = RawFrame {
            boxes3d: gt.boxes.iter().map(|b| encode_box3d(&b.anchor, b.class, 1.0)).collect(),
            ..Default::default()
        };
        for (&v, list) in &gt.views {
            raw.boxes2d
                .insert(v, list.iter().map(|g| encode_box2d(&g.rect, g.class, 1.0)).collect());
            raw.links.insert(v, list.iter().map(|g| Some(g.box_index)).collect());
            raw.alpha.insert(v, list.iter().map(|g| g.alpha).collect());
        }
        raw
    }

    pub fn to_gt(&self) -> Result<FrameGt> {
        let boxes = self
            .boxes3d
            .iter()
            .map(|r| decode_box3d(r).map(|(anchor, class, _)| Gt3D { anchor, class }))
            .collect::<Result<Vec<_>>>()?;
        let mut views = BTreeMap::new();
        for (&v, rows) in &self.boxes2d {
            let links = self.links.get(&v).map_or(&[][..], Vec::as_slice);
            let alpha = self.alpha.get(&v).map_or(&[][..], Vec::as_slice);
            if links.len() != rows.len() || alpha.len() != rows.len() {
                return Err(Error::Shape(format!(
                    "view {v}: ground-truth 2D boxes need a link and an alpha each"
                )));
            }
            let mut list = Vec::with_capacity(rows.len());
            for ((row, link), &a) in rows.iter().zip(links).zip(alpha) {
                let (rect, class, _) = decode_box2d(row, v)?;
                let box_index = link
                    .filter(|&i| i < boxes.len())
                    .ok_or_else(|| Error::Shape(format!("view {v}: 2D box links to missing 3D box {link:?}")))?;
                list.push(Gt2D {
                    rect,
                    class,
                    box_index,
                    alpha: a,
                });
            }
            views.insert(v, list);
        }
        Ok(FrameGt { boxes, views })
    }

    pub fn from_det(det: &FrameDet) -> Self {
        let mut raw = RawFrame {
            boxes3d: det
                .boxes3d
                .iter()
                .map(|b| encode_box3d(&b.anchor, b.class, b.score))
                .collect(),
            ..Default::default()
        };
        let any_link = det.boxes2d.values().flatten().any(|d| d.source.is_some());
        for (&v, list) in &det.boxes2d {
            raw.boxes2d.insert(
                v,
                list.iter().map(|d| encode_box2d(&d.rect, d.class, d.score)).collect(),
            );
            if any_link {
                raw.links.insert(v, list.iter().map(|d| d.source).collect());
            }
        }
        raw
    }

    pub fn to_det(&self) -> Result<FrameDet> {
        let boxes3d = self
            .boxes3d
            .iter()
            .map(|r| decode_box3d(r).map(|(anchor, class, score)| Det3D { anchor, class, score }))
            .collect::<Result<Vec<_>>>()?;
        let mut boxes2d = BTreeMap::new();
        for (&v, rows) in &self.boxes2d {
            let links = self.links.get(&v);
            if links.is_some_and(|l| l.len() != rows.len()) {
                return Err(Error::Shape(format!("view {v}: link count differs from box count")));
            }
            let mut list = Vec::with_capacity(rows.len());
            for (k, row) in rows.iter().enumerate() {
                let (rect, class, score) = decode_box2d(row, v)?;
                list.push(Det2D {
                    rect,
                    class,
                    score,
                    source: links.and_then(|l| l[k]),
                });
            }
            boxes2d.insert(v, list);
        }
        Ok(FrameDet { boxes3d, boxes2d })
    }
}

#[derive(Serialize, Deserialize)]
struct RawDetFile {
    format: String,
    frames: Vec<RawFrame>,
}

#[derive(Serialize, Deserialize)]
struct RawGtFile {
    format: String,
    rig: Rig,
    frames: Vec<RawFrame>,
}

fn check_format(found: &str, expected: &'static str) -> Result<()> {
    if found != expected {
        return Err(Error::Version {
            expected,
            found: found.to_string(),
        });
    }
    Ok(())
}

pub fn detections_to_json(frames: &[FrameDet]) -> Result<String> {
    let raw = RawDetFile {
        format: DET_FORMAT.into(),
        frames: frames.iter().map(RawFrame::from_det).collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn detections_from_json(text: &str) -> Result<Vec<FrameDet>> {
    let raw: RawDetFile = serde_json::from_str(text)?;
    check_format(&raw.format, DET_FORMAT)?;
    raw.frames.iter().map(RawFrame::to_det).collect()
}

pub fn ground_truth_to_json(rig: &Rig, frames: &[FrameGt]) -> Result<String> {
    let raw = RawGtFile {
        format: GT_FORMAT.into(),
        rig: rig.clone(),
        frames: frames.iter().map(RawFrame::from_gt).collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn ground_truth_from_json(text: &str) -> Result<(Rig, Vec<FrameGt>)> {
    let raw: RawGtFile = serde_json::from_str(text)?;
    check_format(&raw.format, GT_FORMAT)?;
    let frames = raw.frames.iter().map(RawFrame::to_gt).collect::<Result<Vec<_>>>()?;
    Ok((raw.rig, frames))
}
