//! Crop-and-scale long-range views.
//!
//! A region of the original-resolution image is cropped and rescaled to the
//! model input size. The result behaves as a new pinhole camera with scaled
//! focal lengths and a shifted principal point:
//!
//! ```text
//! fx' = s * fx        cx' = s * (cx - ox)
//! fy' = s * fy        cy' = s * (cy - oy)        s = W / W_c
//! ```
//!
//! where `(ox, oy)` is the crop origin in original pixels. The crop is
//! `W_o / scale_rate` wide and keeps the model input aspect ratio.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraView, Rig};

const BOUNDS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Crop centered on the principal point.
    CenteredOnFocal,
    /// Left edge flush with the image, vertical center on the horizon (`cy`).
    LeftAlignedHorizon,
    /// Right edge flush with the image, vertical center on the horizon (`cy`).
    RightAlignedHorizon,
}

impl Placement {
    pub const ALL: [Placement; 3] = [
        Placement::CenteredOnFocal,
        Placement::LeftAlignedHorizon,
        Placement::RightAlignedHorizon,
    ];
}

fn default_scale_rate() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRule {
    pub source_view_id: usize,
    pub placement: Placement,
    #[serde(default = "default_scale_rate")]
    pub scale_rate: f64,
    /// Model input size `(W, H)`; defaults to the source view size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_size: Option<[u32; 2]>,
    /// Original image size `(W_o, H_o)` the source view was resized from;
    /// defaults to the source view size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_size: Option<[u32; 2]>,
}

impl CropRule {
    pub fn new(source_view_id: usize, placement: Placement, scale_rate: f64) -> Self {
        Self {
            source_view_id,
            placement,
            scale_rate,
            output_size: None,
            original_size: None,
        }
    }
}

/// Maps original-resolution pixels into the derived view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMap {
    pub origin: [f64; 2],
    pub scale: f64,
}

impl PixelMap {
    pub fn apply(&self, uv: [f64; 2]) -> [f64; 2] {
        [
            self.scale * (uv[0] - self.origin[0]),
            self.scale * (uv[1] - self.origin[1]),
        ]
    }
}

/// Derives a long-range view from `original` (a camera at original
/// resolution). The derived view gets `view_id` and `output_size`.
pub fn derive_view(
    original: &CameraView,
    rule: &CropRule,
    output_size: [u32; 2],
    view_id: usize,
) -> Result<(CameraView, PixelMap)> {
    if !(rule.scale_rate.is_finite() && rule.scale_rate > 1.0) {
        return Err(Error::Crop(format!(
            "scale rate must exceed 1, got {}",
            rule.scale_rate
        )));
    }
    let [w, h] = output_size.map(f64::from);
    let (w_o, h_o) = (original.width() as f64, original.height() as f64);
    let crop_w = w_o / rule.scale_rate;
    let crop_h = crop_w * h / w;
    let (cx, cy) = (original.cx(), original.cy());
    let oy = cy - 0.5 * crop_h;
    let ox = match rule.placement {
        Placement::CenteredOnFocal => cx - 0.5 * crop_w,
        Placement::LeftAlignedHorizon => 0.0,
        Placement::RightAlignedHorizon => w_o - crop_w,
    };
    if ox < -BOUNDS_TOL || oy < -BOUNDS_TOL || ox + crop_w > w_o + BOUNDS_TOL || oy + crop_h > h_o + BOUNDS_TOL {
        return Err(Error::Crop(format!(
            "[{ox:.3}, {oy:.3}] + [{crop_w:.3} x {crop_h:.3}] exceeds the {w_o} x {h_o} original of view {}",
            original.view_id
        )));
    }
    let s = w / crop_w;
    let k = original.intrinsics();
    let intrinsics = Matrix3::new(
        s * k[(0, 0)],
        s * k[(0, 1)],
        s * (cx - ox),
        0.0,
        s * k[(1, 1)],
        s * (cy - oy),
        0.0,
        0.0,
        1.0,
    );
    let view = CameraView::derived(
        view_id,
        original.view_id,
        intrinsics,
        *original.extrinsic(),
        output_size[0],
        output_size[1],
    )?;
    Ok((
        view,
        PixelMap {
            origin: [ox, oy],
            scale: s,
        },
    ))
}

/// The source view rescaled to `original_size` (a plain resize of the
/// model-input camera).
pub fn original_camera(source: &CameraView, original_size: [u32; 2]) -> Result<CameraView> {
    let kx = original_size[0] as f64 / source.width() as f64;
    let ky = original_size[1] as f64 / source.height() as f64;
    let k = source.intrinsics();
    let intrinsics = Matrix3::new(
        kx * k[(0, 0)],
        kx * k[(0, 1)],
        kx * k[(0, 2)],
        0.0,
        ky * k[(1, 1)],
        ky * k[(1, 2)],
        0.0,
        0.0,
        1.0,
    );
    CameraView::new(
        source.view_id,
        intrinsics,
        *source.extrinsic(),
        original_size[0],
        original_size[1],
    )
}

/// Appends one derived view per rule with fresh ids.
pub fn extend_rig(rig: &Rig, rules: &[CropRule]) -> Result<Rig> {
    let mut seen = std::collections::BTreeSet::new();
    for r in rules {
        if !seen.insert(r.source_view_id) {
            return Err(Error::DuplicateCropRule(r.source_view_id));
        }
    }
    let mut out = rig.clone();
    for rule in rules {
        let source = rig.view(rule.source_view_id)?;
        let input_size = [source.width(), source.height()];
        let original = original_camera(source, rule.original_size.unwrap_or(input_size))?;
        let id = out.next_view_id();
        let (mut view, _) = derive_view(&original, rule, rule.output_size.unwrap_or(input_size), id)?;
        if let Some(name) = &source.name {
            view.name = Some(format!("{name}_CROP"));
        }
        out.push(view)?;
    }
    Ok(out)
}

/// Front and rear centered rules for the built-in surround rig.
pub fn front_rear_rules(scale_rate: f64) -> Vec<CropRule> {
    vec![
        CropRule::new(0, Placement::CenteredOnFocal, scale_rate),
        CropRule::new(3, Placement::CenteredOnFocal, scale_rate),
    ]
}
