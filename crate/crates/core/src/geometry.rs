//! Pinhole multi-camera model.
//!
//! Frames:
//! - **ego**: x forward, y left, z up (meters).
//! - **camera**: x right, y down, z along the optical axis.
//! - **pixel**: `u` to the right, `v` down; a view covers `(0, W) x (0, H)`.
//!
//! A [`CameraView`] maps ego points to pixels through its extrinsic (ego to
//! camera) and intrinsic matrices. [`project_anchor`] implements the view
//! validity test used by dynamic query allocation: an anchor is valid in a
//! view iff at least one of its nine object points (center plus eight corners)
//! lands strictly inside the image.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::crop_scale::CropRule;
use crate::error::{Error, Result};

/// Camera-frame depth at or below which a point counts as behind the camera.
pub const EPS_DEPTH: f64 = 1e-3;

/// Number of object points projected per anchor (center + 8 corners).
pub const OBJECT_POINTS: usize = 9;

const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub view_id: usize,
    pub name: Option<String>,
    intrinsics: Matrix3<f64>,
    extrinsic: Matrix4<f64>,
    width: u32,
    height: u32,
    derived_from: Option<usize>,
}

impl CameraView {
    /// Builds a physical camera, checking focal lengths, principal point and
    /// that the extrinsic rotation is orthonormal.
    pub fn new(
        view_id: usize,
        intrinsics: Matrix3<f64>,
        extrinsic: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let view = Self {
            view_id,
            name: None,
            intrinsics,
            extrinsic,
            width,
            height,
            derived_from: None,
        };
        view.validate()?;
        Ok(view)
    }

    /// Builds a view derived from `source` by cropping and rescaling. The
    /// principal point may sit on or beyond the image edge for edge-aligned
    /// crops, so that check is skipped.
    pub(crate) fn derived(
        view_id: usize,
        source: usize,
        intrinsics: Matrix3<f64>,
        extrinsic: Matrix4<f64>,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let view = Self {
            view_id,
            name: None,
            intrinsics,
            extrinsic,
            width,
            height,
            derived_from: Some(source),
        };
        view.validate()?;
        Ok(view)
    }

    /// Camera mounted at `position` (ego frame) looking horizontally along
    /// `yaw` (radians, counter-clockwise from ego +x).
    #[allow(clippy::too_many_arguments)]
    pub fn looking_along(
        view_id: usize,
        position: Vector3<f64>,
        yaw: f64,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let (s, c) = yaw.sin_cos();
        // rows: camera x (right), camera y (down), camera z (forward)
        let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
        let t = -(rot * position);
        let mut extrinsic = Matrix4::identity();
        extrinsic.fixed_view_mut::<3, 3>(0, 0).copy_from(&rot);
        extrinsic.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        let intrinsics = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Self::new(view_id, intrinsics, extrinsic, width, height)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidCamera {
            view_id: self.view_id,
            reason,
        };
        if !(self.fx() > 0.0 && self.fy() > 0.0) {
            return Err(bad(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx(),
                self.fy()
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(bad("image size must be positive".into()));
        }
        if self.derived_from.is_none() {
            let (cx, cy) = (self.cx(), self.cy());
            if !(0.0..self.width as f64).contains(&cx) || !(0.0..self.height as f64).contains(&cy) {
                return Err(bad(format!("principal point ({cx}, {cy}) outside the image")));
            }
        }
        if self.extrinsic.iter().any(|v| !v.is_finite()) || self.intrinsics.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite calibration".into()));
        }
        let r = self.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > ORTHONORMAL_TOL {
            return Err(bad(format!(
                "extrinsic rotation not orthonormal (|R^T R - I| = {err:e})"
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> &Matrix3<f64> {
        &self.intrinsics
    }

    pub fn extrinsic(&self) -> &Matrix4<f64> {
        &self.extrinsic
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.extrinsic.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.extrinsic.fixed_view::<3, 1>(0, 3).into_owned()
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[(1, 2)]
    }
    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn derived_from(&self) -> Option<usize> {
        self.derived_from
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Projects an ego point; `None` when it lies at or behind [`EPS_DEPTH`].
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let pc = self.to_camera(p);
        if pc.z <= EPS_DEPTH {
            return None;
        }
        let k = &self.intrinsics;
        let x = pc.x / pc.z;
        let y = pc.y / pc.z;
        Some([k[(0, 0)] * x + k[(0, 1)] * y + k[(0, 2)], k[(1, 1)] * y + k[(1, 2)]])
    }

    /// Strict bounds test `0 < u < W && 0 < v < H`.
    pub fn contains(&self, uv: [f64; 2]) -> bool {
        uv[0] > 0.0 && uv[0] < self.width as f64 && uv[1] > 0.0 && uv[1] < self.height as f64
    }
}

#[derive(Serialize, Deserialize)]
struct RawView {
    view_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    intrinsics: [[f64; 3]; 3],
    extrinsic: [[f64; 4]; 4],
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    derived_from: Option<usize>,
}

impl Serialize for CameraView {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let intrinsics: [[f64; 3]; 3] = std::array::from_fn(|r| std::array::from_fn(|c| self.intrinsics[(r, c)]));
        let extrinsic: [[f64; 4]; 4] = std::array::from_fn(|r| std::array::from_fn(|c| self.extrinsic[(r, c)]));
        RawView {
            view_id: self.view_id,
            name: self.name.clone(),
            intrinsics,
            extrinsic,
            width: self.width,
            height: self.height,
            derived_from: self.derived_from,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CameraView {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawView::deserialize(d)?;
        let intrinsics = Matrix3::from_fn(|r, c| raw.intrinsics[r][c]);
        let extrinsic = Matrix4::from_fn(|r, c| raw.extrinsic[r][c]);
        let view = match raw.derived_from {
            Some(src) => CameraView::derived(raw.view_id, src, intrinsics, extrinsic, raw.width, raw.height),
            None => CameraView::new(raw.view_id, intrinsics, extrinsic, raw.width, raw.height),
        }
        .map_err(serde::de::Error::custom)?;
        Ok(CameraView { name: raw.name, ..view })
    }
}

/// An ordered set of views. Camera groups follow this order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rig {
    views: Vec<CameraView>,
}

impl Rig {
    /// Sorts views by id and rejects duplicates. An empty rig is allowed here;
    /// operations that need a view report [`Error::EmptyRig`].
    pub fn new(mut views: Vec<CameraView>) -> Result<Self> {
        views.sort_by_key(|v| v.view_id);
        for w in views.windows(2) {
            if w[0].view_id == w[1].view_id {
                return Err(Error::DuplicateView(w[0].view_id));
            }
        }
        Ok(Self { views })
    }

    pub fn views(&self) -> &[CameraView] {
        &self.views
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn view(&self, view_id: usize) -> Result<&CameraView> {
        self.views
            .iter()
            .find(|v| v.view_id == view_id)
            .ok_or(Error::UnknownView(view_id))
    }

    /// Position of a view inside the rig (its camera-group index).
    pub fn position(&self, view_id: usize) -> Option<usize> {
        self.views.iter().position(|v| v.view_id == view_id)
    }

    pub fn next_view_id(&self) -> usize {
        self.views.last().map_or(0, |v| v.view_id + 1)
    }

    pub fn without_view(&self, view_id: usize) -> Self {
        Self {
            views: self.views.iter().filter(|v| v.view_id != view_id).cloned().collect(),
        }
    }

    pub(crate) fn push(&mut self, view: CameraView) -> Result<()> {
        if self.position(view.view_id).is_some() {
            return Err(Error::DuplicateView(view.view_id));
        }
        self.views.push(view);
        self.views.sort_by_key(|v| v.view_id);
        Ok(())
    }

    /// Six surround cameras at 704x256 resembling a nuScenes-style rig:
    /// front, front-right, back-right, back, back-left, front-left.
    pub fn surround_six() -> Self {
        let mount = |x: f64, y: f64| Vector3::new(x, y, 1.6);
        let deg = std::f64::consts::PI / 180.0;
        let specs: [(&str, f64, Vector3<f64>, f64); 6] = [
            ("CAM_FRONT", 0.0, mount(1.7, 0.0), 560.0),
            ("CAM_FRONT_RIGHT", -55.0 * deg, mount(1.5, -0.5), 560.0),
            ("CAM_BACK_RIGHT", -110.0 * deg, mount(1.0, -0.5), 560.0),
            ("CAM_BACK", 180.0 * deg, mount(0.0, 0.0), 350.0),
            ("CAM_BACK_LEFT", 110.0 * deg, mount(1.0, 0.5), 560.0),
            ("CAM_FRONT_LEFT", 55.0 * deg, mount(1.5, 0.5), 560.0),
        ];
        let views = specs
            .iter()
            .enumerate()
            .map(|(id, (name, yaw, pos, f))| {
                CameraView::looking_along(id, *pos, *yaw, *f, *f, 352.0, 128.0, 704, 256)
                    .expect("built-in rig is valid")
                    .with_name(*name)
            })
            .collect();
        Self { views }
    }
}

impl<'de> Deserialize<'de> for Rig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            views: Vec<CameraView>,
        }
        let raw = Raw::deserialize(d)?;
        Rig::new(raw.views).map_err(serde::de::Error::custom)
    }
}

/// On-disk rig description: physical views plus optional crop-and-scale rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigFile {
    pub views: Vec<CameraView>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub derived_views: Vec<CropRule>,
}

impl RigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The physical rig without derived views.
    pub fn base_rig(&self) -> Result<Rig> {
        Rig::new(self.views.clone())
    }

    /// The rig with every derived view appended.
    pub fn rig(&self) -> Result<Rig> {
        crate::crop_scale::extend_rig(&self.base_rig()?, &self.derived_views)
    }
}

/// 3D box hypothesis `(x, y, z, w, l, h, yaw, vx, vy)` in the ego frame.
///
/// `l` runs along the heading (local x), `w` across it (local y) and `h`
/// along z; `center` is the box's geometric center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 9]", into = "[f64; 9]")]
pub struct Anchor3D {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

impl Anchor3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64, velocity: [f64; 2]) -> Self {
        Self {
            center,
            size,
            yaw,
            velocity,
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        let [vx, vy] = self.velocity;
        [x, y, z, w, l, h, self.yaw, vx, vy]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self::new([a[0], a[1], a[2]], [a[3], a[4], a[5]], a[6], [a[7], a[8]])
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidAnchor("non-finite component".into()));
        }
        if self.size.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidAnchor(format!(
                "sizes must be positive, got {:?}",
                self.size
            )));
        }
        Ok(())
    }

    pub fn center_vec(&self) -> Vector3<f64> {
        Vector3::from(self.center)
    }
}

impl From<[f64; 9]> for Anchor3D {
    fn from(a: [f64; 9]) -> Self {
        Self::from_array(a)
    }
}

impl From<Anchor3D> for [f64; 9] {
    fn from(a: Anchor3D) -> Self {
        a.to_array()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(theta: f64) -> f64 {
    use std::f64::consts::PI;
    let mut t = theta.rem_euclid(2.0 * PI);
    if t > PI {
        t -= 2.0 * PI;
    }
    t
}

/// The eight corners of the yaw-rotated cuboid.
///
/// Order: bottom face counter-clockwise starting at local `(+l/2, +w/2)`,
/// i.e. `(+,+), (-,+), (-,-), (+,-)`, then the top face in the same order.
pub fn corners_of(anchor: &Anchor3D) -> [Vector3<f64>; 8] {
    let [w, l, h] = anchor.size;
    let (s, c) = anchor.yaw.sin_cos();
    let c0 = anchor.center_vec();
    let signs = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
    let mut out = [Vector3::zeros(); 8];
    for (face, sz) in [-0.5, 0.5].into_iter().enumerate() {
        for (k, (sx, sy)) in signs.iter().enumerate() {
            let lx = sx * 0.5 * l;
            let ly = sy * 0.5 * w;
            out[face * 4 + k] = c0 + Vector3::new(c * lx - s * ly, s * lx + c * ly, sz * h);
        }
    }
    out
}

/// Center followed by the eight corners.
pub fn object_points(anchor: &Anchor3D) -> [Vector3<f64>; OBJECT_POINTS] {
    let corners = corners_of(anchor);
    let mut pts = [anchor.center_vec(); OBJECT_POINTS];
    pts[1..].copy_from_slice(&corners);
    pts
}

/// Axis-aligned pixel rectangle in one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub center: [f64; 2],
    pub size: [f64; 2],
    pub view_id: usize,
}

impl Box2D {
    pub fn new(center: [f64; 2], size: [f64; 2], view_id: usize) -> Self {
        Self { center, size, view_id }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64, view_id: usize) -> Self {
        Self::new(
            [0.5 * (x0 + x1), 0.5 * (y0 + y1)],
            [(x1 - x0).max(0.0), (y1 - y0).max(0.0)],
            view_id,
        )
    }

    /// `[x0, y0, x1, y1]`.
    pub fn corners(&self) -> [f64; 4] {
        let [cx, cy] = self.center;
        let [w, h] = self.size;
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    }

    pub fn area(&self) -> f64 {
        self.size[0] * self.size[1]
    }
}

/// Intersection over union of two rectangles in the same view.
pub fn iou_2d(a: &Box2D, b: &Box2D) -> Result<f64> {
    if a.view_id != b.view_id {
        return Err(Error::CrossViewIou {
            a: a.view_id,
            b: b.view_id,
        });
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &Box2D, b: &Box2D) -> f64 {
    let [ax0, ay0, ax1, ay1] = a.corners();
    let [bx0, by0, bx1, by1] = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Result of projecting one anchor into one view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedAnchor {
    /// Center then corners; `None` for points behind the camera.
    pub points: [Option<[f64; 2]>; OBJECT_POINTS],
    pub in_bounds: [bool; OBJECT_POINTS],
    pub valid: bool,
    /// Bounding rectangle of the present points, clipped to the image.
    pub rect: Option<Box2D>,
    /// Same rectangle before clipping.
    pub unclipped: Option<Box2D>,
    pub center_in_view: bool,
}

pub fn project_anchor(view: &CameraView, anchor: &Anchor3D) -> ProjectedAnchor {
    let pts = object_points(anchor);
    let mut points = [None; OBJECT_POINTS];
    let mut in_bounds = [false; OBJECT_POINTS];
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (k, p) in pts.iter().enumerate() {
        if let Some(uv) = view.project_point(p) {
            points[k] = Some(uv);
            in_bounds[k] = view.contains(uv);
            x0 = x0.min(uv[0]);
            y0 = y0.min(uv[1]);
            x1 = x1.max(uv[0]);
            y1 = y1.max(uv[1]);
        }
    }
    let valid = in_bounds.iter().any(|&b| b);
    let (rect, unclipped) = if valid {
        let (w, h) = (view.width() as f64, view.height() as f64);
        (
            Some(Box2D::from_corners(
                x0.max(0.0),
                y0.max(0.0),
                x1.min(w),
                y1.min(h),
                view.view_id,
            )),
            Some(Box2D::from_corners(x0, y0, x1, y1, view.view_id)),
        )
    } else {
        (None, None)
    };
    ProjectedAnchor {
        points,
        in_bounds,
        valid,
        rect,
        unclipped,
        center_in_view: in_bounds[0],
    }
}
