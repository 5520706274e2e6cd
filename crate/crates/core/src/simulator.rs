//! Synthetic multi-camera scenes.
//!
//! Ground-truth 3D boxes are rejection-sampled around the ego vehicle; the
//! per-view 2D ground truth is the clipped projection rectangle of every box
//! that is valid in that view. Feature maps are analytic Gaussian bumps at
//! projected box centers, and depth maps hold the nearest box-center depth
//! over each box rectangle.

use std::collections::BTreeMap;

use rand::distributions::WeightedIndex;
use rand::prelude::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{corners_of, project_anchor, wrap_angle, Anchor3D, Box2D, CameraView, Rig, EPS_DEPTH};
use crate::groupattn::{FeatureBank, FeatureMap};
use crate::interchange::RawFrame;
use crate::matching::{Det2D, Det3D, FrameDet, FrameGt, Gt2D, Gt3D};

pub const SCENE_FORMAT: &str = "mvdet-scene/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub name: String,
    pub weight: f64,
    /// Mean `(w, l, h)` in meters.
    pub size: [f64; 3],
    /// Relative size spread: each dimension is scaled by `1 + U(-s, s)`.
    pub size_jitter: f64,
    pub max_speed: f64,
}

impl ClassPrior {
    fn new(name: &str, weight: f64, size: [f64; 3], max_speed: f64) -> Self {
        Self {
            name: name.into(),
            weight,
            size,
            size_jitter: 0.15,
            max_speed,
        }
    }
}

/// Ten road-scene classes with typical dimensions.
pub fn default_classes() -> Vec<ClassPrior> {
    vec![
        ClassPrior::new("car", 0.40, [1.9, 4.6, 1.7], 15.0),
        ClassPrior::new("truck", 0.08, [2.5, 6.9, 2.8], 12.0),
        ClassPrior::new("construction_vehicle", 0.02, [2.8, 6.4, 3.2], 3.0),
        ClassPrior::new("bus", 0.03, [2.9, 11.0, 3.5], 10.0),
        ClassPrior::new("trailer", 0.03, [2.9, 12.3, 3.9], 8.0),
        ClassPrior::new("barrier", 0.12, [2.5, 0.5, 1.0], 0.0),
        ClassPrior::new("motorcycle", 0.03, [0.8, 2.1, 1.4], 10.0),
        ClassPrior::new("bicycle", 0.03, [0.6, 1.7, 1.3], 5.0),
        ClassPrior::new("pedestrian", 0.18, [0.7, 0.7, 1.8], 1.5),
        ClassPrior::new("traffic_cone", 0.08, [0.4, 0.4, 1.1], 0.0),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_boxes: usize,
    /// Ego-frame extents of box centers, meters.
    pub x_range: [f64; 2],
    pub y_range: [f64; 2],
    /// Offset of the box bottom from the ground plane.
    pub ground_jitter: f64,
    pub classes: Vec<ClassPrior>,
    /// Total rejected draws tolerated before giving up.
    pub max_rejections: usize,
    /// Depth-map downsampling factor.
    pub depth_stride: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            n_boxes: 30,
            x_range: [-50.0, 50.0],
            y_range: [-50.0, 50.0],
            ground_jitter: 0.2,
            classes: default_classes(),
            max_rejections: 10_000,
            depth_stride: 16,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[1] > r[0];
        if !ok(self.x_range) || !ok(self.y_range) {
            return Err(Error::Param("scene ranges must be positive-width intervals".into()));
        }
        if self.classes.is_empty()
            || self
                .classes
                .iter()
                .any(|c| !(c.weight >= 0.0) || c.size.iter().any(|s| !(*s > 0.0)))
        {
            return Err(Error::Param(
                "class priors need non-negative weights and positive sizes".into(),
            ));
        }
        if self.depth_stride == 0 {
            return Err(Error::Param("depth stride must be positive".into()));
        }
        Ok(())
    }
}

/// Depth per map cell; `INFINITY` where no box covers the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Cell containing image pixel `uv`.
    pub fn cell_of(&self, uv: [f64; 2]) -> (usize, usize) {
        let c = ((uv[0] / self.stride as f64).floor().max(0.0) as usize).min(self.width - 1);
        let r = ((uv[1] / self.stride as f64).floor().max(0.0) as usize).min(self.height - 1);
        (r, c)
    }

    pub fn to_array(&self) -> ndarray::Array2<f64> {
        ndarray::Array2::from_shape_vec((self.height, self.width), self.data.clone()).expect("consistent shape")
    }
}

#[derive(Serialize, Deserialize)]
struct RawDepthMap {
    height: usize,
    width: usize,
    stride: usize,
    data: Vec<Option<f64>>,
}

impl Serialize for DepthMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawDepthMap {
            height: self.height,
            width: self.width,
            stride: self.stride,
            data: self.data.iter().map(|d| d.is_finite().then_some(*d)).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DepthMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawDepthMap::deserialize(d)?;
        if raw.data.len() != raw.height * raw.width {
            return Err(serde::de::Error::custom("depth map size mismatch"));
        }
        Ok(Self {
            height: raw.height,
            width: raw.width,
            stride: raw.stride,
            data: raw.data.into_iter().map(|d| d.unwrap_or(f64::INFINITY)).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub seed: u64,
    pub frame_id: u64,
    pub gt: FrameGt,
    pub depth_maps: BTreeMap<usize, DepthMap>,
}

#[derive(Serialize, Deserialize)]
struct RawScene {
    format: String,
    seed: u64,
    frame_id: u64,
    boxes3d: Vec<[f64; 11]>,
    boxes2d: BTreeMap<usize, Vec<[f64; 6]>>,
    links: BTreeMap<usize, Vec<Option<usize>>>,
    alpha: BTreeMap<usize, Vec<f64>>,
    depth_maps: BTreeMap<usize, DepthMap>,
}

impl Serialize for Scene {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let frame = RawFrame::from_gt(&self.gt);
        RawScene {
            format: SCENE_FORMAT.into(),
            seed: self.seed,
            frame_id: self.frame_id,
            boxes3d: frame.boxes3d,
            boxes2d: frame.boxes2d,
            links: frame.links,
            alpha: frame.alpha,
            depth_maps: self.depth_maps.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Scene {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawScene::deserialize(d)?;
        if raw.format != SCENE_FORMAT {
            return Err(serde::de::Error::custom(Error::Version {
                expected: SCENE_FORMAT,
                found: raw.format,
            }));
        }
        Ok(Self {
            seed: raw.seed,
            frame_id: raw.frame_id,
            gt: RawFrame {
                boxes3d: raw.boxes3d,
                boxes2d: raw.boxes2d,
                links: raw.links,
                alpha: raw.alpha,
            }
            .to_gt()
            .map_err(serde::de::Error::custom)?,
            depth_maps: raw.depth_maps,
        })
    }
}

impl Scene {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Ego vehicle footprint; sampled boxes may not intersect it.
fn ego_box() -> Anchor3D {
    Anchor3D::new([1.0, 0.0, 0.9], [2.2, 5.2, 1.8], 0.0, [0.0; 2])
}

fn bev_polygon(a: &Anchor3D) -> [[f64; 2]; 4] {
    let c = corners_of(a);
    [[c[0].x, c[0].y], [c[1].x, c[1].y], [c[2].x, c[2].y], [c[3].x, c[3].y]]
}

/// Separating-axis test on the two BEV rectangles plus z-interval overlap.
pub fn boxes_overlap(a: &Anchor3D, b: &Anchor3D) -> bool {
    let (az0, az1) = (a.center[2] - 0.5 * a.size[2], a.center[2] + 0.5 * a.size[2]);
    let (bz0, bz1) = (b.center[2] - 0.5 * b.size[2], b.center[2] + 0.5 * b.size[2]);
    if az1 <= bz0 || bz1 <= az0 {
        return false;
    }
    let pa = bev_polygon(a);
    let pb = bev_polygon(b);
    for poly in [&pa, &pb] {
        for k in 0..4 {
            let e = [poly[(k + 1) % 4][0] - poly[k][0], poly[(k + 1) % 4][1] - poly[k][1]];
            let axis = [-e[1], e[0]];
            let proj = |p: &[[f64; 2]; 4]| {
                p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), q| {
                    let d = q[0] * axis[0] + q[1] * axis[1];
                    (lo.min(d), hi.max(d))
                })
            };
            let (a0, a1) = proj(&pa);
            let (b0, b1) = proj(&pb);
            if a1 <= b0 || b1 <= a0 {
                return false;
            }
        }
    }
    true
}

/// Observation angle of a box in a view: heading relative to the viewing ray,
/// both measured in the camera's horizontal plane.
pub fn observation_angle(view: &CameraView, a: &Anchor3D) -> f64 {
    let r = view.rotation();
    let heading = r * nalgebra::Vector3::new(a.yaw.cos(), a.yaw.sin(), 0.0);
    let rot_y = (-heading.z).atan2(heading.x);
    let c = view.to_camera(&a.center_vec());
    wrap_angle(rot_y - c.x.atan2(c.z))
}

/// 2D ground truth of `boxes` in every view where they are valid.
pub fn derive_gt2d(boxes: &[Gt3D], rig: &Rig) -> BTreeMap<usize, Vec<Gt2D>> {
    let mut views = BTreeMap::new();
    for view in rig.views() {
        let mut list = Vec::new();
        for (i, b) in boxes.iter().enumerate() {
            let p = project_anchor(view, &b.anchor);
            if let Some(rect) = p.rect.filter(|r| p.valid && r.area() > 0.0) {
                list.push(Gt2D {
                    rect,
                    class: b.class,
                    box_index: i,
                    alpha: observation_angle(view, &b.anchor),
                });
            }
        }
        if !list.is_empty() {
            views.insert(view.view_id, list);
        }
    }
    views
}

/// Nearest box-center camera depth over each box rectangle; boxes whose
/// center is behind the camera do not contribute.
pub fn depth_map(view: &CameraView, boxes: &[Gt3D], gt2d: &[Gt2D], stride: usize) -> DepthMap {
    let height = (view.height() as usize).div_ceil(stride);
    let width = (view.width() as usize).div_ceil(stride);
    let mut data = vec![f64::INFINITY; height * width];
    let s = stride as f64;
    for g in gt2d {
        let z = view.to_camera(&boxes[g.box_index].anchor.center_vec()).z;
        if z < EPS_DEPTH {
            continue;
        }
        let [x0, y0, x1, y1] = g.rect.corners();
        for r in 0..height {
            let v = (r as f64 + 0.5) * s;
            if v < y0 || v > y1 {
                continue;
            }
            for c in 0..width {
                let u = (c as f64 + 0.5) * s;
                if u >= x0 && u <= x1 {
                    let d = &mut data[r * width + c];
                    *d = d.min(z);
                }
            }
        }
    }
    DepthMap {
        height,
        width,
        stride,
        data,
    }
}

pub fn sample_scene(seed: u64, frame_id: u64, config: &SceneConfig, rig: &Rig) -> Result<Scene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = WeightedIndex::new(config.classes.iter().map(|c| c.weight))
        .map_err(|e| Error::Param(format!("class weights: {e}")))?;
    let mut boxes: Vec<Gt3D> = Vec::with_capacity(config.n_boxes);
    let mut rejections = 0;
    let ego = ego_box();
    while boxes.len() < config.n_boxes {
        let class = weights.sample(&mut rng);
        let prior = &config.classes[class];
        let mut size = prior.size;
        for s in size.iter_mut() {
            let j = if prior.size_jitter > 0.0 {
                rng.gen_range(-prior.size_jitter..=prior.size_jitter)
            } else {
                0.0
            };
            *s *= 1.0 + j;
        }
        let x = rng.gen_range(config.x_range[0]..config.x_range[1]);
        let y = rng.gen_range(config.y_range[0]..config.y_range[1]);
        let dz = if config.ground_jitter > 0.0 {
            rng.gen_range(-config.ground_jitter..=config.ground_jitter)
        } else {
            0.0
        };
        let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let speed = if prior.max_speed > 0.0 {
            rng.gen_range(0.0..prior.max_speed)
        } else {
            0.0
        };
        let anchor = Anchor3D::new(
            [x, y, 0.5 * size[2] + dz],
            size,
            yaw,
            [speed * yaw.cos(), speed * yaw.sin()],
        );
        if boxes_overlap(&anchor, &ego) || boxes.iter().any(|b| boxes_overlap(&anchor, &b.anchor)) {
            rejections += 1;
            if rejections > config.max_rejections {
                return Err(Error::Infeasible(format!(
                    "placed {} of {} boxes before {} rejections",
                    boxes.len(),
                    config.n_boxes,
                    config.max_rejections
                )));
            }
            continue;
        }
        boxes.push(Gt3D { anchor, class });
    }
    let views = derive_gt2d(&boxes, rig);
    let mut depth_maps = BTreeMap::new();
    for view in rig.views() {
        let list = views.get(&view.view_id).map_or(&[][..], Vec::as_slice);
        depth_maps.insert(view.view_id, depth_map(view, &boxes, list, config.depth_stride));
    }
    Ok(Scene {
        seed,
        frame_id,
        gt: FrameGt { boxes, views },
        depth_maps,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSpec {
    pub channels: usize,
    pub strides: Vec<f64>,
    /// Bump standard deviation as a fraction of the box rectangle size.
    pub bump_width: f64,
    pub background: f64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            channels: 16,
            strides: vec![8.0, 16.0, 32.0],
            bump_width: 0.25,
            background: 0.1,
        }
    }
}

/// Amplitude of the bump for `class`.
pub fn class_amplitude(class: usize) -> f64 {
    0.5 + 0.05 * (class % 10) as f64
}

/// Class channel of a bump; the last two channels are background.
pub fn class_channel(class: usize, channels: usize) -> usize {
    class % (channels - 2)
}

/// Per-view multi-scale feature maps. Each visible box adds a Gaussian bump
/// centered on its projected 3D center (or its rectangle center when the 3D
/// center is out of view) in its class channel; overlapping bumps combine by
/// max. The two trailing channels hold constants `+background` and
/// `-background`.
pub fn render_features(scene: &Scene, rig: &Rig, spec: &FeatureSpec) -> Result<FeatureBank> {
    if spec.channels < 3 || spec.strides.is_empty() || spec.strides.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Param("features need >= 3 channels and positive strides".into()));
    }
    let mut bank = FeatureBank::default();
    for view in rig.views() {
        let gts = scene.gt.views.get(&view.view_id).map_or(&[][..], Vec::as_slice);
        let bumps: Vec<([f64; 2], [f64; 2], usize, f64)> = gts
            .iter()
            .map(|g| {
                let a = &scene.gt.boxes[g.box_index].anchor;
                let center = view
                    .project_point(&a.center_vec())
                    .filter(|uv| view.contains(*uv))
                    .unwrap_or(g.rect.center);
                let sigma = [
                    (spec.bump_width * g.rect.size[0]).max(1.0),
                    (spec.bump_width * g.rect.size[1]).max(1.0),
                ];
                (
                    center,
                    sigma,
                    class_channel(g.class, spec.channels),
                    class_amplitude(g.class),
                )
            })
            .collect();
        let mut scales = Vec::with_capacity(spec.strides.len());
        for &stride in &spec.strides {
            let h = (view.height() as f64 / stride).ceil() as usize;
            let w = (view.width() as f64 / stride).ceil() as usize;
            let mut map = FeatureMap::filled(h, w, spec.channels, stride, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let uv = [(c as f64 + 0.5) * stride, (r as f64 + 0.5) * stride];
                    let cell = map.at_mut(r, c);
                    cell[spec.channels - 2] = spec.background;
                    cell[spec.channels - 1] = -spec.background;
                    for (center, sigma, ch, amp) in &bumps {
                        let dx = (uv[0] - center[0]) / sigma[0];
                        let dy = (uv[1] - center[1]) / sigma[1];
                        let v = amp * (-0.5 * (dx * dx + dy * dy)).exp();
                        if v > cell[*ch] {
                            cell[*ch] = v;
                        }
                    }
                }
            }
            scales.push(map);
        }
        bank.maps.insert(view.view_id, scales);
    }
    Ok(bank)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoise {
    pub drop_prob_3d: f64,
    /// Drop probability of 2D boxes in views without an override.
    pub drop_prob_2d: f64,
    pub view_drop_prob: BTreeMap<usize, f64>,
    /// Uniform per-axis 3D center jitter bound, meters.
    pub jitter_3d: f64,
    /// Uniform per-axis 2D center jitter bound, pixels.
    pub jitter_2d: f64,
    /// Relative size jitter bound for both 2D and 3D boxes.
    pub size_jitter: f64,
    /// Scores are `1 - U(0, score_noise)`.
    pub score_noise: f64,
}

impl Default for OracleNoise {
    fn default() -> Self {
        Self {
            drop_prob_3d: 0.0,
            drop_prob_2d: 0.0,
            view_drop_prob: BTreeMap::new(),
            jitter_3d: 0.0,
            jitter_2d: 0.0,
            size_jitter: 0.0,
            score_noise: 0.0,
        }
    }
}

impl OracleNoise {
    pub fn drop_all() -> Self {
        Self {
            drop_prob_3d: 1.0,
            drop_prob_2d: 1.0,
            ..Self::default()
        }
    }

    /// Moderate noise used for metric curves.
    pub fn moderate() -> Self {
        Self {
            drop_prob_3d: 0.1,
            drop_prob_2d: 0.1,
            view_drop_prob: BTreeMap::new(),
            jitter_3d: 0.8,
            jitter_2d: 6.0,
            size_jitter: 0.2,
            score_noise: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = std::iter::once(self.drop_prob_3d)
            .chain(std::iter::once(self.drop_prob_2d))
            .chain(self.view_drop_prob.values().copied());
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Param(format!("drop probability {p} outside [0, 1]")));
            }
        }
        for v in [self.jitter_3d, self.jitter_2d, self.size_jitter, self.score_noise] {
            if !(v >= 0.0) {
                return Err(Error::Param("noise magnitudes must be non-negative".into()));
            }
        }
        Ok(())
    }
}

fn sym(rng: &mut ChaCha8Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

fn keep(rng: &mut ChaCha8Rng, drop_prob: f64) -> bool {
    // always draw so the stream does not depend on the probability
    let u: f64 = rng.gen();
    u >= drop_prob
}

/// Pseudo-detections from ground truth. 3D and 2D predictions use separate
/// random streams; each 2D box links to the surviving 3D detection of the
/// same ground truth, if any.
pub fn perturb(scene: &Scene, noise: &OracleNoise, seed: u64) -> Result<FrameDet> {
    noise.validate()?;
    let mut rng3 = ChaCha8Rng::seed_from_u64(seed);
    rng3.set_stream(3);
    let mut rng2 = ChaCha8Rng::seed_from_u64(seed);
    rng2.set_stream(2);

    let mut det_of_gt = vec![None; scene.gt.boxes.len()];
    let mut boxes3d = Vec::new();
    for (i, b) in scene.gt.boxes.iter().enumerate() {
        let kept = keep(&mut rng3, noise.drop_prob_3d);
        let dc = [
            sym(&mut rng3, noise.jitter_3d),
            sym(&mut rng3, noise.jitter_3d),
            sym(&mut rng3, noise.jitter_3d),
        ];
        let ds = [
            sym(&mut rng3, noise.size_jitter),
            sym(&mut rng3, noise.size_jitter),
            sym(&mut rng3, noise.size_jitter),
        ];
        let score = 1.0
            - if noise.score_noise > 0.0 {
                rng3.gen_range(0.0..noise.score_noise)
            } else {
                0.0
            };
        if !kept {
            continue;
        }
        let a = &b.anchor;
        let anchor = Anchor3D {
            center: [a.center[0] + dc[0], a.center[1] + dc[1], a.center[2] + dc[2]],
            size: [
                a.size[0] * (1.0 + ds[0]),
                a.size[1] * (1.0 + ds[1]),
                a.size[2] * (1.0 + ds[2]),
            ],
            ..*a
        };
        det_of_gt[i] = Some(boxes3d.len());
        boxes3d.push(Det3D {
            anchor,
            class: b.class,
            score,
        });
    }

    let mut boxes2d = BTreeMap::new();
    for (&v, gts) in &scene.gt.views {
        let p = *noise.view_drop_prob.get(&v).unwrap_or(&noise.drop_prob_2d);
        let mut list = Vec::new();
        for g in gts {
            let kept = keep(&mut rng2, p);
            let dc = [sym(&mut rng2, noise.jitter_2d), sym(&mut rng2, noise.jitter_2d)];
            let ds = [sym(&mut rng2, noise.size_jitter), sym(&mut rng2, noise.size_jitter)];
            let score = 1.0
                - if noise.score_noise > 0.0 {
                    rng2.gen_range(0.0..noise.score_noise)
                } else {
                    0.0
                };
            if !kept {
                continue;
            }
            let r = &g.rect;
            list.push(Det2D {
                rect: Box2D::new(
                    [r.center[0] + dc[0], r.center[1] + dc[1]],
                    [r.size[0] * (1.0 + ds[0]), r.size[1] * (1.0 + ds[1])],
                    v,
                ),
                class: g.class,
                score,
                source: det_of_gt[g.box_index],
            });
        }
        if !list.is_empty() {
            boxes2d.insert(v, list);
        }
    }
    Ok(FrameDet { boxes3d, boxes2d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorSampling {
    /// Anchor centers are drawn uniformly in polar coordinates around the
    /// ego origin: radius in `radius`, full turn in azimuth.
    pub radius: [f64; 2],
    pub z: [f64; 2],
    /// `(w, l, h)` of every anchor before jitter.
    pub size: [f64; 3],
    pub size_jitter: f64,
}

impl Default for AnchorSampling {
    fn default() -> Self {
        Self {
            radius: [2.0, 55.0],
            z: [0.0, 1.5],
            size: [1.9, 4.2, 1.6],
            size_jitter: 0.5,
        }
    }
}

/// Initial decoder anchors.
pub fn sample_query_anchors(seed: u64, n: usize, s: &AnchorSampling) -> Result<Vec<Anchor3D>> {
    if !(s.radius[1] > s.radius[0] && s.radius[0] >= 0.0 && s.z[1] >= s.z[0] && s.size.iter().all(|v| *v > 0.0))
        || !(0.0..1.0).contains(&s.size_jitter)
    {
        return Err(Error::Param(format!("bad anchor sampling {s:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let r = rng.gen_range(s.radius[0]..s.radius[1]);
            let phi = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let z = if s.z[1] > s.z[0] {
                rng.gen_range(s.z[0]..s.z[1])
            } else {
                s.z[0]
            };
            let mut size = s.size;
            for v in size.iter_mut() {
                *v *= 1.0 + sym(&mut rng, s.size_jitter);
            }
            let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            Anchor3D::new([r * phi.cos(), r * phi.sin(), z], size, yaw, [0.0; 2])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_test() {
        let a = Anchor3D::new([0.0, 0.0, 0.5], [2.0, 4.0, 1.0], 0.0, [0.0; 2]);
        let b = Anchor3D::new([3.9, 0.0, 0.5], [2.0, 4.0, 1.0], 0.0, [0.0; 2]);
        assert!(boxes_overlap(&a, &b));
        let c = Anchor3D::new([4.1, 0.0, 0.5], [2.0, 4.0, 1.0], 0.0, [0.0; 2]);
        assert!(!boxes_overlap(&a, &c));
        let d = Anchor3D {
            yaw: std::f64::consts::FRAC_PI_2,
            ..c
        };
        assert!(!boxes_overlap(&a, &d));
        let e = Anchor3D {
            center: [0.0, 0.0, 3.0],
            ..a
        };
        assert!(!boxes_overlap(&a, &e));
    }

    #[test]
    fn empty_and_infeasible() {
        let rig = Rig::surround_six();
        let cfg = SceneConfig {
            n_boxes: 0,
            ..Default::default()
        };
        let s = sample_scene(1, 0, &cfg, &rig).unwrap();
        assert!(s.gt.boxes.is_empty() && s.gt.views.is_empty());
        let dense = SceneConfig {
            n_boxes: 500,
            x_range: [5.0, 10.0],
            y_range: [5.0, 10.0],
            max_rejections: 200,
            ..Default::default()
        };
        assert!(matches!(sample_scene(1, 0, &dense, &rig), Err(Error::Infeasible(_))));
    }

    #[test]
    fn drop_all_is_empty() {
        let rig = Rig::surround_six();
        let s = sample_scene(4, 0, &SceneConfig::default(), &rig).unwrap();
        let d = perturb(&s, &OracleNoise::drop_all(), 1).unwrap();
        assert!(d.boxes3d.is_empty() && d.boxes2d.is_empty());
    }

    #[test]
    fn zero_noise_reproduces_gt() {
        let rig = Rig::surround_six();
        let s = sample_scene(4, 0, &SceneConfig::default(), &rig).unwrap();
        let d = perturb(&s, &OracleNoise::default(), 1).unwrap();
        assert_eq!(d.boxes3d.len(), s.gt.boxes.len());
        for (p, g) in d.boxes3d.iter().zip(&s.gt.boxes) {
            assert_eq!(p.anchor, g.anchor);
            assert_eq!(p.score, 1.0);
        }
        for (v, list) in &s.gt.views {
            let rects: Vec<Box2D> = d.boxes2d[v].iter().map(|b| b.rect).collect();
            assert_eq!(rects, list.iter().map(|g| g.rect).collect::<Vec<_>>());
        }
    }

    #[test]
    fn alpha_of_box_facing_away() {
        // box straight ahead, heading along the optical axis: rot_y = -pi/2
        // in camera axes, ray angle 0
        let view =
            CameraView::looking_along(0, nalgebra::Vector3::zeros(), 0.0, 100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        let a = Anchor3D::new([10.0, 0.0, 0.0], [1.0; 3], 0.0, [0.0; 2]);
        assert!((observation_angle(&view, &a) + std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
