//! Propagating denoising.
//!
//! Noisy copies of the ground-truth boxes are carried through both 2D and 3D
//! sub-layers. Their 2D copies come from the ground-truth view associations,
//! not from projecting the noisy anchors, so a noisy anchor pushed out of
//! every frustum still lands in the views where its ground truth is visible.
//!
//! Query tensors are laid out as `[match part | group 0 | group 1 | ...]`;
//! inside a 2D group, columns are ordered by camera, then by ground-truth
//! index. Attention is permitted only inside one part (and, for 2D queries,
//! one camera).

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::{scatter_mean, MappingMatrix};
use crate::error::{Error, Result};
use crate::geometry::{project_anchor, wrap_angle, Anchor3D, Box2D, Rig};
use crate::groupattn::{build_mask, AttentionMask, GroupMask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub n_groups: usize,
    /// Center shift bound as a fraction of the box half-extent, per local axis.
    pub center_noise_scale: f64,
    /// Size factor drawn from `exp(U(-s, s))`.
    pub size_noise_scale: f64,
    /// Yaw shift bound in radians.
    pub yaw_noise: f64,
    /// Fraction of groups that carry negatives (the trailing groups).
    pub negative_ratio: f64,
    /// Multiplier applied to every noise scale for negative groups.
    pub negative_scale_factor: f64,
    /// Whether negative queries get 2D supervision.
    pub supervise_negatives_2d: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            n_groups: 5,
            center_noise_scale: 0.5,
            size_noise_scale: 0.2,
            yaw_noise: 0.2,
            negative_ratio: 0.2,
            negative_scale_factor: 2.0,
            supervise_negatives_2d: false,
        }
    }
}

impl NoiseConfig {
    pub fn zero(n_groups: usize) -> Self {
        Self {
            n_groups,
            center_noise_scale: 0.0,
            size_noise_scale: 0.0,
            yaw_noise: 0.0,
            negative_ratio: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scales = [
            self.center_noise_scale,
            self.size_noise_scale,
            self.yaw_noise,
            self.negative_scale_factor,
        ];
        if scales.iter().any(|s| !(*s >= 0.0)) || !(0.0..=1.0).contains(&self.negative_ratio) {
            return Err(Error::Param(format!("noise scales must be non-negative: {self:?}")));
        }
        Ok(())
    }

    pub fn n_negative_groups(&self) -> usize {
        ((self.n_groups as f64) * self.negative_ratio).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyGroup {
    /// One noisy copy per ground-truth box, in ground-truth order.
    pub anchors: Vec<Anchor3D>,
    pub positive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyGroups {
    pub groups: Vec<NoisyGroup>,
    pub n_gt: usize,
}

impl NoisyGroups {
    pub fn n_noisy(&self) -> usize {
        self.groups.len() * self.n_gt
    }

    /// All noisy anchors, group-major.
    pub fn flat_anchors(&self) -> Vec<Anchor3D> {
        self.groups.iter().flat_map(|g| g.anchors.iter().copied()).collect()
    }
}

pub fn make_noisy_anchors(gt: &[Anchor3D], cfg: &NoiseConfig, seed: u64) -> Result<NoisyGroups> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_neg = cfg.n_negative_groups();
    let mut groups = Vec::with_capacity(cfg.n_groups);
    for g in 0..cfg.n_groups {
        let positive = g < cfg.n_groups - n_neg;
        let k = if positive { 1.0 } else { cfg.negative_scale_factor };
        let mut sym = |bound: f64| {
            if bound > 0.0 {
                rng.gen_range(-bound..=bound)
            } else {
                0.0
            }
        };
        let anchors = gt
            .iter()
            .map(|a| {
                let [w, l, h] = a.size;
                let c = k * cfg.center_noise_scale;
                // local-frame shift: along heading (l), across (w), vertical (h)
                let dl = sym(c * 0.5 * l);
                let dw = sym(c * 0.5 * w);
                let dh = sym(c * 0.5 * h);
                let (s, co) = a.yaw.sin_cos();
                let size_s = k * cfg.size_noise_scale;
                let size = [w * sym(size_s).exp(), l * sym(size_s).exp(), h * sym(size_s).exp()];
                let yaw = a.yaw + sym(k * cfg.yaw_noise);
                Anchor3D {
                    center: [
                        a.center[0] + co * dl - s * dw,
                        a.center[1] + s * dl + co * dw,
                        a.center[2] + dh,
                    ],
                    size,
                    yaw: if yaw == a.yaw { a.yaw } else { wrap_angle(yaw) },
                    velocity: a.velocity,
                }
            })
            .collect();
        groups.push(NoisyGroup { anchors, positive });
    }
    Ok(NoisyGroups { groups, n_gt: gt.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseGroupSpan {
    pub span: Span,
    /// `(view_id, span)` camera sub-groups; empty for 3D layouts.
    pub cameras: Vec<(usize, Span)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiseLayout {
    pub match_span: Span,
    pub groups: Vec<DenoiseGroupSpan>,
}

impl DenoiseLayout {
    /// `[match | group 0 | ...]` without camera sub-spans (3D query tensors).
    pub fn stacked(match_len: usize, group_lens: &[usize]) -> Self {
        let mut start = match_len;
        let groups = group_lens
            .iter()
            .map(|&len| {
                let g = DenoiseGroupSpan {
                    span: Span::new(start, len),
                    cameras: Vec::new(),
                };
                start += len;
                g
            })
            .collect();
        Self {
            match_span: Span::new(0, match_len),
            groups,
        }
    }

    pub fn total_len(&self) -> usize {
        self.groups.last().map_or(self.match_span.end(), |g| g.span.end())
    }

    pub fn denoise_len(&self) -> usize {
        self.total_len() - self.match_span.len
    }

    /// `0` for the match part, `g + 1` for denoise group `g`.
    pub fn part_of(&self, i: usize) -> usize {
        if self.match_span.contains(i) {
            return 0;
        }
        self.groups
            .iter()
            .position(|g| g.span.contains(i))
            .map_or(usize::MAX, |g| g + 1)
    }

    /// Spans must be contiguous from zero without overlap; camera sub-spans
    /// must tile their group.
    pub fn validate(&self) -> Result<()> {
        if self.match_span.start != 0 {
            return Err(Error::Layout("match part must start at 0".into()));
        }
        let mut cursor = self.match_span.end();
        for (g, grp) in self.groups.iter().enumerate() {
            if grp.span.start != cursor {
                return Err(Error::Layout(format!(
                    "group {g} starts at {} but previous span ends at {cursor}",
                    grp.span.start
                )));
            }
            if !grp.cameras.is_empty() {
                let mut c = grp.span.start;
                for (v, s) in &grp.cameras {
                    if s.start != c {
                        return Err(Error::Layout(format!(
                            "camera {v} span in group {g} overlaps or leaves a gap"
                        )));
                    }
                    c = s.end();
                }
                if c != grp.span.end() {
                    return Err(Error::Layout(format!("camera spans do not cover group {g}")));
                }
            }
            cursor = grp.span.end();
        }
        Ok(())
    }

    /// Re-bases the layout on a different match-part length.
    pub fn with_match_len(&self, match_len: usize) -> Self {
        let shift = |s: Span| Span::new(s.start - self.match_span.len + match_len, s.len);
        Self {
            match_span: Span::new(0, match_len),
            groups: self
                .groups
                .iter()
                .map(|g| DenoiseGroupSpan {
                    span: shift(g.span),
                    cameras: g.cameras.iter().map(|(v, s)| (*v, shift(*s))).collect(),
                })
                .collect(),
        }
    }
}

/// 2D copies of the noisy queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyAllocation {
    /// Owner rows index the group-major flattened noisy anchors.
    pub mapping: MappingMatrix,
    pub ref_points: Vec<[f64; 2]>,
    pub center_in_view: Vec<bool>,
    /// Prior rectangle of each column: the noisy anchor's clipped projection
    /// when it is valid in the view, else the ground-truth box.
    pub rects: Vec<Box2D>,
    /// Ground-truth 2D box each column is supervised with.
    pub targets: Vec<Box2D>,
    /// Ground-truth index of each column.
    pub gt_of_col: Vec<usize>,
    pub positive: Vec<bool>,
    pub layout: DenoiseLayout,
    pub skipped_gt: Vec<usize>,
}

impl NoisyAllocation {
    pub fn n_cols(&self) -> usize {
        self.mapping.n_2d()
    }

    pub fn group_lens(&self) -> Vec<usize> {
        self.layout.groups.iter().map(|g| g.span.len).collect()
    }
}

/// One 2D noisy query per (noisy anchor, ground-truth-associated view).
///
/// `gt_assoc[i]` lists the views (with 2D boxes) of ground truth `i`. The
/// returned layout assumes the match part has `match_len` columns.
pub fn allocate_noise(
    gt_assoc: &[Vec<(usize, Box2D)>],
    noisy: &NoisyGroups,
    rig: &Rig,
    match_len: usize,
) -> Result<NoisyAllocation> {
    if gt_assoc.len() != noisy.n_gt {
        return Err(Error::Shape(format!(
            "{} ground-truth associations for {} noisy anchors per group",
            gt_assoc.len(),
            noisy.n_gt
        )));
    }
    let skipped_gt: Vec<usize> = gt_assoc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.is_empty())
        .map(|(i, _)| i)
        .collect();
    for i in &skipped_gt {
        log::warn!("ground truth {i} has no view association; no 2D noisy queries for it");
    }
    let mut owners = Vec::new();
    let mut cams = Vec::new();
    let mut ref_points = Vec::new();
    let mut center_in_view = Vec::new();
    let mut rects = Vec::new();
    let mut targets = Vec::new();
    let mut gt_of_col = Vec::new();
    let mut positive = Vec::new();
    let mut groups = Vec::new();
    let mut cursor = match_len;
    for (g, group) in noisy.groups.iter().enumerate() {
        let group_start = cursor;
        let mut cameras = Vec::new();
        for view in rig.views() {
            let cam_start = cursor;
            for (i, assoc) in gt_assoc.iter().enumerate() {
                for (view_id, target) in assoc {
                    if *view_id != view.view_id {
                        continue;
                    }
                    let anchor = &group.anchors[i];
                    let p = project_anchor(view, anchor);
                    let rp = match (p.center_in_view, p.rect) {
                        (true, _) => p.points[0].expect("in-bounds center is present"),
                        (false, Some(r)) if p.valid => r.center,
                        _ => target.center,
                    };
                    owners.push(g * noisy.n_gt + i);
                    cams.push(view.view_id);
                    ref_points.push(rp);
                    center_in_view.push(p.center_in_view);
                    rects.push(match p.rect {
                        Some(r) if p.valid && r.area() > 0.0 => r,
                        _ => *target,
                    });
                    targets.push(*target);
                    gt_of_col.push(i);
                    positive.push(group.positive);
                    cursor += 1;
                }
            }
            if cursor > cam_start {
                cameras.push((view.view_id, Span::new(cam_start, cursor - cam_start)));
            }
        }
        groups.push(DenoiseGroupSpan {
            span: Span::new(group_start, cursor - group_start),
            cameras,
        });
    }
    for assoc in gt_assoc {
        for (v, _) in assoc {
            rig.view(*v)?;
        }
    }
    let layout = DenoiseLayout {
        match_span: Span::new(0, match_len),
        groups,
    };
    layout.validate()?;
    Ok(NoisyAllocation {
        mapping: MappingMatrix::new(noisy.n_noisy(), owners, cams)?,
        ref_points,
        center_in_view,
        rects,
        targets,
        gt_of_col,
        positive,
        layout,
        skipped_gt,
    })
}

/// Mask over `[match | denoise]` 2D queries: same camera and same part.
pub fn denoise_mask(layout: &DenoiseLayout, camera_groups: &GroupMask) -> Result<AttentionMask> {
    build_mask(camera_groups, Some(layout))
}

/// Restores per-group 3D noisy queries as the mean of each noisy anchor's 2D
/// copies (zero for anchors without copies). `noisy_2d` holds only the
/// denoise columns, in layout order.
pub fn restore_3d(noisy_2d: ArrayView2<'_, f64>, alloc: &NoisyAllocation) -> Result<Vec<Array2<f64>>> {
    let fused = scatter_mean(&alloc.mapping, noisy_2d)?;
    let n_groups = alloc.layout.groups.len();
    if n_groups == 0 {
        return Ok(Vec::new());
    }
    let per_group = alloc.mapping.n_3d() / n_groups;
    Ok((0..n_groups)
        .map(|g| {
            fused
                .slice(ndarray::s![g * per_group..(g + 1) * per_group, ..])
                .to_owned()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraView;
    use nalgebra::Vector3;
    use ndarray::array;

    fn gt_box() -> Anchor3D {
        Anchor3D::new([10.0, 1.0, 0.5], [2.0, 4.0, 1.5], 0.0, [1.0, 0.0])
    }

    #[test]
    fn zero_noise_reproduces_gt() {
        let gt = vec![gt_box(), Anchor3D { yaw: 2.0, ..gt_box() }];
        let n = make_noisy_anchors(&gt, &NoiseConfig::zero(3), 5).unwrap();
        assert_eq!(n.groups.len(), 3);
        for g in &n.groups {
            assert_eq!(g.anchors, gt);
        }
    }

    #[test]
    fn center_shift_is_bounded() {
        let cfg = NoiseConfig {
            n_groups: 50,
            center_noise_scale: 0.1,
            negative_ratio: 0.0,
            ..NoiseConfig::zero(50)
        };
        let n = make_noisy_anchors(&[gt_box()], &cfg, 1).unwrap();
        let mut max_dx: f64 = 0.0;
        for g in &n.groups {
            let a = g.anchors[0];
            let dx = (a.center[0] - 10.0).abs();
            let dy = (a.center[1] - 1.0).abs();
            max_dx = max_dx.max(dx);
            // yaw 0: x runs along l = 4, y along w = 2
            assert!(dx <= 0.1 * 4.0 * 0.5 + 1e-12);
            assert!(dy <= 0.1 * 2.0 * 0.5 + 1e-12);
            assert!(dx <= 0.1 * 2.0 && dy <= 0.1 * 4.0);
        }
        assert!(max_dx > 0.0);
    }

    #[test]
    fn negatives_are_trailing_groups_and_seeded() {
        let cfg = NoiseConfig {
            n_groups: 5,
            negative_ratio: 0.4,
            ..Default::default()
        };
        let a = make_noisy_anchors(&[gt_box()], &cfg, 9).unwrap();
        let b = make_noisy_anchors(&[gt_box()], &cfg, 9).unwrap();
        assert_eq!(a, b);
        let flags: Vec<bool> = a.groups.iter().map(|g| g.positive).collect();
        assert_eq!(flags, vec![true, true, true, false, false]);
    }

    fn rig2() -> Rig {
        let v0 = CameraView::looking_along(0, Vector3::zeros(), 0.0, 100.0, 100.0, 100.0, 50.0, 200, 100).unwrap();
        let v1 = CameraView::looking_along(
            1,
            Vector3::zeros(),
            std::f64::consts::FRAC_PI_2,
            100.0,
            100.0,
            100.0,
            50.0,
            200,
            100,
        )
        .unwrap();
        Rig::new(vec![v0, v1]).unwrap()
    }

    fn b(view: usize, cx: f64) -> Box2D {
        Box2D::new([cx, 50.0], [10.0, 10.0], view)
    }

    #[test]
    fn one_copy_per_associated_view() {
        let assoc = vec![vec![(0, b(0, 20.0)), (1, b(1, 190.0))]];
        let noisy = make_noisy_anchors(&[gt_box()], &NoiseConfig::zero(1), 0).unwrap();
        let alloc = allocate_noise(&assoc, &noisy, &rig2(), 0).unwrap();
        assert_eq!(alloc.n_cols(), 2);
        assert_eq!(alloc.mapping.owners(), &[0, 0]);
    }

    #[test]
    fn association_beats_projection() {
        // noisy anchor far behind the rig, ground truth visible in view 0
        let gt = vec![gt_box()];
        let mut noisy = make_noisy_anchors(&gt, &NoiseConfig::zero(1), 0).unwrap();
        noisy.groups[0].anchors[0].center = [-50.0, -50.0, 0.0];
        let assoc = vec![vec![(0, b(0, 77.0))]];
        let alloc = allocate_noise(&assoc, &noisy, &rig2(), 4).unwrap();
        assert_eq!(alloc.n_cols(), 1);
        assert_eq!(alloc.mapping.camera_of_col(), &[0]);
        assert_eq!(alloc.ref_points[0], [77.0, 50.0]);
        assert_eq!(alloc.layout.groups[0].span, Span::new(4, 1));
    }

    #[test]
    fn hand_enumerated_layout() {
        // GT0 in views {0, 1}, GT1 in view {1}; 3 groups; match part of 5
        let gt = vec![gt_box(), gt_box()];
        let assoc = vec![vec![(0, b(0, 10.0)), (1, b(1, 10.0))], vec![(1, b(1, 30.0))]];
        let noisy = make_noisy_anchors(&gt, &NoiseConfig::zero(3), 0).unwrap();
        let alloc = allocate_noise(&assoc, &noisy, &rig2(), 5).unwrap();
        // per group: cam0 [gt0], cam1 [gt0, gt1]
        let mut expect_owner = vec![];
        let mut expect_groups = vec![];
        for g in 0..3 {
            let s = 5 + 3 * g;
            expect_owner.extend([2 * g, 2 * g, 2 * g + 1]);
            expect_groups.push(DenoiseGroupSpan {
                span: Span::new(s, 3),
                cameras: vec![(0, Span::new(s, 1)), (1, Span::new(s + 1, 2))],
            });
        }
        assert_eq!(alloc.mapping.owners(), expect_owner.as_slice());
        assert_eq!(alloc.layout.groups, expect_groups);
        assert_eq!(alloc.gt_of_col, vec![0, 0, 1, 0, 0, 1, 0, 0, 1]);
        assert_eq!(alloc.layout.total_len(), 14);
    }

    #[test]
    fn unassociated_gt_is_skipped() {
        let gt = vec![gt_box(), gt_box()];
        let assoc = vec![vec![], vec![(0, b(0, 10.0))]];
        let noisy = make_noisy_anchors(&gt, &NoiseConfig::zero(2), 0).unwrap();
        let alloc = allocate_noise(&assoc, &noisy, &rig2(), 0).unwrap();
        assert_eq!(alloc.skipped_gt, vec![0]);
        assert_eq!(alloc.n_cols(), 2);
    }

    #[test]
    fn overlapping_layout_is_rejected() {
        let mut layout = DenoiseLayout::stacked(3, &[2, 2]);
        layout.groups[1].span.start = 4;
        assert!(matches!(layout.validate(), Err(Error::Layout(_))));
        let g = GroupMask::single(7);
        assert!(denoise_mask(&layout, &g).is_err());
    }

    #[test]
    fn mask_without_groups_matches_eq3() {
        let g = GroupMask::new(vec![0, 0, 1, 1], 2).unwrap();
        let plain = build_mask(&g, None).unwrap();
        let dn = denoise_mask(&DenoiseLayout::stacked(4, &[]), &g).unwrap();
        assert_eq!(plain, dn);
    }

    #[test]
    fn match_and_denoise_are_isolated() {
        let g = GroupMask::new(vec![0, 0, 0], 1).unwrap();
        let m = denoise_mask(&DenoiseLayout::stacked(2, &[1]), &g).unwrap();
        assert!(!m.allowed(0, 2) && !m.allowed(2, 0));
        assert!(m.allowed(0, 1) && m.allowed(2, 2));
    }

    #[test]
    fn restore_means_copies() {
        let assoc = vec![vec![(0, b(0, 10.0)), (1, b(1, 10.0))]];
        let noisy = make_noisy_anchors(&[gt_box()], &NoiseConfig::zero(1), 0).unwrap();
        let alloc = allocate_noise(&assoc, &noisy, &rig2(), 0).unwrap();
        let restored = restore_3d(array![[2.0], [4.0]].view(), &alloc).unwrap();
        assert_eq!(restored, vec![array![[3.0]]]);

        let single = allocate_noise(&[vec![(0, b(0, 10.0))]], &noisy, &rig2(), 0).unwrap();
        assert_eq!(
            restore_3d(array![[7.5, -1.0]].view(), &single).unwrap(),
            vec![array![[7.5, -1.0]]]
        );
        assert!(restore_3d(array![[1.0]].view(), &alloc).is_err());
    }
}
