//! Dynamic query allocation.
//!
//! Each 3D query is projected into every view. One 2D query (a column of the
//! 3D-to-2D mapping `T`) is created per valid `(anchor, view)` pair. Columns
//! are ordered by camera group, then by anchor index. `T` is kept sparse:
//! every column has exactly one owning row, so `T^T Q` is a row gather and
//! `T Q / rowsum(T)` is a per-owner mean.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_anchor, Anchor3D, Box2D, Rig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationLimits {
    /// Cap on truncated (center out of view) columns per camera group.
    pub max_truncated_per_camera: usize,
    /// Upper bound on `(w, l, h)` in meters.
    pub size_clamp: [f64; 3],
}

impl Default for AllocationLimits {
    fn default() -> Self {
        Self {
            max_truncated_per_camera: 100,
            size_clamp: [35.0, 35.0, 10.0],
        }
    }
}

impl AllocationLimits {
    pub fn unlimited() -> Self {
        Self {
            max_truncated_per_camera: usize::MAX,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_truncated_per_camera == 0 || self.size_clamp.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Param(format!("allocation limits must be positive: {self:?}")));
        }
        Ok(())
    }
}

pub fn clamp_anchors(anchors: &[Anchor3D], limits: &AllocationLimits) -> Vec<Anchor3D> {
    anchors
        .iter()
        .map(|a| {
            let mut out = *a;
            for (s, c) in out.size.iter_mut().zip(limits.size_clamp) {
                *s = s.min(c);
            }
            out
        })
        .collect()
}

/// Sparse `N x M` 0/1 matrix with exactly one entry per column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingMatrix {
    n_3d: usize,
    /// Owning 3D row of each column.
    rows: Vec<usize>,
    /// View id of each column; non-decreasing in rig order.
    camera_of_col: Vec<usize>,
}

impl MappingMatrix {
    pub fn new(n_3d: usize, rows: Vec<usize>, camera_of_col: Vec<usize>) -> Result<Self> {
        if rows.len() != camera_of_col.len() {
            return Err(Error::Shape(format!(
                "{} owners for {} camera labels",
                rows.len(),
                camera_of_col.len()
            )));
        }
        if let Some(&r) = rows.iter().find(|&&r| r >= n_3d) {
            return Err(Error::Shape(format!("owner row {r} out of range for N = {n_3d}")));
        }
        Ok(Self {
            n_3d,
            rows,
            camera_of_col,
        })
    }

    pub fn empty(n_3d: usize) -> Self {
        Self {
            n_3d,
            rows: Vec::new(),
            camera_of_col: Vec::new(),
        }
    }

    pub fn n_3d(&self) -> usize {
        self.n_3d
    }

    pub fn n_2d(&self) -> usize {
        self.rows.len()
    }

    pub fn owner(&self, col: usize) -> usize {
        self.rows[col]
    }

    pub fn owners(&self) -> &[usize] {
        &self.rows
    }

    pub fn camera_of_col(&self) -> &[usize] {
        &self.camera_of_col
    }

    /// `(row, col)` pairs, one per column.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().copied().enumerate().map(|(j, i)| (i, j))
    }

    /// Number of columns owned by each 3D row.
    pub fn row_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_3d];
        for &r in &self.rows {
            counts[r] += 1;
        }
        counts
    }

    /// Contiguous `(view_id, start, len)` camera groups in column order.
    pub fn groups(&self) -> Vec<(usize, usize, usize)> {
        let mut out: Vec<(usize, usize, usize)> = Vec::new();
        for (j, &v) in self.camera_of_col.iter().enumerate() {
            match out.last_mut() {
                Some((cur, _, len)) if *cur == v => *len += 1,
                _ => out.push((v, j, 1)),
            }
        }
        out
    }
}

/// Columns dropped by the per-camera truncation cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapReport {
    pub view_id: usize,
    pub truncated_candidates: usize,
    pub kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub mapping: MappingMatrix,
    /// Projected anchor center when it is in view, otherwise the center of
    /// the clipped bounding rectangle.
    pub ref_points: Vec<[f64; 2]>,
    /// Center indicator per column: `true` when the anchor center lies in
    /// the view (not truncated).
    pub center_in_view: Vec<bool>,
    pub rects: Vec<Box2D>,
    /// `(anchor, view_id)` pairs that were valid but whose clipped rectangle
    /// has zero area; they get no column.
    pub dropped_degenerate: Vec<(usize, usize)>,
    pub caps: Vec<CapReport>,
}

impl AllocationResult {
    pub fn n_2d(&self) -> usize {
        self.mapping.n_2d()
    }

    pub fn truncated_per_camera(&self) -> Vec<(usize, usize)> {
        self.mapping
            .groups()
            .into_iter()
            .map(|(v, start, len)| {
                let t = self.center_in_view[start..start + len].iter().filter(|c| !**c).count();
                (v, t)
            })
            .collect()
    }
}

struct Candidate {
    anchor: usize,
    rect: Box2D,
    ref_point: [f64; 2],
    center_in_view: bool,
}

pub fn allocate(anchors: &[Anchor3D], rig: &Rig, limits: &AllocationLimits) -> Result<AllocationResult> {
    if rig.is_empty() {
        return Err(Error::EmptyRig);
    }
    limits.validate()?;
    for a in anchors {
        a.validate()?;
    }
    let mut rows = Vec::new();
    let mut cams = Vec::new();
    let mut ref_points = Vec::new();
    let mut center_in_view = Vec::new();
    let mut rects = Vec::new();
    let mut dropped_degenerate = Vec::new();
    let mut caps = Vec::new();

    for view in rig.views() {
        let mut kept: Vec<Candidate> = Vec::new();
        let mut truncated: Vec<Candidate> = Vec::new();
        for (i, a) in anchors.iter().enumerate() {
            let p = project_anchor(view, a);
            let Some(rect) = p.rect.filter(|_| p.valid) else {
                continue;
            };
            if rect.area() <= 0.0 {
                dropped_degenerate.push((i, view.view_id));
                continue;
            }
            let cand = Candidate {
                anchor: i,
                rect,
                ref_point: if p.center_in_view {
                    p.points[0].expect("in-bounds center is present")
                } else {
                    rect.center
                },
                center_in_view: p.center_in_view,
            };
            if cand.center_in_view {
                kept.push(cand);
            } else {
                truncated.push(cand);
            }
        }
        let n_trunc = truncated.len();
        if n_trunc > limits.max_truncated_per_camera {
            truncated.sort_by(|a, b| b.rect.area().total_cmp(&a.rect.area()).then(a.anchor.cmp(&b.anchor)));
            truncated.truncate(limits.max_truncated_per_camera);
            log::debug!(
                "view {}: capped truncated candidates {} -> {}",
                view.view_id,
                n_trunc,
                limits.max_truncated_per_camera
            );
        }
        caps.push(CapReport {
            view_id: view.view_id,
            truncated_candidates: n_trunc,
            kept: truncated.len(),
        });
        kept.extend(truncated);
        kept.sort_by_key(|c| c.anchor);
        for c in kept {
            rows.push(c.anchor);
            cams.push(view.view_id);
            ref_points.push(c.ref_point);
            center_in_view.push(c.center_in_view);
            rects.push(c.rect);
        }
    }
    if !dropped_degenerate.is_empty() {
        log::debug!(
            "{} valid (anchor, view) pairs dropped: clipped rectangle has zero area",
            dropped_degenerate.len()
        );
    }
    Ok(AllocationResult {
        mapping: MappingMatrix::new(anchors.len(), rows, cams)?,
        ref_points,
        center_in_view,
        rects,
        dropped_degenerate,
        caps,
    })
}

/// `Q_2d = T^T Q_3d`: row `j` is a copy of the owning 3D row.
pub fn gather_2d(mapping: &MappingMatrix, q3d: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if q3d.nrows() != mapping.n_3d() {
        return Err(Error::Shape(format!(
            "gather expects {} 3D rows, got {}",
            mapping.n_3d(),
            q3d.nrows()
        )));
    }
    let mut out = Array2::zeros((mapping.n_2d(), q3d.ncols()));
    for (j, &i) in mapping.owners().iter().enumerate() {
        out.row_mut(j).assign(&q3d.row(i));
    }
    Ok(out)
}

/// `T Q_2d / rowsum(T)`: each 3D row receives the mean of its columns;
/// rows without columns are zero.
pub fn scatter_mean(mapping: &MappingMatrix, q2d: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if q2d.nrows() != mapping.n_2d() {
        return Err(Error::Shape(format!(
            "scatter expects {} 2D rows, got {}",
            mapping.n_2d(),
            q2d.nrows()
        )));
    }
    let mut out = Array2::zeros((mapping.n_3d(), q2d.ncols()));
    for (j, &i) in mapping.owners().iter().enumerate() {
        let mut row = out.row_mut(i);
        row += &q2d.row(j);
    }
    for (i, n) in mapping.row_counts().into_iter().enumerate() {
        if n > 0 {
            let denom = n as f64;
            out.row_mut(i).mapv_inplace(|v| v / denom);
        }
    }
    Ok(out)
}
