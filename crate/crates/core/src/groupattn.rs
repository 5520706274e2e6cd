//! Query-group attention.
//!
//! 2D queries only attend to queries of their own camera group. The additive
//! mask holds `0` for permitted pairs and [`MASK_SENTINEL`] otherwise; with
//! denoising active the partition is refined further by [`DenoiseLayout`].
//!
//! Cross-attention samples one bilinear point per feature scale at the
//! query's reference point in its own view, then mixes the scales with
//! per-query softmax weights.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::denoising::DenoiseLayout;
use crate::error::{Error, Result};
use crate::nn::{has_nan, softmax_in_place, Linear, ParamInit};

/// Stand-in for `-inf` in additive attention masks.
pub const MASK_SENTINEL: f64 = -1e9;

/// Group id per query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupMask {
    group_of: Vec<usize>,
    n_groups: usize,
}

impl GroupMask {
    pub fn new(group_of: Vec<usize>, n_groups: usize) -> Result<Self> {
        if let Some(&id) = group_of.iter().find(|&&g| g >= n_groups) {
            return Err(Error::GroupOutOfRange { id, n_groups });
        }
        Ok(Self { group_of, n_groups })
    }

    /// One group per distinct view id, numbered in order of first appearance.
    pub fn from_cameras(camera_of_col: &[usize]) -> Self {
        let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
        let mut order = Vec::new();
        for &v in camera_of_col {
            if let std::collections::btree_map::Entry::Vacant(e) = ids.entry(v) {
                e.insert(order.len());
                order.push(v);
            }
        }
        Self {
            group_of: camera_of_col.iter().map(|v| ids[v]).collect(),
            n_groups: order.len(),
        }
    }

    /// Everybody in one group (plain self-attention).
    pub fn single(size: usize) -> Self {
        Self {
            group_of: vec![0; size],
            n_groups: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.group_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group_of.is_empty()
    }

    pub fn group_of(&self) -> &[usize] {
        &self.group_of
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn concat(&self, other: &GroupMask) -> GroupMask {
        let mut group_of = self.group_of.clone();
        group_of.extend_from_slice(&other.group_of);
        GroupMask {
            group_of,
            n_groups: self.n_groups.max(other.n_groups),
        }
    }
}

/// Dense `M x M` additive mask.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    size: usize,
    values: Vec<f64>,
}

impl AttentionMask {
    pub fn from_predicate(size: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut values = vec![MASK_SENTINEL; size * size];
        for i in 0..size {
            for j in 0..size {
                if allowed(i, j) {
                    values[i * size + j] = 0.0;
                }
            }
        }
        Self { size, values }
    }

    pub fn unmasked(size: usize) -> Self {
        Self {
            size,
            values: vec![0.0; size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.value(i, j) == 0.0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.size..(i + 1) * self.size]
    }
}

/// Same group, and (when denoising) same part of the query tensor.
pub fn build_mask(groups: &GroupMask, denoise: Option<&DenoiseLayout>) -> Result<AttentionMask> {
    let n = groups.len();
    match denoise {
        None => {
            let g = groups.group_of();
            Ok(AttentionMask::from_predicate(n, |i, j| g[i] == g[j]))
        }
        Some(layout) => {
            layout.validate()?;
            if layout.total_len() != n {
                return Err(Error::Layout(format!(
                    "layout covers {} queries but the group mask has {n}",
                    layout.total_len()
                )));
            }
            let g = groups.group_of();
            let part: Vec<usize> = (0..n).map(|i| layout.part_of(i)).collect();
            Ok(AttentionMask::from_predicate(n, |i, j| {
                g[i] == g[j] && part[i] == part[j]
            }))
        }
    }
}

/// Multi-head scaled dot-product attention without an output projection:
/// head outputs are concatenated back to width `C`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(channels: usize, heads: usize, init: &mut ParamInit) -> Result<Self> {
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{channels} channels not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            w_q: init.linear(channels, channels),
            w_k: init.linear(channels, channels),
            w_v: init.linear(channels, channels),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_q.out_features()
    }

    /// Attention of `queries` over `keys_values`; `mask` is `Nq x Nkv`.
    pub fn forward(
        &self,
        queries: ArrayView2<'_, f64>,
        keys_values: ArrayView2<'_, f64>,
        mask: Option<&AttentionMask>,
    ) -> Result<Array2<f64>> {
        Ok(self.forward_with_weights(queries, keys_values, mask, false)?.0)
    }

    /// Same as [`forward`](Self::forward); optionally also returns the
    /// per-head weight matrices.
    pub fn forward_with_weights(
        &self,
        queries: ArrayView2<'_, f64>,
        keys_values: ArrayView2<'_, f64>,
        mask: Option<&AttentionMask>,
        keep_weights: bool,
    ) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
        let c = self.channels();
        if queries.ncols() != c || keys_values.ncols() != c {
            return Err(Error::Shape(format!(
                "attention expects width {c}, got {} and {}",
                queries.ncols(),
                keys_values.ncols()
            )));
        }
        if has_nan(queries) || has_nan(keys_values) {
            return Err(Error::NaN("attention input"));
        }
        let (nq, nk) = (queries.nrows(), keys_values.nrows());
        if let Some(m) = mask {
            if nq != nk || m.size() != nq {
                return Err(Error::Shape(format!(
                    "mask of size {} for {nq}x{nk} attention",
                    m.size()
                )));
            }
        }
        let q = self.w_q.forward(queries);
        let k = self.w_k.forward(keys_values);
        let v = self.w_v.forward(keys_values);
        let d = c / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let mut out = Array2::zeros((nq, c));
        let mut weights_out = Vec::new();
        if nk == 0 {
            return Ok((out, weights_out));
        }
        let (q, k, v) = (q.as_standard_layout(), k.as_standard_layout(), v.as_standard_layout());
        let (qs, ks, vs) = (q.as_slice().unwrap(), k.as_slice().unwrap(), v.as_slice().unwrap());
        let mut head_w: Vec<Array2<f64>> = if keep_weights {
            (0..self.heads).map(|_| Array2::zeros((nq, nk))).collect()
        } else {
            Vec::new()
        };
        // masked keys get exactly zero weight, so only allowed keys are visited
        let mut keys: Vec<usize> = Vec::with_capacity(nk);
        let mut logits: Vec<f64> = Vec::with_capacity(nk);
        let mut acc = vec![0.0; d];
        for i in 0..nq {
            keys.clear();
            match mask {
                Some(m) => keys.extend((0..nk).filter(|&j| m.allowed(i, j))),
                None => keys.extend(0..nk),
            }
            if keys.is_empty() {
                continue;
            }
            for h in 0..self.heads {
                let off = h * d;
                let qi = &qs[i * c + off..i * c + off + d];
                logits.clear();
                for &j in &keys {
                    let kj = &ks[j * c + off..j * c + off + d];
                    let mut dot = 0.0;
                    for (a, b) in qi.iter().zip(kj) {
                        dot += a * b;
                    }
                    logits.push(dot * scale + mask.map_or(0.0, |m| m.value(i, j)));
                }
                softmax_in_place(&mut logits);
                acc.iter_mut().for_each(|a| *a = 0.0);
                for (&j, &w) in keys.iter().zip(&logits) {
                    let vj = &vs[j * c + off..j * c + off + d];
                    for (a, b) in acc.iter_mut().zip(vj) {
                        *a += w * b;
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    out[[i, off + ch]] = *a;
                }
                if let Some(hw) = head_w.get_mut(h) {
                    for (&j, &w) in keys.iter().zip(&logits) {
                        hw[[i, j]] = w;
                    }
                }
            }
        }
        weights_out = head_w;
        Ok((out, weights_out))
    }
}

/// `softmax(mask + Q K^T / sqrt(d)) V` per head.
pub fn masked_self_attention(
    x: ArrayView2<'_, f64>,
    mask: &AttentionMask,
    params: &MultiHeadAttention,
) -> Result<Array2<f64>> {
    params.forward(x, x, Some(mask))
}

/// One scale of a per-view feature pyramid, stored `H x W x C` row-major.
/// Node `(r, c)` sits at image pixel `((c + 0.5) * stride, (r + 0.5) * stride)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: f64,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, stride: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "feature map {height}x{width}x{channels} with {} values",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            stride,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, stride: f64, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            stride,
            data: vec![value; height * width * channels],
        }
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.width + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn at_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.width + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    /// Bilinear interpolation at map coordinates `(x, y)` = `(col, row)`,
    /// clamped to the grid.
    pub fn bilinear(&self, x: f64, y: f64) -> Vec<f64> {
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let (a, b, c, d) = (self.at(y0, x0), self.at(y0, x1), self.at(y1, x0), self.at(y1, x1));
        (0..self.channels)
            .map(|ch| {
                let top = a[ch] + (b[ch] - a[ch]) * fx;
                let bot = c[ch] + (d[ch] - c[ch]) * fx;
                top + (bot - top) * fy
            })
            .collect()
    }

    /// Samples at an image pixel position.
    pub fn sample_pixel(&self, uv: [f64; 2]) -> Vec<f64> {
        self.bilinear(uv[0] / self.stride - 0.5, uv[1] / self.stride - 0.5)
    }
}

/// Multi-scale feature maps keyed by view id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureBank {
    pub maps: BTreeMap<usize, Vec<FeatureMap>>,
}

impl FeatureBank {
    pub fn scales(&self, view_id: usize) -> Result<&[FeatureMap]> {
        self.maps
            .get(&view_id)
            .map(Vec::as_slice)
            .filter(|s| !s.is_empty())
            .ok_or(Error::MissingFeatures(view_id))
    }

    pub fn feature_channels(&self) -> Option<usize> {
        self.maps.values().flatten().next().map(|m| m.channels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefPointCrossAttention {
    /// Query -> per-scale mixing logits.
    pub scale_logits: Linear,
    /// Sampled feature (width `C_f`) -> query width `C`.
    pub out: Linear,
}

impl RefPointCrossAttention {
    pub fn new(channels: usize, feature_channels: usize, n_scales: usize, init: &mut ParamInit) -> Self {
        Self {
            scale_logits: init.linear(channels, n_scales),
            out: init.linear(feature_channels, channels),
        }
    }

    pub fn n_scales(&self) -> usize {
        self.scale_logits.out_features()
    }

    /// Mixed multi-scale sample for one query, before the output projection.
    pub fn sample(&self, query: &[f64], ref_point: [f64; 2], scales: &[FeatureMap]) -> Result<Vec<f64>> {
        if scales.len() != self.n_scales() {
            return Err(Error::Shape(format!(
                "{} scales configured, {} provided",
                self.n_scales(),
                scales.len()
            )));
        }
        let mut w = self.scale_logits.forward_row(query);
        softmax_in_place(&mut w);
        let mut acc = vec![0.0; self.out.in_features()];
        for (map, wi) in scales.iter().zip(&w) {
            if map.channels != acc.len() {
                return Err(Error::Shape(format!("feature width {} != {}", map.channels, acc.len())));
            }
            for (a, s) in acc.iter_mut().zip(map.sample_pixel(ref_point)) {
                *a += wi * s;
            }
        }
        Ok(acc)
    }
}

/// Each query samples only the feature maps of its own view.
pub fn ref_point_cross_attention(
    x: ArrayView2<'_, f64>,
    ref_points: &[[f64; 2]],
    features: &FeatureBank,
    view_of_query: &[usize],
    params: &RefPointCrossAttention,
) -> Result<Array2<f64>> {
    let m = x.nrows();
    if ref_points.len() != m || view_of_query.len() != m {
        return Err(Error::Shape(format!(
            "{m} queries, {} reference points, {} view labels",
            ref_points.len(),
            view_of_query.len()
        )));
    }
    if has_nan(x) {
        return Err(Error::NaN("cross-attention input"));
    }
    let mut out = Array2::zeros((m, params.out.out_features()));
    for i in 0..m {
        let scales = features.scales(view_of_query[i])?;
        let sampled = params.sample(&x.row(i).to_vec(), ref_points[i], scales)?;
        for (c, v) in params.out.forward_row(&sampled).into_iter().enumerate() {
            out[[i, c]] = v;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn eq3_literal_mask() {
        let g = GroupMask::new(vec![0, 0, 1], 2).unwrap();
        let m = build_mask(&g, None).unwrap();
        let allowed: Vec<(usize, usize)> = (0..3)
            .flat_map(|i| (0..3).map(move |j| (i, j)))
            .filter(|&(i, j)| m.allowed(i, j))
            .collect();
        assert_eq!(allowed, vec![(0, 0), (0, 1), (1, 0), (1, 1), (2, 2)]);
        assert_eq!(m.value(0, 2), MASK_SENTINEL);
    }

    #[test]
    fn single_group_is_all_zero() {
        let m = build_mask(&GroupMask::single(4), None).unwrap();
        assert!((0..4).all(|i| m.row(i).iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn out_of_range_group() {
        assert!(matches!(
            GroupMask::new(vec![0, 3], 2),
            Err(Error::GroupOutOfRange { id: 3, .. })
        ));
    }

    fn seeded_attn(c: usize, h: usize) -> MultiHeadAttention {
        MultiHeadAttention::new(c, h, &mut ParamInit::new(11)).unwrap()
    }

    #[test]
    fn equal_logits_give_uniform_weights() {
        let attn = MultiHeadAttention {
            w_q: Linear::zeros(4, 4),
            ..seeded_attn(4, 1)
        };
        let x = array![[1.0, 2.0, 3.0, 4.0], [0.5, 0.1, 0.0, 1.0], [2.0, 2.0, 2.0, 2.0]];
        let mask = build_mask(&GroupMask::new(vec![0, 0, 1], 2).unwrap(), None).unwrap();
        let (_, w) = attn
            .forward_with_weights(x.view(), x.view(), Some(&mask), true)
            .unwrap();
        assert_eq!(w[0][[0, 0]], 0.5);
        assert_eq!(w[0][[0, 1]], 0.5);
        assert_eq!(w[0][[0, 2]], 0.0);
        assert_eq!(w[0][[2, 2]], 1.0);
    }

    #[test]
    fn single_query_returns_value_projection() {
        let attn = seeded_attn(4, 2);
        let x = array![[0.3, -1.0, 2.0, 0.5]];
        let out = masked_self_attention(x.view(), &AttentionMask::unmasked(1), &attn).unwrap();
        let v = attn.w_v.forward_row(&x.row(0).to_vec());
        assert_eq!(out.row(0).to_vec(), v);
    }

    #[test]
    fn nan_input_fails_fast() {
        let attn = seeded_attn(4, 1);
        let x = array![[f64::NAN, 0.0, 0.0, 0.0]];
        assert!(matches!(
            masked_self_attention(x.view(), &AttentionMask::unmasked(1), &attn),
            Err(Error::NaN(_))
        ));
    }

    #[test]
    fn head_count_must_divide_channels() {
        assert!(MultiHeadAttention::new(6, 4, &mut ParamInit::new(0)).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let k = FeatureMap::filled(3, 4, 2, 8.0, 0.7);
        assert_eq!(k.sample_pixel([13.1, 5.9]), vec![0.7, 0.7]);
        let m = FeatureMap::new(2, 2, 1, 1.0, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m.bilinear(1.0, 0.0), vec![1.0]);
        assert_eq!(m.bilinear(0.5, 0.5), vec![1.5]);
        // pixel (1, 1) is the cell center at stride 1
        assert_eq!(m.sample_pixel([1.0, 1.0]), vec![1.5]);
        // clamped outside the grid
        assert_eq!(m.bilinear(-5.0, 9.0), vec![2.0]);
    }

    #[test]
    fn cross_attention_needs_each_view() {
        let p = RefPointCrossAttention::new(4, 2, 1, &mut ParamInit::new(1));
        let mut bank = FeatureBank::default();
        bank.maps.insert(0, vec![FeatureMap::filled(2, 2, 2, 4.0, 1.0)]);
        let x = Array2::zeros((2, 4));
        let err = ref_point_cross_attention(x.view(), &[[1.0, 1.0]; 2], &bank, &[0, 5], &p).unwrap_err();
        assert!(matches!(err, Error::MissingFeatures(5)));
    }
}
