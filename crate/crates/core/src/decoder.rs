//! Hybrid decoder: interleaved multi-view 2D and 3D sub-layers.
//!
//! One hybrid layer runs `l_2d` 2D sub-layers followed by `l_3d` 3D
//! sub-layers, and the whole stack repeats `l_hybrid` times.
//!
//! A 2D sub-layer: temporal cross-attention, allocation of the (clamped)
//! anchors to camera groups, gather, group self-attention, per-view
//! reference-point cross-attention, 2D head, truncation gate, aggregation,
//! then a 3D head that supervises and refines the aggregated queries.
//!
//! A 3D sub-layer: temporal cross-attention, self-attention, reference-point
//! cross-attention over every view the anchor projects into (mean over
//! views), then the 3D head.
//!
//! Heads are two-layer perceptrons. The 3D head predicts additive deltas for
//! `(x, y, z, w, l, h, yaw)`; velocity is carried unchanged.

use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::aggregation::{fuse_residual, gate_truncation, GateParams};
use crate::allocation::{allocate, clamp_anchors, gather_2d, scatter_mean, AllocationLimits};
use crate::denoising::{restore_3d, DenoiseLayout, NoisyAllocation};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Anchor3D, Box2D, Rig};
use crate::groupattn::{build_mask, AttentionMask, FeatureBank, GroupMask, MultiHeadAttention, RefPointCrossAttention};
use crate::matching::Pred2D;
use crate::nn::{has_nan, sigmoid, Linear, Mlp, ParamInit};

/// Layer arrangements `(l_2d, l_3d, l_hybrid)`, all with six sub-layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Preset {
    A,
    B,
    C,
    D,
    E,
    F,
}

impl Preset {
    pub const ALL: [Preset; 6] = [Preset::A, Preset::B, Preset::C, Preset::D, Preset::E, Preset::F];

    pub fn layers(self) -> (usize, usize, usize) {
        match self {
            Preset::A => (0, 1, 6),
            Preset::B => (1, 0, 6),
            Preset::C => (2, 1, 2),
            Preset::D => (1, 2, 2),
            Preset::E => (3, 3, 1),
            Preset::F => (1, 1, 3),
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Preset::A),
            "B" => Ok(Preset::B),
            "C" => Ok(Preset::C),
            "D" => Ok(Preset::D),
            "E" => Ok(Preset::E),
            "F" => Ok(Preset::F),
            _ => Err(Error::Config(format!("unknown preset {name:?} (expected A-F)"))),
        }
    }
}

/// Input resolution and query count of the reference setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Profile {
    /// 704 x 256 input, 900 queries.
    Surround704,
    /// 1408 x 512 input, 1200 queries.
    Surround1408,
    /// 960 x 640 input, 900 queries.
    LongRange960,
}

impl Profile {
    pub fn image_size(self) -> [u32; 2] {
        match self {
            Profile::Surround704 => [704, 256],
            Profile::Surround1408 => [1408, 512],
            Profile::LongRange960 => [960, 640],
        }
    }

    pub fn n_queries(self) -> usize {
        match self {
            Profile::Surround1408 => 1200,
            _ => 900,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub n_queries: usize,
    pub channels: usize,
    pub l_2d: usize,
    pub l_3d: usize,
    pub l_hybrid: usize,
    pub top_k_temporal: usize,
    pub heads: usize,
    pub seed: u64,
    pub feature_channels: usize,
    pub n_scales: usize,
    pub n_classes: usize,
    pub hidden: usize,
    /// Zero the output layer of every head so no anchor moves.
    pub zero_init_heads: bool,
    pub limits: AllocationLimits,
    /// Lower bound on refined box sizes, meters.
    pub min_size: f64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        let (l_2d, l_3d, l_hybrid) = Preset::F.layers();
        Self {
            n_queries: 900,
            channels: 256,
            l_2d,
            l_3d,
            l_hybrid,
            top_k_temporal: 600,
            heads: 8,
            seed: 0,
            feature_channels: 16,
            n_scales: 3,
            n_classes: 10,
            hidden: 256,
            zero_init_heads: false,
            limits: AllocationLimits::default(),
            min_size: 0.1,
        }
    }
}

impl DecoderConfig {
    pub fn with_preset(mut self, preset: Preset) -> Self {
        (self.l_2d, self.l_3d, self.l_hybrid) = preset.layers();
        self
    }

    pub fn for_profile(profile: Profile) -> Self {
        Self {
            n_queries: profile.n_queries(),
            ..Self::default()
        }
    }

    pub fn total_sub_layers(&self) -> usize {
        (self.l_2d + self.l_3d) * self.l_hybrid
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_queries == 0 {
            return Err(Error::Config("n_queries must be positive".into()));
        }
        if self.total_sub_layers() == 0 {
            return Err(Error::Config("decoder has no sub-layers".into()));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.top_k_temporal > self.n_queries {
            return Err(Error::Config(format!(
                "top_k_temporal {} exceeds {} queries",
                self.top_k_temporal, self.n_queries
            )));
        }
        if self.n_scales == 0 || self.feature_channels == 0 || self.n_classes == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "scales, feature channels, classes and hidden width must be positive".into(),
            ));
        }
        if !(self.min_size > 0.0) {
            return Err(Error::Config("min_size must be positive".into()));
        }
        self.limits.validate()
    }

    /// Sub-layer kinds in execution order.
    pub fn schedule(&self) -> Vec<SubLayerKind> {
        let mut out = Vec::with_capacity(self.total_sub_layers());
        for _ in 0..self.l_hybrid {
            out.extend(std::iter::repeat_n(SubLayerKind::TwoD, self.l_2d));
            out.extend(std::iter::repeat_n(SubLayerKind::ThreeD, self.l_3d));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubLayerKind {
    #[serde(rename = "2d")]
    TwoD,
    #[serde(rename = "3d")]
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub features: Array2<f64>,
    pub anchors: Vec<Anchor3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.anchors.len();
        if self.features.nrows() != n || self.scores.as_ref().is_some_and(|s| s.len() != n) {
            return Err(Error::Shape(format!(
                "query set rows disagree: {} features, {n} anchors",
                self.features.nrows()
            )));
        }
        Ok(())
    }
}

/// The `k` highest-scoring rows in descending score order; ties go to the
/// lower index.
pub fn propagate_topk(queries: &QuerySet, k: usize) -> Result<QuerySet> {
    queries.validate()?;
    let scores = queries.scores.as_ref().ok_or(Error::MissingScores)?;
    let n = queries.len();
    if k > n {
        return Err(Error::TopK { k, n });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NaN("query scores"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(QuerySet {
        features: queries.features.select(Axis(0), &order),
        anchors: order.iter().map(|&i| queries.anchors[i]).collect(),
        scores: Some(order.iter().map(|&i| scores[i]).collect()),
    })
}

/// Noisy queries carried alongside the matching queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseInput {
    /// Group-major noisy anchors.
    pub anchors: Vec<Anchor3D>,
    pub n_groups: usize,
    /// 2D copies from ground-truth associations, laid out after a match part
    /// of length zero.
    pub alloc: NoisyAllocation,
}

impl DenoiseInput {
    fn group_len(&self) -> usize {
        self.anchors.len().checked_div(self.n_groups).unwrap_or(0)
    }
}

/// Per-column 2D head outputs of one 2D sub-layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output2D {
    pub sub_layer: usize,
    pub preds: Vec<Pred2D>,
    pub owners: Vec<usize>,
    pub camera_of_col: Vec<usize>,
    pub center_in_view: Vec<bool>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub denoise: Vec<Pred2D>,
}

impl Output2D {
    pub fn n_cols(&self) -> usize {
        self.preds.len()
    }

    pub fn by_camera(&self) -> BTreeMap<usize, Vec<Pred2D>> {
        let mut out: BTreeMap<usize, Vec<Pred2D>> = BTreeMap::new();
        for (p, v) in self.preds.iter().zip(&self.camera_of_col) {
            out.entry(*v).or_default().push(p.clone());
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TapKind {
    /// Deep supervision on aggregated queries inside a 2D sub-layer.
    Aggregation,
    #[serde(rename = "decoder-3d")]
    Decoder3D,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output3D {
    pub sub_layer: usize,
    pub kind: TapKind,
    /// Refined anchors after this head.
    pub boxes: Vec<Anchor3D>,
    pub logits: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub denoise_boxes: Vec<Anchor3D>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadOutputs {
    pub sub_layers: Vec<SubLayerKind>,
    pub outputs2d: Vec<Output2D>,
    pub outputs3d: Vec<Output3D>,
}

impl HeadOutputs {
    pub fn aggregation_taps(&self) -> usize {
        self.outputs3d.iter().filter(|o| o.kind == TapKind::Aggregation).count()
    }

    pub fn last_3d(&self) -> Option<&Output3D> {
        self.outputs3d.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderOutput {
    pub heads: HeadOutputs,
    /// Updated matching queries with scores from the last 3D head.
    pub queries: QuerySet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoise_anchors: Option<Vec<Anchor3D>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer2D {
    temporal: MultiHeadAttention,
    self_attn: MultiHeadAttention,
    cross: RefPointCrossAttention,
    head2d: Mlp,
    gate: GateParams,
    agg_attn: MultiHeadAttention,
    head3d: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Layer3D {
    temporal: MultiHeadAttention,
    self_attn: MultiHeadAttention,
    cross: RefPointCrossAttention,
    head3d: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum SubLayer {
    TwoD(Box<Layer2D>),
    ThreeD(Box<Layer3D>),
}

/// Decoder with parameters drawn once from the config seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridDecoder {
    config: DecoderConfig,
    anchor_embed: Linear,
    layers: Vec<SubLayer>,
}

const BOX_2D_OUT: usize = 4;
const ALPHA_OUT: usize = 2;
const BOX_3D_OUT: usize = 7;

impl HybridDecoder {
    pub fn new(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let mut init = ParamInit::new(config.seed);
        let anchor_embed = init.linear(9, c);
        let head = |init: &mut ParamInit, out: usize| {
            let mut m = init.mlp(c, config.hidden, out);
            if config.zero_init_heads {
                m.out = Linear::zeros(config.hidden, out);
            }
            m
        };
        let mut layers = Vec::with_capacity(config.total_sub_layers());
        for kind in config.schedule() {
            let temporal = MultiHeadAttention::new(c, config.heads, &mut init)?;
            let self_attn = MultiHeadAttention::new(c, config.heads, &mut init)?;
            let cross = RefPointCrossAttention::new(c, config.feature_channels, config.n_scales, &mut init);
            layers.push(match kind {
                SubLayerKind::TwoD => {
                    let head2d = head(&mut init, BOX_2D_OUT + config.n_classes + ALPHA_OUT);
                    let gate = GateParams::new(c, config.hidden, &mut init);
                    let agg_attn = MultiHeadAttention::new(c, config.heads, &mut init)?;
                    let head3d = head(&mut init, BOX_3D_OUT + config.n_classes);
                    SubLayer::TwoD(Box::new(Layer2D {
                        temporal,
                        self_attn,
                        cross,
                        head2d,
                        gate,
                        agg_attn,
                        head3d,
                    }))
                }
                SubLayerKind::ThreeD => {
                    let head3d = head(&mut init, BOX_3D_OUT + config.n_classes);
                    SubLayer::ThreeD(Box::new(Layer3D {
                        temporal,
                        self_attn,
                        cross,
                        head3d,
                    }))
                }
            });
        }
        Ok(Self {
            config,
            anchor_embed,
            layers,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Query features embedded from anchor parameters.
    pub fn embed_anchors(&self, anchors: &[Anchor3D]) -> Array2<f64> {
        let mut out = Array2::zeros((anchors.len(), self.config.channels));
        for (i, a) in anchors.iter().enumerate() {
            for (c, v) in self.anchor_embed.forward_row(&a.to_array()).into_iter().enumerate() {
                out[[i, c]] = v;
            }
        }
        out
    }

    pub fn initial_queries(&self, anchors: Vec<Anchor3D>) -> QuerySet {
        QuerySet {
            features: self.embed_anchors(&anchors),
            anchors,
            scores: None,
        }
    }

    fn check_inputs(
        &self,
        rig: &Rig,
        features: &FeatureBank,
        queries: &QuerySet,
        temporal: Option<&QuerySet>,
    ) -> Result<()> {
        let cfg = &self.config;
        queries.validate()?;
        if queries.len() != cfg.n_queries || queries.features.ncols() != cfg.channels {
            return Err(Error::Config(format!(
                "expected {} x {} queries, got {} x {}",
                cfg.n_queries,
                cfg.channels,
                queries.len(),
                queries.features.ncols()
            )));
        }
        if let Some(t) = temporal {
            t.validate()?;
            if t.features.ncols() != cfg.channels {
                return Err(Error::Shape(format!(
                    "temporal queries have width {}",
                    t.features.ncols()
                )));
            }
        }
        if rig.is_empty() {
            return Err(Error::EmptyRig);
        }
        for view in rig.views() {
            let scales = features.scales(view.view_id)?;
            if scales.len() != cfg.n_scales || scales.iter().any(|m| m.channels != cfg.feature_channels) {
                return Err(Error::Config(format!(
                    "view {} has {} scales of width {:?}; config wants {} of width {}",
                    view.view_id,
                    scales.len(),
                    scales.iter().map(|m| m.channels).collect::<Vec<_>>(),
                    cfg.n_scales,
                    cfg.feature_channels
                )));
            }
        }
        for a in &queries.anchors {
            a.validate()?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        rig: &Rig,
        features: &FeatureBank,
        queries: &QuerySet,
        temporal: Option<&QuerySet>,
        denoise: Option<&DenoiseInput>,
    ) -> Result<DecoderOutput> {
        self.check_inputs(rig, features, queries, temporal)?;
        let n = queries.len();
        let mut anchors = queries.anchors.clone();
        let mut q = queries.features.clone();
        let mut dn_anchors: Vec<Anchor3D> = Vec::new();
        if let Some(d) = denoise {
            if d.alloc.mapping.n_3d() != d.anchors.len() || d.n_groups * d.group_len() != d.anchors.len() {
                return Err(Error::Shape("denoise anchors disagree with their allocation".into()));
            }
            dn_anchors = d.anchors.clone();
            q = concatenate(Axis(0), &[q.view(), self.embed_anchors(&d.anchors).view()])
                .map_err(|e| Error::Shape(e.to_string()))?;
        }
        // 3D-level mask isolating the match part from each denoise group
        let mask3d = match denoise {
            Some(d) => Some(build_mask(
                &GroupMask::single(q.nrows()),
                Some(&DenoiseLayout::stacked(n, &vec![d.group_len(); d.n_groups])),
            )?),
            None => None,
        };

        let mut heads = HeadOutputs {
            sub_layers: self.config.schedule(),
            outputs2d: Vec::new(),
            outputs3d: Vec::new(),
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            match layer {
                SubLayer::TwoD(l) => {
                    if let Some(t) = temporal {
                        q = &q + &l.temporal.forward(q.view(), t.features.view(), None)?;
                    }
                    let (q_agg, out2d) = self.two_d(l, idx, rig, features, &q, &anchors, denoise, mask3d.as_ref())?;
                    q = q_agg;
                    heads.outputs2d.push(out2d);
                    let logits = self.refine(&l.head3d, q.view(), &mut anchors, &mut dn_anchors);
                    heads.outputs3d.push(Output3D {
                        sub_layer: idx,
                        kind: TapKind::Aggregation,
                        boxes: anchors.clone(),
                        logits,
                        denoise_boxes: dn_anchors.clone(),
                    });
                }
                SubLayer::ThreeD(l) => {
                    if let Some(t) = temporal {
                        q = &q + &l.temporal.forward(q.view(), t.features.view(), None)?;
                    }
                    q = &q + &l.self_attn.forward(q.view(), q.view(), mask3d.as_ref())?;
                    let mut all = anchors.clone();
                    all.extend_from_slice(&dn_anchors);
                    q = &q + &self.sample_3d(&l.cross, rig, features, &q, &all)?;
                    let logits = self.refine(&l.head3d, q.view(), &mut anchors, &mut dn_anchors);
                    heads.outputs3d.push(Output3D {
                        sub_layer: idx,
                        kind: TapKind::Decoder3D,
                        boxes: anchors.clone(),
                        logits,
                        denoise_boxes: dn_anchors.clone(),
                    });
                }
            }
            if has_nan(q.view()) {
                return Err(Error::NaN("decoder queries"));
            }
        }
        let last = heads.last_3d().expect("validated config has at least one sub-layer");
        let scores = last
            .logits
            .iter()
            .map(|z| sigmoid(z.iter().copied().fold(f64::NEG_INFINITY, f64::max)))
            .collect();
        Ok(DecoderOutput {
            queries: QuerySet {
                features: q.slice(s![..n, ..]).to_owned(),
                anchors,
                scores: Some(scores),
            },
            denoise_anchors: denoise.map(|_| dn_anchors),
            heads,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn two_d(
        &self,
        l: &Layer2D,
        idx: usize,
        rig: &Rig,
        features: &FeatureBank,
        q: &Array2<f64>,
        anchors: &[Anchor3D],
        denoise: Option<&DenoiseInput>,
        mask3d: Option<&AttentionMask>,
    ) -> Result<(Array2<f64>, Output2D)> {
        let n = anchors.len();
        let limits = &self.config.limits;
        let alloc = allocate(&clamp_anchors(anchors, limits), rig, limits)?;
        let m = alloc.n_2d();
        let q_match = q.slice(s![..n, ..]);
        let mut q2d = gather_2d(&alloc.mapping, q_match)?;
        let mut cams = alloc.mapping.camera_of_col().to_vec();
        let mut refs = alloc.ref_points.clone();
        let mut centers = alloc.center_in_view.clone();
        let mut rects = alloc.rects.clone();
        let mut layout = None;
        if let Some(d) = denoise {
            let q_dn = q.slice(s![n.., ..]);
            let g = gather_2d(&d.alloc.mapping, q_dn)?;
            q2d = concatenate(Axis(0), &[q2d.view(), g.view()]).map_err(|e| Error::Shape(e.to_string()))?;
            cams.extend_from_slice(d.alloc.mapping.camera_of_col());
            refs.extend_from_slice(&d.alloc.ref_points);
            centers.extend_from_slice(&d.alloc.center_in_view);
            rects.extend_from_slice(&d.alloc.rects);
            layout = Some(d.alloc.layout.with_match_len(m));
        }
        let mask = build_mask(&GroupMask::from_cameras(&cams), layout.as_ref())?;
        q2d = &q2d + &l.self_attn.forward(q2d.view(), q2d.view(), Some(&mask))?;
        q2d = &q2d + &crate::groupattn::ref_point_cross_attention(q2d.view(), &refs, features, &cams, &l.cross)?;
        let preds = self.head_2d(&l.head2d, q2d.view(), &refs, &rects);
        let gated = gate_truncation(q2d.view(), &centers, &l.gate)?;

        let mut x = fuse_residual(q_match, gated.slice(s![..m, ..]), &alloc.mapping)?;
        if let Some(d) = denoise {
            let restored = restore_3d(gated.slice(s![m.., ..]), &d.alloc)?;
            let views: Vec<ArrayView2<'_, f64>> = restored.iter().map(|a| a.view()).collect();
            let fused_dn = if views.is_empty() {
                Array2::zeros((0, q.ncols()))
            } else {
                concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))?
            };
            let x_dn = &q.slice(s![n.., ..]) + &fused_dn;
            x = concatenate(Axis(0), &[x.view(), x_dn.view()]).map_err(|e| Error::Shape(e.to_string()))?;
        }
        let q_agg = l.agg_attn.forward(x.view(), x.view(), mask3d)?;

        let mut preds = preds;
        let dn_preds = preds.split_off(m);
        Ok((
            q_agg,
            Output2D {
                sub_layer: idx,
                preds,
                owners: alloc.mapping.owners().to_vec(),
                camera_of_col: alloc.mapping.camera_of_col().to_vec(),
                center_in_view: alloc.center_in_view,
                denoise: dn_preds,
            },
        ))
    }

    fn head_2d(&self, head: &Mlp, q2d: ArrayView2<'_, f64>, refs: &[[f64; 2]], rects: &[Box2D]) -> Vec<Pred2D> {
        let nc = self.config.n_classes;
        q2d.outer_iter()
            .enumerate()
            .map(|(j, row)| {
                let out = head.forward_row(&row.to_vec());
                let prior = rects[j];
                let [w, h] = prior.size;
                Pred2D {
                    rect: Box2D::new(
                        [refs[j][0] + out[0] * w, refs[j][1] + out[1] * h],
                        [w * out[2].exp(), h * out[3].exp()],
                        prior.view_id,
                    ),
                    logits: out[BOX_2D_OUT..BOX_2D_OUT + nc].to_vec(),
                    alpha: [out[BOX_2D_OUT + nc], out[BOX_2D_OUT + nc + 1]],
                }
            })
            .collect()
    }

    /// Mean over views of the per-view sampled features of each anchor.
    fn sample_3d(
        &self,
        cross: &RefPointCrossAttention,
        rig: &Rig,
        features: &FeatureBank,
        q: &Array2<f64>,
        anchors: &[Anchor3D],
    ) -> Result<Array2<f64>> {
        let limits = AllocationLimits {
            max_truncated_per_camera: usize::MAX,
            ..self.config.limits
        };
        let alloc = allocate(&clamp_anchors(anchors, &limits), rig, &limits)?;
        let per_col = gather_2d(&alloc.mapping, q.view())?;
        let sampled = crate::groupattn::ref_point_cross_attention(
            per_col.view(),
            &alloc.ref_points,
            features,
            alloc.mapping.camera_of_col(),
            cross,
        )?;
        scatter_mean(&alloc.mapping, sampled.view())
    }

    /// Applies the 3D head to every row and refines the anchors in place.
    fn refine(
        &self,
        head: &Mlp,
        q: ArrayView2<'_, f64>,
        anchors: &mut [Anchor3D],
        dn: &mut [Anchor3D],
    ) -> Vec<Vec<f64>> {
        let n = anchors.len();
        let mut logits = Vec::with_capacity(n);
        for (i, row) in q.outer_iter().enumerate() {
            let out = head.forward_row(&row.to_vec());
            let a = if i < n { &mut anchors[i] } else { &mut dn[i - n] };
            *a = refine_anchor(a, &out[..BOX_3D_OUT], self.config.min_size);
            if i < n {
                logits.push(out[BOX_3D_OUT..].to_vec());
            }
        }
        logits
    }
}

/// Additive refinement of `(x, y, z, w, l, h, yaw)` with a size floor; yaw
/// is wrapped back into `(-pi, pi]` only when it leaves that range.
pub fn refine_anchor(a: &Anchor3D, delta: &[f64], min_size: f64) -> Anchor3D {
    use std::f64::consts::PI;
    let mut yaw = a.yaw + delta[6];
    if !(yaw > -PI && yaw <= PI) {
        yaw = wrap_angle(yaw);
    }
    Anchor3D {
        center: [a.center[0] + delta[0], a.center[1] + delta[1], a.center[2] + delta[2]],
        size: [
            (a.size[0] + delta[3]).max(min_size),
            (a.size[1] + delta[4]).max(min_size),
            (a.size[2] + delta[5]).max(min_size),
        ],
        yaw,
        velocity: a.velocity,
    }
}

/// Builds a decoder from `config` and runs it once.
pub fn forward(
    config: &DecoderConfig,
    rig: &Rig,
    features: &FeatureBank,
    queries: &QuerySet,
    temporal: Option<&QuerySet>,
) -> Result<DecoderOutput> {
    HybridDecoder::new(config.clone())?.forward(rig, features, queries, temporal, None)
}
