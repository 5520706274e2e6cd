//! Batch pipeline behind the `mvdet` binary.
//!
//! [`run_pipeline`] samples scenes, renders their features, runs the hybrid
//! decoder, allocates queries, perturbs ground truth into oracle detections
//! and writes everything plus a metrics CSV under one output directory.
//! Scenes are processed in parallel and merged in scene order, so a rerun
//! with the same config is byte-identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use mvdet_core::allocation::{allocate, clamp_anchors, AllocationResult};
use mvdet_core::crop_scale::{extend_rig, CropRule};
use mvdet_core::decoder::{DecoderConfig, DecoderOutput, DenoiseInput, HybridDecoder, Preset, SubLayerKind, TapKind};
use mvdet_core::denoising::{allocate_noise, make_noisy_anchors, NoiseConfig};
use mvdet_core::geometry::{Rig, RigFile};
use mvdet_core::interchange::{detections_to_json, ground_truth_to_json};
use mvdet_core::matching::{aar_curve, ap_2d, tau_sweep, AarResult, ApEntry, Det3D, FrameDet, FrameGt};
use mvdet_core::simulator::{
    perturb, render_features, sample_query_anchors, sample_scene, AnchorSampling, FeatureSpec, OracleNoise, Scene,
    SceneConfig,
};

pub mod commands;

pub const REPORT_FORMAT: &str = "mvdet-report/1";
pub const ALLOCATION_FORMAT: &str = "mvdet-alloc/1";
pub const HEADS_FORMAT: &str = "mvdet-heads/1";
pub const METRICS_HEADER: [&str; 12] = [
    "table",
    "tau_dis",
    "tau_iou",
    "class",
    "aar",
    "recall",
    "ap",
    "n_candidate",
    "n_valid",
    "n_gt",
    "n_pred",
    "no_candidates",
];

/// Seed of stream `tag` for item `index` (splitmix64 finalizer).
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_SCENE: u64 = 1;
const TAG_ANCHORS: u64 = 2;
const TAG_NOISE: u64 = 3;
const TAG_DENOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Rig description file; the built-in six-camera rig when absent.
    pub rig: Option<PathBuf>,
    /// Layer arrangement `A`..`F`.
    pub preset: String,
    pub crop_rules: Vec<CropRule>,
    pub n_scenes: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub noise: OracleNoise,
    pub features: FeatureSpec,
    pub anchors: AnchorSampling,
    /// Layer counts come from `preset`; the rest is used as given.
    pub decoder: DecoderConfig,
    /// Propagating denoising groups built from each scene's ground truth.
    pub denoise: Option<NoiseConfig>,
    pub tau_dis: f64,
    /// `[start, end, step]` of the IoU threshold sweep.
    pub tau_iou_sweep: [f64; 3],
    pub ap_thresholds: Vec<f64>,
    /// Detections from the decoder kept per scene in the heads file.
    pub top_detections: usize,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rig: None,
            preset: "F".into(),
            crop_rules: Vec::new(),
            n_scenes: 10,
            seed: 0,
            scene: SceneConfig::default(),
            noise: OracleNoise::default(),
            features: FeatureSpec::default(),
            anchors: AnchorSampling::default(),
            decoder: DecoderConfig::default(),
            denoise: None,
            tau_dis: 2.0,
            tau_iou_sweep: [0.1, 0.9, 0.1],
            ap_thresholds: vec![0.5, 0.7],
            top_detections: 100,
            output_dir: PathBuf::from("mvdet-out"),
            jobs: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        Preset::from_name(&self.preset)?;
        if let Some(r) = &self.rig {
            if !r.is_file() {
                bail!("rig file {} does not exist", r.display());
            }
        }
        self.scene.validate()?;
        self.noise.validate()?;
        self.decoder.clone().with_preset(self.preset()?).validate()?;
        if self.features.channels != self.decoder.feature_channels
            || self.features.strides.len() != self.decoder.n_scales
        {
            bail!(
                "features ({} channels, {} scales) disagree with the decoder ({} channels, {} scales)",
                self.features.channels,
                self.features.strides.len(),
                self.decoder.feature_channels,
                self.decoder.n_scales
            );
        }
        if let Some(d) = &self.denoise {
            d.validate()?;
        }
        tau_sweep(self.tau_iou_sweep[0], self.tau_iou_sweep[1], self.tau_iou_sweep[2])?;
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset> {
        Ok(Preset::from_name(&self.preset)?)
    }

    pub fn decoder_config(&self) -> Result<DecoderConfig> {
        Ok(self.decoder.clone().with_preset(self.preset()?))
    }
}

/// Physical rig from `path` (or the built-in rig) with `crop_rules` applied.
pub fn load_rig(path: Option<&Path>, crop_rules: &[CropRule]) -> Result<Rig> {
    let base = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading rig {}", p.display()))?;
            RigFile::from_json(&text)
                .with_context(|| format!("parsing rig {}", p.display()))?
                .rig()?
        }
        None => Rig::surround_six(),
    };
    Ok(extend_rig(&base, crop_rules)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraColumns {
    pub columns: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSummary {
    pub format: String,
    pub n_3d: usize,
    pub n_2d: usize,
    pub per_camera: BTreeMap<usize, CameraColumns>,
    pub capped: BTreeMap<usize, usize>,
    pub dropped_degenerate: usize,
    /// `[owner, view_id, center_in_view, u, v]` per column.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<(usize, usize, bool, f64, f64)>,
}

impl AllocationSummary {
    pub fn new(alloc: &AllocationResult, with_columns: bool) -> Self {
        let mut per_camera: BTreeMap<usize, CameraColumns> = BTreeMap::new();
        for (j, &v) in alloc.mapping.camera_of_col().iter().enumerate() {
            let e = per_camera.entry(v).or_insert(CameraColumns {
                columns: 0,
                truncated: 0,
            });
            e.columns += 1;
            if !alloc.center_in_view[j] {
                e.truncated += 1;
            }
        }
        let columns = if with_columns {
            (0..alloc.n_2d())
                .map(|j| {
                    let [u, v] = alloc.ref_points[j];
                    (
                        alloc.mapping.owner(j),
                        alloc.mapping.camera_of_col()[j],
                        alloc.center_in_view[j],
                        u,
                        v,
                    )
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            format: ALLOCATION_FORMAT.into(),
            n_3d: alloc.mapping.n_3d(),
            n_2d: alloc.n_2d(),
            per_camera,
            capped: alloc
                .caps
                .iter()
                .map(|c| (c.view_id, c.truncated_candidates - c.kept))
                .filter(|(_, d)| *d > 0)
                .collect(),
            dropped_degenerate: alloc.dropped_degenerate.len(),
            columns,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubLayerSummary {
    pub index: usize,
    pub kind: SubLayerKind,
    /// 2D columns per camera (2D sub-layers only).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub columns_per_camera: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoise_columns: Option<usize>,
    pub taps: Vec<TapKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub format: String,
    pub sub_layers: Vec<SubLayerSummary>,
    pub aggregation_taps: usize,
    pub outputs_2d: usize,
    /// Highest-scoring decoded 3D boxes of the last head.
    pub detections: Vec<Det3D>,
}

impl HeadSummary {
    pub fn new(out: &DecoderOutput, top: usize) -> Self {
        let mut sub_layers: Vec<SubLayerSummary> = out
            .heads
            .sub_layers
            .iter()
            .enumerate()
            .map(|(index, &kind)| SubLayerSummary {
                index,
                kind,
                columns_per_camera: BTreeMap::new(),
                denoise_columns: None,
                taps: Vec::new(),
            })
            .collect();
        for o in &out.heads.outputs2d {
            let s = &mut sub_layers[o.sub_layer];
            for v in &o.camera_of_col {
                *s.columns_per_camera.entry(*v).or_insert(0) += 1;
            }
            if !o.denoise.is_empty() {
                s.denoise_columns = Some(o.denoise.len());
            }
        }
        for o in &out.heads.outputs3d {
            sub_layers[o.sub_layer].taps.push(o.kind);
        }
        let mut detections = Vec::new();
        if let Some(last) = out.heads.last_3d() {
            let scores = out.queries.scores.clone().unwrap_or_default();
            for (i, (a, z)) in last.boxes.iter().zip(&last.logits).enumerate() {
                let class = z
                    .iter()
                    .enumerate()
                    .max_by(|x, y| x.1.total_cmp(y.1))
                    .map_or(0, |(c, _)| c);
                detections.push(Det3D {
                    anchor: *a,
                    class,
                    score: scores.get(i).copied().unwrap_or(0.0),
                });
            }
            // stable: equal scores keep query order
            detections.sort_by(|a, b| b.score.total_cmp(&a.score));
            detections.truncate(top);
        }
        Self {
            format: HEADS_FORMAT.into(),
            sub_layers,
            aggregation_taps: out.heads.aggregation_taps(),
            outputs_2d: out.heads.outputs2d.len(),
            detections,
        }
    }
}

/// Everything produced for one scene.
#[derive(Debug, Clone)]
pub struct SceneArtifacts {
    pub scene: Scene,
    pub allocation: Option<AllocationSummary>,
    pub heads: HeadSummary,
    pub detections: FrameDet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub preset: String,
    pub n_scenes: usize,
    pub n_views: usize,
    pub n_queries: usize,
    /// Mean 2D columns per scene over the initial anchors.
    pub mean_columns: Option<f64>,
    pub aggregation_taps_per_scene: usize,
    pub aar_curve: Vec<AarResult>,
    pub ap: Vec<ApEntry>,
    pub notes: Vec<String>,
}

fn build_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

/// Runs the per-scene part of the pipeline for scene `index`.
pub fn process_scene(cfg: &RunConfig, rig: &Rig, decoder: &HybridDecoder, index: usize) -> Result<SceneArtifacts> {
    let i = index as u64;
    let scene = sample_scene(derive_seed(cfg.seed, TAG_SCENE, i), i, &cfg.scene, rig)
        .with_context(|| format!("sampling scene {index}"))?;
    let features = render_features(&scene, rig, &cfg.features)?;
    let dc = decoder.config();
    let anchors = sample_query_anchors(derive_seed(cfg.seed, TAG_ANCHORS, i), dc.n_queries, &cfg.anchors)?;
    let allocation = if dc.l_2d > 0 {
        let clamped = clamp_anchors(&anchors, &dc.limits);
        Some(AllocationSummary::new(&allocate(&clamped, rig, &dc.limits)?, false))
    } else {
        None
    };
    let denoise = match &cfg.denoise {
        Some(nc) if !scene.gt.boxes.is_empty() => {
            let gt: Vec<_> = scene.gt.boxes.iter().map(|b| b.anchor).collect();
            let noisy = make_noisy_anchors(&gt, nc, derive_seed(cfg.seed, TAG_DENOISE, i))?;
            let alloc = allocate_noise(&scene.gt.associations(), &noisy, rig, 0)?;
            Some(DenoiseInput {
                anchors: noisy.flat_anchors(),
                n_groups: noisy.groups.len(),
                alloc,
            })
        }
        _ => None,
    };
    let queries = decoder.initial_queries(anchors);
    let out = decoder
        .forward(rig, &features, &queries, None, denoise.as_ref())
        .with_context(|| format!("decoder on scene {index}"))?;
    let heads = HeadSummary::new(&out, cfg.top_detections);
    let detections = perturb(&scene, &cfg.noise, derive_seed(cfg.seed, TAG_NOISE, i))?;
    log::debug!(
        "scene {index}: {} boxes, {} 2D gt, {} columns",
        scene.gt.boxes.len(),
        scene.gt.n_2d(),
        allocation.as_ref().map_or(0, |a| a.n_2d)
    );
    Ok(SceneArtifacts {
        scene,
        allocation,
        heads,
        detections,
    })
}

/// Scenes `0..cfg.n_scenes` in order, computed on `cfg.jobs` threads.
pub fn process_scenes(cfg: &RunConfig, rig: &Rig) -> Result<Vec<SceneArtifacts>> {
    let decoder = HybridDecoder::new(cfg.decoder_config()?)?;
    let pool = build_pool(cfg.jobs)?;
    pool.install(|| {
        (0..cfg.n_scenes)
            .into_par_iter()
            .map(|i| process_scene(cfg, rig, &decoder, i))
            .collect()
    })
}

pub fn metrics_rows(curve: &[AarResult], ap: &[ApEntry]) -> Vec<[String; 12]> {
    let f = |v: f64| format!("{v}");
    let mut rows = Vec::new();
    for r in curve {
        rows.push([
            "aar".into(),
            f(r.tau_dis),
            f(r.tau_iou),
            String::new(),
            f(r.aar),
            f(r.recall),
            String::new(),
            r.n_candidate.to_string(),
            r.n_valid.to_string(),
            r.n_gt_2d.to_string(),
            String::new(),
            r.no_candidates.to_string(),
        ]);
    }
    for e in ap {
        rows.push([
            "ap".into(),
            String::new(),
            f(e.iou_threshold),
            e.class.to_string(),
            String::new(),
            String::new(),
            e.ap.map(f).unwrap_or_default(),
            String::new(),
            String::new(),
            e.n_gt.to_string(),
            e.n_pred.to_string(),
            String::new(),
        ]);
    }
    rows
}

pub fn write_metrics_csv(path: &Path, curve: &[AarResult], ap: &[ApEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(METRICS_HEADER)?;
    for row in metrics_rows(curve, ap) {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Full pipeline; writes artifacts under `cfg.output_dir` and returns the
/// report that was written to `report.json`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let rig = load_rig(cfg.rig.as_deref(), &cfg.crop_rules)?;
    let out = &cfg.output_dir;
    for sub in ["scenes", "allocations", "heads"] {
        fs::create_dir_all(out.join(sub)).with_context(|| format!("creating {}", out.join(sub).display()))?;
    }
    log::info!(
        "running {} scenes on {} views with preset {}",
        cfg.n_scenes,
        rig.len(),
        cfg.preset
    );
    let artifacts = process_scenes(cfg, &rig)?;

    write_json(&out.join("config.json"), cfg)?;
    write_json(&out.join("rig.json"), &rig)?;
    for (i, a) in artifacts.iter().enumerate() {
        write_text(
            &out.join(format!("scenes/scene_{i:04}.json")),
            &(a.scene.to_json()? + "\n"),
        )?;
        if let Some(alloc) = &a.allocation {
            write_json(&out.join(format!("allocations/scene_{i:04}.json")), alloc)?;
        }
        write_json(&out.join(format!("heads/scene_{i:04}.json")), &a.heads)?;
    }
    let gts: Vec<FrameGt> = artifacts.iter().map(|a| a.scene.gt.clone()).collect();
    let dets: Vec<FrameDet> = artifacts.iter().map(|a| a.detections.clone()).collect();
    write_text(&out.join("gt.json"), &(ground_truth_to_json(&rig, &gts)? + "\n"))?;
    write_text(&out.join("pred.json"), &(detections_to_json(&dets)? + "\n"))?;

    let frames: Vec<(FrameGt, FrameDet)> = gts.into_iter().zip(dets).collect();
    let taus = tau_sweep(cfg.tau_iou_sweep[0], cfg.tau_iou_sweep[1], cfg.tau_iou_sweep[2])?;
    let curve = aar_curve(&frames, &rig, cfg.tau_dis, &taus)?;
    let ap_frames: Vec<_> = frames
        .iter()
        .map(|(g, d)| (g.views.clone(), d.boxes2d.clone()))
        .collect();
    let ap = ap_2d(&ap_frames, &cfg.ap_thresholds);
    write_metrics_csv(&out.join("metrics.csv"), &curve, &ap)?;

    let mut notes = Vec::new();
    let dc = cfg.decoder_config()?;
    let allocs: Vec<&AllocationSummary> = artifacts.iter().filter_map(|a| a.allocation.as_ref()).collect();
    let mean_columns = if allocs.is_empty() {
        notes.push("no 2D outputs: preset has no 2D sub-layers, allocation skipped".to_string());
        None
    } else {
        Some(allocs.iter().map(|a| a.n_2d as f64).sum::<f64>() / allocs.len() as f64)
    };
    if dc.schedule().iter().all(|k| *k == SubLayerKind::ThreeD) {
        log::info!("preset {} runs as a plain 3D decoder", cfg.preset);
    }
    let report = RunReport {
        format: REPORT_FORMAT.into(),
        preset: cfg.preset.clone(),
        n_scenes: cfg.n_scenes,
        n_views: rig.len(),
        n_queries: dc.n_queries,
        mean_columns,
        aggregation_taps_per_scene: artifacts.first().map_or(0, |a| a.heads.aggregation_taps),
        aar_curve: curve,
        ap,
        notes,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

/// `start:end:step` as used by `--tau-iou-sweep`.
pub fn parse_sweep(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("sweep must look like start:end:step, got {text:?}");
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .with_context(|| format!("bad number {p:?} in sweep {text:?}"))?;
    }
    tau_sweep(out[0], out[1], out[2])?;
    Ok(out)
}
