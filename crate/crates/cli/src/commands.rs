//! Subcommand definitions and handlers.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use mvdet_core::allocation::{allocate, clamp_anchors, AllocationLimits};
use mvdet_core::crop_scale::{front_rear_rules, CropRule, Placement};
use mvdet_core::decoder::{DecoderConfig, HybridDecoder, Preset};
use mvdet_core::denoising::{allocate_noise, denoise_mask, make_noisy_anchors, NoiseConfig};
use mvdet_core::geometry::{Anchor3D, RigFile};
use mvdet_core::groupattn::GroupMask;
use mvdet_core::interchange::{detections_from_json, detections_to_json, ground_truth_from_json, ground_truth_to_json};
use mvdet_core::matching::{aar_curve, ap_2d, tau_sweep, FrameDet, FrameGt};
use mvdet_core::simulator::{
    perturb, render_features, sample_query_anchors, sample_scene, AnchorSampling, FeatureSpec, OracleNoise, Scene,
    SceneConfig,
};

use crate::{
    derive_seed, load_rig, metrics_rows, parse_sweep, run_pipeline, AllocationSummary, HeadSummary, RunConfig,
    METRICS_HEADER,
};

#[derive(Debug, Parser)]
#[command(
    name = "mvdet",
    version,
    about = "Multi-camera 2D/3D query decoding toolkit over synthetic scenes"
)]
#[command(after_help = "Set MVDET_LOG (e.g. MVDET_LOG=debug) to control log verbosity.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample scenes and write scene, ground-truth and oracle-detection JSON.
    Simulate(SimulateArgs),
    /// Allocate per-camera 2D queries for sampled 3D anchors.
    Allocate(AllocateArgs),
    /// Run the hybrid decoder on one scene and summarize its head outputs.
    Forward(ForwardArgs),
    /// AAR / Recall curve over an IoU-threshold sweep, as CSV.
    EvalAar(EvalAarArgs),
    /// Per-class 11-point AP of 2D detections, as CSV.
    EvalAp(EvalApArgs),
    /// Append crop-and-scale long-range views to a rig.
    CropViews(CropViewsArgs),
    /// Build denoising groups for one scene and describe their layout.
    DenoiseDemo(DenoiseDemoArgs),
    /// Full pipeline: scenes, allocations, head outputs and metrics.
    Run(RunArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseLevel {
    Zero,
    Moderate,
}

impl NoiseLevel {
    fn noise(self) -> OracleNoise {
        match self {
            NoiseLevel::Zero => OracleNoise::default(),
            NoiseLevel::Moderate => OracleNoise::moderate(),
        }
    }
}

#[derive(Debug, Args)]
pub struct RigArgs {
    /// Rig description JSON; the built-in six-camera rig when omitted.
    #[arg(long)]
    pub rig: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub n_scenes: usize,
    #[arg(long, default_value_t = 30)]
    pub n_boxes: usize,
    #[command(flatten)]
    pub rig: RigArgs,
    /// Oracle noise applied when writing pred.json.
    #[arg(long, value_enum, default_value_t = NoiseLevel::Zero)]
    pub noise: NoiseLevel,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AllocateArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 900)]
    pub n_queries: usize,
    #[command(flatten)]
    pub rig: RigArgs,
    /// Cap on truncated columns per camera.
    #[arg(long, default_value_t = 100)]
    pub max_truncated: usize,
    /// Include one entry per column.
    #[arg(long)]
    pub columns: bool,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Layer arrangement A..F.
    #[arg(long, default_value = "F")]
    pub preset: String,
    #[arg(long, default_value_t = 900)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 256)]
    pub channels: usize,
    /// Scene JSON; sampled from the seed when omitted.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[command(flatten)]
    pub rig: RigArgs,
    #[arg(long, default_value_t = 100)]
    pub top: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalAarArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Center-distance bound in meters.
    #[arg(long, default_value_t = 2.0)]
    pub tau_dis: f64,
    /// IoU thresholds as start:end:step.
    #[arg(long, default_value = "0.1:0.9:0.1")]
    pub tau_iou_sweep: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalApArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.7")]
    pub iou: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CropViewsArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub rig: RigArgs,
    /// SOURCE:PLACEMENT:RATE, e.g. 0:centered-on-focal:2.0; repeatable.
    #[arg(long = "rule")]
    pub rules: Vec<String>,
    /// Shorthand for centered crops of the front and back cameras.
    #[arg(long)]
    pub front_rear: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DenoiseDemoArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub groups: usize,
    #[arg(long, default_value_t = 8)]
    pub n_boxes: usize,
    /// Matching-part length assumed in front of the noisy queries.
    #[arg(long, default_value_t = 0)]
    pub match_len: usize,
    #[command(flatten)]
    pub rig: RigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON; defaults for every missing field.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub n_scenes: Option<usize>,
    #[arg(long)]
    pub noise: Option<NoiseLevel>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    emit(out, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn parse_rule(text: &str) -> Result<CropRule> {
    let parts: Vec<&str> = text.split(':').collect();
    if parts.len() != 3 {
        bail!("crop rule must look like SOURCE:PLACEMENT:RATE, got {text:?}");
    }
    let source: usize = parts[0]
        .parse()
        .with_context(|| format!("bad source view in {text:?}"))?;
    let placement: Placement =
        serde_json::from_value(serde_json::Value::String(parts[1].into())).with_context(|| {
            format!(
                "unknown placement {:?}; use centered-on-focal, left-aligned-horizon or right-aligned-horizon",
                parts[1]
            )
        })?;
    let rate: f64 = parts[2]
        .parse()
        .with_context(|| format!("bad scale rate in {text:?}"))?;
    Ok(CropRule::new(source, placement, rate))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn simulate(a: &SimulateArgs) -> Result<()> {
    let rig = load_rig(a.rig.rig.as_deref(), &[])?;
    let cfg = SceneConfig {
        n_boxes: a.n_boxes,
        ..SceneConfig::default()
    };
    let noise = a.noise.noise();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(a.jobs).build()?;
    let scenes: Vec<(Scene, FrameDet)> = pool.install(|| {
        (0..a.n_scenes)
            .into_par_iter()
            .map(|i| -> Result<(Scene, FrameDet)> {
                let i = i as u64;
                let scene = sample_scene(derive_seed(a.seed, 1, i), i, &cfg, &rig)?;
                let det = perturb(&scene, &noise, derive_seed(a.seed, 3, i))?;
                Ok((scene, det))
            })
            .collect::<Result<_>>()
    })?;
    fs::create_dir_all(a.out.join("scenes"))?;
    for (i, (s, _)) in scenes.iter().enumerate() {
        fs::write(a.out.join(format!("scenes/scene_{i:04}.json")), s.to_json()? + "\n")?;
    }
    let gts: Vec<FrameGt> = scenes.iter().map(|(s, _)| s.gt.clone()).collect();
    let dets: Vec<FrameDet> = scenes.into_iter().map(|(_, d)| d).collect();
    fs::write(a.out.join("gt.json"), ground_truth_to_json(&rig, &gts)? + "\n")?;
    fs::write(a.out.join("pred.json"), detections_to_json(&dets)? + "\n")?;
    log::info!("wrote {} scenes to {}", gts.len(), a.out.display());
    Ok(())
}

pub fn allocate_cmd(a: &AllocateArgs) -> Result<()> {
    let rig = load_rig(a.rig.rig.as_deref(), &[])?;
    let limits = AllocationLimits {
        max_truncated_per_camera: a.max_truncated,
        ..AllocationLimits::default()
    };
    let anchors = sample_query_anchors(a.seed, a.n_queries, &AnchorSampling::default())?;
    let alloc = allocate(&clamp_anchors(&anchors, &limits), &rig, &limits)?;
    emit_json(a.out.as_deref(), &AllocationSummary::new(&alloc, a.columns))
}

pub fn forward_cmd(a: &ForwardArgs) -> Result<()> {
    let rig = load_rig(a.rig.rig.as_deref(), &[])?;
    let scene = match &a.scene {
        Some(p) => Scene::from_json(&read(p)?)?,
        None => sample_scene(derive_seed(a.seed, 1, 0), 0, &SceneConfig::default(), &rig)?,
    };
    let preset = Preset::from_name(&a.preset)?;
    let hidden = a.channels;
    let cfg = DecoderConfig {
        n_queries: a.n_queries,
        channels: a.channels,
        hidden,
        top_k_temporal: a.n_queries.min(DecoderConfig::default().top_k_temporal),
        seed: a.seed,
        ..DecoderConfig::default()
    }
    .with_preset(preset);
    let decoder = HybridDecoder::new(cfg)?;
    let features = render_features(&scene, &rig, &FeatureSpec::default())?;
    let anchors = sample_query_anchors(derive_seed(a.seed, 2, 0), a.n_queries, &AnchorSampling::default())?;
    let out = decoder.forward(&rig, &features, &decoder.initial_queries(anchors), None, None)?;
    let summary = HeadSummary::new(&out, a.top);
    if summary.outputs_2d == 0 {
        log::info!("preset {} has no 2D sub-layers: no 2D outputs", a.preset);
    }
    emit_json(a.out.as_deref(), &summary)
}

fn load_eval(gt: &Path, pred: &Path) -> Result<(mvdet_core::geometry::Rig, Vec<(FrameGt, FrameDet)>)> {
    let (rig, gts) = ground_truth_from_json(&read(gt)?)?;
    let dets = detections_from_json(&read(pred)?)?;
    if gts.len() != dets.len() {
        bail!("{} ground-truth frames but {} detection frames", gts.len(), dets.len());
    }
    Ok((rig, gts.into_iter().zip(dets).collect()))
}

pub fn eval_aar(a: &EvalAarArgs) -> Result<()> {
    let (rig, frames) = load_eval(&a.gt, &a.pred)?;
    let s = parse_sweep(&a.tau_iou_sweep)?;
    let curve = aar_curve(&frames, &rig, a.tau_dis, &tau_sweep(s[0], s[1], s[2])?)?;
    let rows: Vec<Vec<String>> = metrics_rows(&curve, &[]).into_iter().map(|r| r.to_vec()).collect();
    emit(a.out.as_deref(), &csv_text(&METRICS_HEADER, &rows)?)
}

pub fn eval_ap(a: &EvalApArgs) -> Result<()> {
    let (_, frames) = load_eval(&a.gt, &a.pred)?;
    let ap_frames: Vec<_> = frames
        .iter()
        .map(|(g, d)| (g.views.clone(), d.boxes2d.clone()))
        .collect();
    let ap = ap_2d(&ap_frames, &a.iou);
    let rows: Vec<Vec<String>> = metrics_rows(&[], &ap).into_iter().map(|r| r.to_vec()).collect();
    emit(a.out.as_deref(), &csv_text(&METRICS_HEADER, &rows)?)
}

pub fn crop_views(a: &CropViewsArgs) -> Result<()> {
    let mut rules: Vec<CropRule> = a.rules.iter().map(|r| parse_rule(r)).collect::<Result<_>>()?;
    if let Some(rate) = a.front_rear {
        rules.extend(front_rear_rules(rate));
    }
    let mut file = match &a.rig.rig {
        Some(p) => RigFile::from_json(&read(p)?)?,
        None => RigFile {
            views: mvdet_core::geometry::Rig::surround_six().views().to_vec(),
            derived_views: Vec::new(),
        },
    };
    file.derived_views.extend(rules);
    let extended = file.rig()?;
    log::info!(
        "{} views after adding {} derived views",
        extended.len(),
        file.derived_views.len()
    );
    #[derive(Serialize)]
    struct Out<'a> {
        rig_file: &'a RigFile,
        resolved: &'a mvdet_core::geometry::Rig,
    }
    emit_json(
        a.out.as_deref(),
        &Out {
            rig_file: &file,
            resolved: &extended,
        },
    )
}

#[derive(Serialize)]
struct DenoiseReport {
    n_gt: usize,
    groups: Vec<DenoiseGroupReport>,
    match_len: usize,
    total_len: usize,
    skipped_gt: Vec<usize>,
    /// Allowed entries of the attention mask per query part.
    allowed_pairs: BTreeMap<String, usize>,
    noisy_anchors: Vec<Anchor3D>,
}

#[derive(Serialize)]
struct DenoiseGroupReport {
    positive: bool,
    start: usize,
    len: usize,
    per_camera: BTreeMap<usize, usize>,
}

pub fn denoise_demo(a: &DenoiseDemoArgs) -> Result<()> {
    let rig = load_rig(a.rig.rig.as_deref(), &[])?;
    let scene = sample_scene(
        derive_seed(a.seed, 1, 0),
        0,
        &SceneConfig {
            n_boxes: a.n_boxes,
            ..SceneConfig::default()
        },
        &rig,
    )?;
    let nc = NoiseConfig {
        n_groups: a.groups,
        ..NoiseConfig::default()
    };
    let gt: Vec<_> = scene.gt.boxes.iter().map(|b| b.anchor).collect();
    let noisy = make_noisy_anchors(&gt, &nc, derive_seed(a.seed, 4, 0))?;
    let alloc = allocate_noise(&scene.gt.associations(), &noisy, &rig, a.match_len)?;
    // matching part spread over cameras round-robin for the illustration
    let mut cams: Vec<usize> = (0..a.match_len)
        .map(|i| rig.views()[i * rig.len() / a.match_len.max(1)].view_id)
        .collect();
    cams.extend(alloc.mapping.camera_of_col().iter().copied());
    let mask = denoise_mask(&alloc.layout, &GroupMask::from_cameras(&cams))?;
    let mut allowed_pairs = BTreeMap::new();
    for i in 0..mask.size() {
        let part = alloc.layout.part_of(i);
        let key = if part == 0 {
            "match".to_string()
        } else {
            format!("group_{}", part - 1)
        };
        *allowed_pairs.entry(key).or_insert(0) += (0..mask.size()).filter(|&j| mask.allowed(i, j)).count();
    }
    let groups = alloc
        .layout
        .groups
        .iter()
        .zip(&alloc.positive)
        .map(|(g, &positive)| DenoiseGroupReport {
            positive,
            start: g.span.start,
            len: g.span.len,
            per_camera: g.cameras.iter().map(|(v, s)| (*v, s.len)).collect(),
        })
        .collect();
    emit_json(
        a.out.as_deref(),
        &DenoiseReport {
            n_gt: gt.len(),
            groups,
            match_len: a.match_len,
            total_len: alloc.layout.total_len(),
            skipped_gt: alloc.skipped_gt.clone(),
            allowed_pairs,
            noisy_anchors: noisy.flat_anchors(),
        },
    )
}

pub fn run_cmd(a: &RunArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_json_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(p) = &a.preset {
        cfg.preset = p.clone();
    }
    if let Some(n) = a.n_scenes {
        cfg.n_scenes = n;
    }
    if let Some(n) = a.noise {
        cfg.noise = n.noise();
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(o) = &a.out {
        cfg.output_dir = o.clone();
    }
    let report = run_pipeline(&cfg)?;
    for n in &report.notes {
        println!("note: {n}");
    }
    if let Some(m) = report.mean_columns {
        println!("mean 2D columns per scene: {m:.1}");
    }
    if let Some(r) = report.aar_curve.iter().find(|r| (r.tau_iou - 0.5).abs() < 1e-9) {
        println!("AAR@0.5 {:.2}%  Recall@0.5 {:.2}%", r.aar, r.recall);
    }
    println!("artifacts in {}", cfg.output_dir.display());
    Ok(())
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Allocate(a) => allocate_cmd(a),
        Command::Forward(a) => forward_cmd(a),
        Command::EvalAar(a) => eval_aar(a),
        Command::EvalAp(a) => eval_ap(a),
        Command::CropViews(a) => crop_views(a),
        Command::DenoiseDemo(a) => denoise_demo(a),
        Command::Run(a) => run_cmd(a),
    }
}
