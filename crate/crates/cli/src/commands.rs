//! The `synth`, `label`, `train` and `eval` commands.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use image::{ImageBuffer, Luma};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use travkit_core::backend::wire::WireClient;
use travkit_core::backend::{
    BackendError, OracleBackend, SegmentationBackend, SegmentationRequest, SegmentationResult,
};
use travkit_core::dataset::{cloud_points, read_regions, write_labels, write_scene, Dataset};
use travkit_core::footprint::FootprintMask;
use travkit_core::fusion::IGNORE;
use travkit_core::grid::Grid;
use travkit_core::label::{label_frame, FrameCounts, FrameOutcome, Provenance, SkipReason};
use travkit_core::synth::generate_scene;
use travkit_net::data::{load_sample, Sample};
use travkit_net::train::{
    evaluate_samples, load_checkpoint, predict, save_checkpoint, split, train, Against, EvalReport,
};

use crate::config::PipelineConfig;

/// How a command finished when it did not fail outright.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Complete,
    /// Some frames were skipped.
    Partial,
}

pub const SUMMARY_FILE: &str = "summary.json";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_gray(path: &Path, g: &Grid<u8>) -> Result<()> {
    let img: ImageBuffer<Luma<u8>, _> =
        ImageBuffer::from_raw(g.width() as u32, g.height() as u32, g.as_slice().to_vec()).expect("buffer size matches");
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

fn thread_pool(jobs: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

// ---------------------------------------------------------------- synth

pub struct SynthArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    /// More than one writes `scene_000`, `scene_001`, ... with consecutive seeds.
    pub scenes: usize,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<Vec<PathBuf>> {
    let mut cfg = PipelineConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.synth.seed = s;
    }
    if args.scenes == 0 {
        bail!("--scenes must be positive");
    }
    cfg.echo_into(&args.out)?;
    let roots: Vec<PathBuf> = if args.scenes == 1 {
        vec![args.out.clone()]
    } else {
        (0..args.scenes).map(|i| args.out.join(format!("scene_{i:03}"))).collect()
    };
    roots
        .par_iter()
        .enumerate()
        .map(|(i, root)| {
            let mut c = cfg.clone();
            c.synth.seed = cfg.synth.seed + i as u64;
            let scene = generate_scene(&c.synth).with_context(|| format!("scene seed {}", c.synth.seed))?;
            write_scene(root, &scene)?;
            c.echo_into(root)?;
            info!("wrote {} frames to {}", scene.frames.len(), root.display());
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    Ok(roots)
}

// ---------------------------------------------------------------- label

/// Stands in for a backend that could not be reached, so every frame is
/// skipped with the connection error as its reason.
struct Unreachable(String);

impl SegmentationBackend for Unreachable {
    fn segment(&self, _: &SegmentationRequest) -> Result<SegmentationResult, BackendError> {
        Err(BackendError::Unavailable(self.0.clone()))
    }
}

pub struct LabelArgs {
    pub dataset: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    /// `oracle`, or an endpoint for the wire protocol.
    pub backend: String,
    pub force: bool,
    pub jobs: Option<usize>,
    pub timeout: Duration,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub dataset: PathBuf,
    pub frames: usize,
    pub labeled: usize,
    /// Frames whose label already existed.
    pub reused: usize,
    /// Skip counts by reason kind.
    pub skipped: BTreeMap<String, usize>,
    pub skipped_frames: Vec<String>,
}

enum FrameResult {
    Labeled,
    Reused,
    Skipped(SkipReason),
}

fn skip_kind(r: &SkipReason) -> &'static str {
    match r {
        SkipReason::NoTrajectoryCoverage(_) => "NoTrajectoryCoverage",
        SkipReason::EmptyPrompts => "EmptyPrompts",
        SkipReason::BackendUnavailable(_) => "BackendUnavailable",
        SkipReason::BackendProtocol(_) => "BackendProtocol",
        SkipReason::InvalidConfig(_) => "InvalidConfig",
        SkipReason::InvalidInput(_) => "InvalidInput",
    }
}

/// Footprint layer: 255 visible, 128 occluded.
fn footprint_image(fp: &FootprintMask) -> Grid<u8> {
    Grid::from_fn(fp.mask.width(), fp.mask.height(), |u, v| {
        if *fp.mask.get(u, v) {
            255
        } else if *fp.occluded.get(u, v) {
            128
        } else {
            0
        }
    })
}

fn backend_for(args: &LabelArgs, ds: &Dataset) -> Result<Box<dyn SegmentationBackend>> {
    if args.backend == "oracle" {
        let mut oracle = OracleBackend::new();
        for id in &ds.frames {
            let p = ds.regions_path(id);
            if p.is_file() {
                oracle.insert(id.clone(), read_regions(&p)?);
            } else {
                warn!("{id}: no region map at {}; the oracle will reject it", p.display());
            }
        }
        return Ok(Box::new(oracle));
    }
    match WireClient::from_endpoint(&args.backend, args.timeout) {
        Ok(c) => Ok(Box::new(c)),
        Err(e) => {
            warn!("backend {}: {e}", args.backend);
            Ok(Box::new(Unreachable(e.to_string())))
        }
    }
}

fn label_one(
    ds: &Dataset,
    id: &str,
    args: &LabelArgs,
    cfg: &PipelineConfig,
    backend: &dyn SegmentationBackend,
) -> Result<FrameResult> {
    let label_path = args.out.join("labels").join(format!("{id}.png"));
    if label_path.is_file() && !args.force {
        return Ok(FrameResult::Reused);
    }
    let outcome = match ds.cloud(id).and_then(|c| Ok((c, ds.image_time(id)?))) {
        Ok((cloud, t)) => {
            let image_ref =
                if args.backend == "oracle" { id.to_string() } else { ds.image_path(id).display().to_string() };
            Some(label_frame(
                id,
                &image_ref,
                t,
                &cloud_points(&cloud),
                &ds.trajectory,
                &ds.calibration,
                &cfg.label_params(),
                backend,
            ))
        }
        Err(e) => {
            warn!("{id}: {e}");
            None
        }
    };
    let provenance = match &outcome {
        Some(o) => o.provenance.clone(),
        None => Provenance {
            frame_id: id.to_string(),
            skipped: Some(SkipReason::InvalidInput(format!("{id}: unreadable cloud or pose"))),
            prompts: Vec::new(),
            queries: Vec::new(),
            accepted: Vec::new(),
            counts: FrameCounts::default(),
        },
    };
    write_json(&args.out.join("provenance").join(format!("{id}.json")), &provenance)?;
    if let Some(FrameOutcome { artifacts, .. }) = &outcome {
        write_gray(&args.out.join("footprint").join(format!("{id}.png")), &footprint_image(&artifacts.footprint))?;
        let seeds = artifacts.seeds.labels.map(|&s| s as u8);
        write_gray(&args.out.join("seeds").join(format!("{id}.png")), &seeds)?;
        if let Some(labels) = &artifacts.labels {
            write_labels(&label_path, labels)?;
        }
    }
    Ok(match provenance.skipped {
        Some(r) => {
            // a stale label from an earlier run would otherwise look current
            if label_path.is_file() {
                fs::remove_file(&label_path)?;
            }
            FrameResult::Skipped(r)
        }
        None => FrameResult::Labeled,
    })
}

pub fn cmd_label(args: &LabelArgs) -> Result<(Status, LabelSummary)> {
    let cfg = PipelineConfig::load_or_default(args.config.as_deref())?;
    let ds = Dataset::open(&args.dataset).with_context(|| format!("opening dataset {}", args.dataset.display()))?;
    for sub in ["labels", "provenance", "footprint", "seeds"] {
        fs::create_dir_all(args.out.join(sub))?;
    }
    cfg.echo_into(&args.out)?;
    let backend = backend_for(args, &ds)?;
    let pool = thread_pool(args.jobs)?;
    let results: Vec<Result<FrameResult>> =
        pool.install(|| ds.frames.par_iter().map(|id| label_one(&ds, id, args, &cfg, backend.as_ref())).collect());
    let mut summary =
        LabelSummary { dataset: args.dataset.clone(), frames: ds.frames.len(), ..LabelSummary::default() };
    for (id, r) in ds.frames.iter().zip(results) {
        match r.with_context(|| format!("frame {id}"))? {
            FrameResult::Labeled => summary.labeled += 1,
            FrameResult::Reused => summary.reused += 1,
            FrameResult::Skipped(reason) => {
                info!("{id} skipped: {reason}");
                *summary.skipped.entry(skip_kind(&reason).to_string()).or_default() += 1;
                summary.skipped_frames.push(id.clone());
            }
        }
    }
    write_json(&args.out.join(SUMMARY_FILE), &summary)?;
    let status = if summary.skipped_frames.is_empty() { Status::Complete } else { Status::Partial };
    Ok((status, summary))
}

// ---------------------------------------------------------------- train / eval

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

/// Where a dataset's labels come from: an explicit directory, else
/// `labels/`, else `gt/`.
fn labels_dir(root: &Path, explicit: Option<&PathBuf>) -> Result<PathBuf> {
    if let Some(d) = explicit {
        // a label run's output directory holds its labels under labels/
        let nested = d.join("labels");
        return Ok(if nested.is_dir() { nested } else { d.clone() });
    }
    for sub in ["labels", "gt"] {
        let d = root.join(sub);
        if d.is_dir() {
            return Ok(d);
        }
    }
    bail!("{}: no labels/ or gt/ directory and no --labels given", root.display())
}

/// Loads every frame of every dataset; fails listing the first missing
/// label files.
fn load_samples(
    datasets: &[PathBuf],
    labels: &[PathBuf],
    against: Against,
    cfg: &PipelineConfig,
) -> Result<Vec<Sample>> {
    if !labels.is_empty() && labels.len() != datasets.len() {
        bail!("give one --labels per dataset ({} datasets, {} label dirs)", datasets.len(), labels.len());
    }
    let mut all = Vec::new();
    for (i, root) in datasets.iter().enumerate() {
        let ds = Dataset::open(root).with_context(|| format!("opening dataset {}", root.display()))?;
        let dir = match against {
            Against::Labels => labels_dir(root, labels.get(i))?,
            Against::Gt => root.join("gt"),
        };
        let missing: Vec<&String> = ds.frames.iter().filter(|id| !dir.join(format!("{id}.png")).is_file()).collect();
        if !missing.is_empty() {
            let first: Vec<&str> = missing.iter().take(5).map(|s| s.as_str()).collect();
            bail!("{}: {} frames have no label file, first: {}", dir.display(), missing.len(), first.join(", "));
        }
        let mut samples = ds
            .frames
            .par_iter()
            .map(|id| load_sample(&ds, id, &dir, &cfg.net, &cfg.prior).map_err(anyhow::Error::from))
            .collect::<Result<Vec<Sample>>>()?;
        if datasets.len() > 1 {
            for s in &mut samples {
                s.id = format!("{i}/{}", s.id);
            }
        }
        all.extend(samples);
    }
    if all.is_empty() {
        bail!("no frames to load");
    }
    Ok(all)
}

pub struct TrainArgs {
    pub datasets: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<EvalReport> {
    let mut cfg = PipelineConfig::load_or_default(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    let samples = load_samples(&args.datasets, &args.labels, Against::Labels, &cfg)?;
    cfg.echo_into(&args.out)?;
    let (tr, va) = split(samples.len(), cfg.train.val_fraction, cfg.train.seed);
    let train_set: Vec<Sample> = tr.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<Sample> = va.iter().map(|&i| samples[i].clone()).collect();
    info!("training on {} frames, validating on {}", train_set.len(), val_set.len());
    let log_path = args.out.join(TRAIN_LOG_FILE);
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    let outcome = train(&cfg.net, &cfg.train, &train_set, &val_set, |e| {
        let line = serde_json::to_string(e).expect("log entry serializes");
        info!("{line}");
        if let Err(err) = writeln!(log, "{line}") {
            log_err.get_or_insert(err);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e).context(format!("writing {}", log_path.display()));
    }
    save_checkpoint(&args.out.join(CHECKPOINT_FILE), &outcome.net, &cfg.to_json())?;
    let eval_set = if val_set.is_empty() { &train_set } else { &val_set };
    Ok(evaluate_samples(&outcome.net, eval_set, Against::Labels, cfg.train.ablation.streams())?)
}

pub struct EvalArgs {
    pub datasets: Vec<PathBuf>,
    pub labels: Vec<PathBuf>,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    /// Overrides the config stored in the checkpoint.
    pub config: Option<PathBuf>,
    pub against: Against,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub against: Against,
    /// Active ablation flags.
    pub ablation: Vec<String>,
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalOutput> {
    let (net, echo) = load_checkpoint(&args.checkpoint)?;
    let mut cfg = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => serde_json::from_value(echo).context("config stored in the checkpoint")?,
    };
    // the architecture always comes from the checkpoint
    cfg.net = net.config.clone();
    let samples = load_samples(&args.datasets, &args.labels, args.against, &cfg)?;
    cfg.echo_into(&args.out)?;
    let streams = cfg.train.ablation.streams();
    let report = evaluate_samples(&net, &samples, args.against, streams)?;
    let pred_dir = args.out.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    let full_sizes = args
        .datasets
        .iter()
        .map(|r| Dataset::open(r).map(|d| (d.calibration.intrinsics.width, d.calibration.intrinsics.height)))
        .collect::<Result<Vec<_>, _>>()?;
    samples
        .par_iter()
        .map(|s| {
            let pred = predict(&net, s, streams)?;
            let (di, id) = match s.id.split_once('/') {
                Some((i, id)) => (i.parse::<usize>()?, id.to_string()),
                None => (0, s.id.clone()),
            };
            let (w, h) = full_sizes[di];
            let f = cfg.net.input_downsample;
            // back to image resolution; pixels cropped away are ignore
            let full = Grid::from_fn(w, h, |u, v| {
                let (pu, pv) = (u / f, v / f);
                if pu < s.width() && pv < s.height() {
                    pred[pv * s.width() + pu] as u8
                } else {
                    IGNORE
                }
            });
            let dir = if args.datasets.len() > 1 { pred_dir.join(di.to_string()) } else { pred_dir.clone() };
            fs::create_dir_all(&dir)?;
            write_labels(&dir.join(format!("{id}.png")), &full)?;
            Ok(())
        })
        .collect::<Result<Vec<()>>>()?;
    let out = EvalOutput {
        against: args.against,
        ablation: cfg.train.ablation.active().into_iter().map(String::from).collect(),
        checkpoint: args.checkpoint.clone(),
        report,
    };
    write_json(&args.out.join(METRICS_FILE), &out)?;
    Ok(out)
}
