//! Per-frame labeling: footprint, geometric seeds, prompts, mask retrieval,
//! fusion and cleanup.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::backend::{one_query_per_prompt, BackendError, SegmentationBackend, SegmentationResult};
use crate::footprint::{footprint_quads, render_footprint_mask, FootprintMask, FootprintParams};
use crate::fusion::{
    apply_footprint, cleanup, fuse_labels, select_masks, FusionParams, LabelImage, IGNORE, NON_TRAVERSABLE, TRAVERSABLE,
};
use crate::geometry::{
    build_depth_image, densify_depth, interpolate_pose, CameraIntrinsics, Extrinsics, Pose, Trajectory,
};
use crate::grid::Mask;
use crate::prior::{
    classify_seeds, compute_point_features, project_seeds, PointFeatures, PriorError, PriorParams, SeedImage,
    SeedLabel, SeedPixel,
};
use crate::prompt::{build_prompts, Polarity, Prompt, PromptError, PromptParams, PromptSet};

/// Switches that remove one labeling component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAblation {
    pub disable_footprint: bool,
    pub disable_geom_prior: bool,
    pub disable_prompt_refinement: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelParams {
    pub footprint: FootprintParams,
    pub prior: PriorParams,
    pub prompt: PromptParams,
    pub fusion: FusionParams,
    pub ablation: LabelAblation,
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "detail")]
pub enum SkipReason {
    NoTrajectoryCoverage(String),
    EmptyPrompts,
    BackendUnavailable(String),
    BackendProtocol(String),
    InvalidConfig(String),
    /// The frame's files could not be read.
    InvalidInput(String),
}

impl std::fmt::Display for SkipReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SkipReason::NoTrajectoryCoverage(d) => write!(f, "no trajectory coverage: {d}"),
            SkipReason::EmptyPrompts => write!(f, "no positive prompts"),
            SkipReason::BackendUnavailable(d) => write!(f, "backend unavailable: {d}"),
            SkipReason::BackendProtocol(d) => write!(f, "backend protocol error: {d}"),
            SkipReason::InvalidConfig(d) => write!(f, "invalid configuration: {d}"),
            SkipReason::InvalidInput(d) => write!(f, "unreadable input: {d}"),
        }
    }
}

impl From<BackendError> for SkipReason {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Unavailable(m) => SkipReason::BackendUnavailable(m),
            BackendError::Protocol(m) => SkipReason::BackendProtocol(m),
            BackendError::EmptyPrompts => SkipReason::EmptyPrompts,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub prompt_index: usize,
    pub request_id: String,
    pub n_masks: usize,
    pub scores: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcceptedRecord {
    pub prompt_index: usize,
    pub mask_index: usize,
    pub polarity: Polarity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub footprint_px: usize,
    pub occluded_px: usize,
    pub pos_seed_px: usize,
    pub neg_seed_px: usize,
    pub traversable_px: usize,
    pub non_traversable_px: usize,
    pub ignore_px: usize,
}

/// What happened to one frame; written next to its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub frame_id: String,
    pub skipped: Option<SkipReason>,
    pub prompts: Vec<Prompt>,
    pub queries: Vec<QueryRecord>,
    pub accepted: Vec<AcceptedRecord>,
    pub counts: FrameCounts,
}

/// Intermediate layers of one frame, kept for visualization.
#[derive(Clone, Debug)]
pub struct FrameArtifacts {
    pub footprint: FootprintMask,
    pub seeds: SeedImage,
    pub prompts: Option<PromptSet>,
    pub labels: Option<LabelImage>,
}

#[derive(Clone, Debug)]
pub struct FrameOutcome {
    pub artifacts: FrameArtifacts,
    pub provenance: Provenance,
}

impl FrameOutcome {
    pub fn labels(&self) -> Option<&LabelImage> {
        self.artifacts.labels.as_ref()
    }
}

/// Base pose at the image time plus the derived camera pose.
pub fn frame_poses(traj: &Trajectory, t: f64, ext: &Extrinsics) -> Result<(Pose, Pose), SkipReason> {
    let base = interpolate_pose(traj, t).map_err(|e| SkipReason::NoTrajectoryCoverage(e.to_string()))?;
    let cam = Pose::from_isometry(t, &(base.isometry() * ext.base_from_cam));
    Ok((base, cam))
}

/// Local geometry of each point, fitted in the world frame so that slope
/// is measured against gravity rather than the sensor axis.
pub fn world_point_features(
    cloud: &[Point3<f64>],
    base_pose: &Pose,
    calib: &Calibration,
    prior: &PriorParams,
) -> Vec<PointFeatures> {
    let world_from_lidar = base_pose.isometry() * calib.extrinsics.base_from_lidar();
    let world: Vec<Point3<f64>> = cloud.iter().map(|p| world_from_lidar * p).collect();
    compute_point_features(&world, prior.radius, prior.min_neighbors)
}

/// Seed labels and seed image for one sweep (`cloud` in the LiDAR frame).
pub fn geometric_seeds(
    cloud: &[Point3<f64>],
    base_pose: &Pose,
    calib: &Calibration,
    prior: &PriorParams,
) -> Result<(Vec<SeedLabel>, SeedImage), PriorError> {
    let features = world_point_features(cloud, base_pose, calib, prior);
    let labels = classify_seeds(&features, &prior.thresholds())?;
    let image = project_seeds(cloud, &labels, &calib.extrinsics, &calib.intrinsics)?;
    Ok((labels, image))
}

fn counts(footprint: &FootprintMask, seeds: &SeedImage, labels: Option<&LabelImage>) -> FrameCounts {
    let count = |v: u8| labels.map_or(0, |l| l.as_slice().iter().filter(|&&x| x == v).count());
    FrameCounts {
        footprint_px: footprint.mask.count(),
        occluded_px: footprint.occluded.count(),
        pos_seed_px: seeds.count(SeedPixel::Pos),
        neg_seed_px: seeds.count(SeedPixel::Neg),
        traversable_px: count(TRAVERSABLE),
        non_traversable_px: count(NON_TRAVERSABLE),
        ignore_px: count(IGNORE),
    }
}

fn query_all(
    backend: &dyn SegmentationBackend,
    requests: Vec<(usize, crate::backend::SegmentationRequest)>,
    size: (usize, usize),
    log: &mut Vec<QueryRecord>,
) -> Result<Vec<(usize, SegmentationResult)>, BackendError> {
    let mut out = Vec::with_capacity(requests.len());
    for (index, req) in requests {
        let result = backend.segment(&req)?;
        result.validate(size)?;
        log.push(QueryRecord {
            prompt_index: index,
            request_id: req.request_id.clone(),
            n_masks: result.masks.len(),
            scores: result.scores.clone(),
        });
        out.push((index, result));
    }
    Ok(out)
}

/// Labels one frame. `image_time` selects the pose; `image_ref` is what the
/// backend uses to find the image. Skips are reported in the provenance,
/// never as errors.
#[allow(clippy::too_many_arguments)]
pub fn label_frame(
    frame_id: &str,
    image_ref: &str,
    image_time: f64,
    cloud: &[Point3<f64>],
    traj: &Trajectory,
    calib: &Calibration,
    params: &LabelParams,
    backend: &dyn SegmentationBackend,
) -> FrameOutcome {
    let k = &calib.intrinsics;
    let size = (k.width, k.height);
    let mut outcome = FrameOutcome {
        artifacts: FrameArtifacts {
            footprint: FootprintMask::empty(k.width, k.height),
            seeds: SeedImage::empty(k.width, k.height),
            prompts: None,
            labels: None,
        },
        provenance: Provenance {
            frame_id: frame_id.to_string(),
            skipped: None,
            prompts: Vec::new(),
            queries: Vec::new(),
            accepted: Vec::new(),
            counts: FrameCounts::default(),
        },
    };
    let skip = |mut o: FrameOutcome, reason: SkipReason| {
        o.provenance.counts = counts(&o.artifacts.footprint, &o.artifacts.seeds, None);
        o.provenance.skipped = Some(reason);
        o
    };

    let (base_pose, cam_pose) = match frame_poses(traj, image_time, &calib.extrinsics) {
        Ok(p) => p,
        Err(r) => return skip(outcome, r),
    };

    if !params.ablation.disable_footprint {
        let fp = &params.footprint;
        let quads = match footprint_quads(traj, &fp.robot, &cam_pose, fp.horizon, fp.stride, fp.window) {
            Ok(q) => q,
            Err(e) => return skip(outcome, SkipReason::NoTrajectoryCoverage(e.to_string())),
        };
        let depth = densify_depth(&build_depth_image(cloud, &calib.extrinsics, k), fp.occlusion_fill_px);
        outcome.artifacts.footprint = render_footprint_mask(&quads, k, &depth, fp.occl_margin);
    }

    if !params.ablation.disable_geom_prior {
        match geometric_seeds(cloud, &base_pose, calib, &params.prior) {
            Ok((_, img)) => outcome.artifacts.seeds = img,
            Err(e) => return skip(outcome, SkipReason::InvalidConfig(e.to_string())),
        }
    }

    let prompts = match build_prompts(
        &outcome.artifacts.footprint,
        &outcome.artifacts.seeds,
        &params.prompt,
        frame_id,
        !params.ablation.disable_prompt_refinement,
    ) {
        Ok(p) => p,
        Err(PromptError::EmptyPrompts) => return skip(outcome, SkipReason::EmptyPrompts),
    };
    outcome.provenance.prompts = prompts.prompts.clone();

    let mut log = Vec::new();
    let mut results =
        match query_all(backend, one_query_per_prompt(&prompts, image_ref, size, Polarity::Positive), size, &mut log) {
            Ok(r) => r,
            Err(e) => {
                outcome.provenance.queries = log;
                outcome.artifacts.prompts = Some(prompts);
                return skip(outcome, e.into());
            }
        };
    if params.fusion.negative_queries {
        match query_all(backend, one_query_per_prompt(&prompts, image_ref, size, Polarity::Negative), size, &mut log) {
            Ok(r) => results.extend(r),
            Err(e) => {
                outcome.provenance.queries = log;
                outcome.artifacts.prompts = Some(prompts);
                return skip(outcome, e.into());
            }
        }
    }
    outcome.provenance.queries = log;

    let accepted = select_masks(&results, &prompts, &params.fusion);
    let mut positive: Vec<&Mask> = Vec::new();
    let mut negative: Vec<&Mask> = Vec::new();
    for a in &accepted {
        let polarity = prompts.prompts[a.prompt_index].polarity;
        match polarity {
            Polarity::Positive => positive.push(&a.mask),
            Polarity::Negative => negative.push(&a.mask),
        }
        outcome.provenance.accepted.push(AcceptedRecord {
            prompt_index: a.prompt_index,
            mask_index: a.mask_index,
            polarity,
        });
    }

    let fused =
        fuse_labels(&positive, &negative, &outcome.artifacts.footprint, &outcome.artifacts.seeds, params.fusion.r_neg);
    let mut labels = cleanup(&fused, params.fusion.min_component);
    // cleanup may drop small footprint islands; driven-over pixels stay 1
    apply_footprint(&mut labels, &outcome.artifacts.footprint);

    outcome.provenance.counts = counts(&outcome.artifacts.footprint, &outcome.artifacts.seeds, Some(&labels));
    outcome.artifacts.prompts = Some(prompts);
    outcome.artifacts.labels = Some(labels);
    outcome
}
