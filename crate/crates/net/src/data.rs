//! Training samples at network resolution.

use std::path::Path;

use nalgebra::Point3;

use travkit_core::dataset::{read_labels, Dataset, DatasetError};
use travkit_core::fusion::LabelImage;
use travkit_core::geometry::{CameraIntrinsics, Pose};
use travkit_core::grid::Grid;
use travkit_core::label::{frame_poses, world_point_features, Calibration};
use travkit_core::prior::{classify_seeds, project_seeds, PriorParams, SeedPixel};

use crate::geo::build_geometric_input;
use crate::graph::Tensor;
use crate::model::NetConfig;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("frame {id}: {msg}")]
    Frame { id: String, msg: String },
}

/// One frame, downsampled and cropped to a size the network accepts.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub rgb: Tensor,
    pub geo: Tensor,
    pub labels: LabelImage,
    pub seeds: Grid<SeedPixel>,
    pub gt: Option<LabelImage>,
}

impl Sample {
    pub fn width(&self) -> usize {
        self.rgb.w
    }

    pub fn height(&self) -> usize {
        self.rgb.h
    }
}

/// Network input size for an image: downsampled by `factor`, then cropped
/// from the bottom-right to a multiple of `multiple`.
pub fn input_size(width: usize, height: usize, factor: usize, multiple: usize) -> (usize, usize) {
    let crop = |n: usize| (n / factor) / multiple * multiple;
    (crop(width), crop(height))
}

/// Intrinsics of the image downsampled by `factor` and cropped to `size`.
pub fn scaled_intrinsics(k: &CameraIntrinsics, factor: usize, size: (usize, usize)) -> CameraIntrinsics {
    let f = factor as f64;
    CameraIntrinsics { fx: k.fx / f, fy: k.fy / f, cx: k.cx / f, cy: k.cy / f, width: size.0, height: size.1 }
}

/// Box-filtered RGB in `[0, 1]`.
pub fn downsample_rgb(rgb: &Grid<[u8; 3]>, factor: usize, size: (usize, usize)) -> Tensor {
    let (w, h) = size;
    let mut t = Tensor::zeros(3, h, w);
    let norm = 1.0 / (255.0 * (factor * factor) as f64);
    for v in 0..h {
        for u in 0..w {
            let mut acc = [0u32; 3];
            for dv in 0..factor {
                for du in 0..factor {
                    let px = rgb.get(u * factor + du, v * factor + dv);
                    for c in 0..3 {
                        acc[c] += px[c] as u32;
                    }
                }
            }
            for c in 0..3 {
                t.data[(c * h + v) * w + u] = acc[c] as f64 * norm;
            }
        }
    }
    t
}

/// Label at the center of each block.
pub fn downsample_labels(labels: &LabelImage, factor: usize, size: (usize, usize)) -> LabelImage {
    Grid::from_fn(size.0, size.1, |u, v| *labels.get(u * factor + factor / 2, v * factor + factor / 2))
}

/// Inputs shared by the disk and in-memory paths.
pub struct FrameInputs<'a> {
    pub id: &'a str,
    pub rgb: &'a Grid<[u8; 3]>,
    pub cloud: &'a [Point3<f64>],
    pub base_pose: &'a Pose,
    pub calib: &'a Calibration,
    pub labels: &'a LabelImage,
    pub gt: Option<&'a LabelImage>,
}

pub fn make_sample(f: &FrameInputs, net: &NetConfig, prior: &PriorParams) -> Result<Sample, DataError> {
    let err = |msg: String| DataError::Frame { id: f.id.to_string(), msg };
    let k = &f.calib.intrinsics;
    if f.rgb.size() != (k.width, k.height) {
        return Err(err(format!("image is {:?}, calibration says {}×{}", f.rgb.size(), k.width, k.height)));
    }
    if f.labels.size() != f.rgb.size() || f.gt.is_some_and(|g| g.size() != f.rgb.size()) {
        return Err(err("label image size differs from the camera image".into()));
    }
    let factor = net.input_downsample;
    let size = input_size(k.width, k.height, factor, 1 << net.depth);
    if size.0 == 0 || size.1 == 0 {
        return Err(err(format!("image too small for downsampling {factor} and depth {}", net.depth)));
    }
    let ks = scaled_intrinsics(k, factor, size);
    let features = world_point_features(f.cloud, f.base_pose, f.calib, prior);
    let seed_labels = classify_seeds(&features, &prior.thresholds()).map_err(|e| err(e.to_string()))?;
    let seeds = project_seeds(f.cloud, &seed_labels, &f.calib.extrinsics, &ks).map_err(|e| err(e.to_string()))?;
    let geo = build_geometric_input(f.cloud, &features, &f.calib.extrinsics, &ks, &net.geo)
        .map_err(|e| err(e.to_string()))?;
    Ok(Sample {
        id: f.id.to_string(),
        rgb: downsample_rgb(f.rgb, factor, size),
        geo: geo.to_tensor(),
        labels: downsample_labels(f.labels, factor, size),
        seeds: seeds.labels,
        gt: f.gt.map(|g| downsample_labels(g, factor, size)),
    })
}

/// Loads and prepares one dataset frame with labels from `labels_dir`.
/// Ground truth is attached when `gt/<id>.png` exists.
pub fn load_sample(
    ds: &Dataset,
    id: &str,
    labels_dir: &Path,
    net: &NetConfig,
    prior: &PriorParams,
) -> Result<Sample, DataError> {
    let err = |msg: String| DataError::Frame { id: id.to_string(), msg };
    let rgb = ds.rgb(id)?;
    let cloud: Vec<Point3<f64>> = travkit_core::dataset::cloud_points(&ds.cloud(id)?);
    let (base_pose, _) =
        frame_poses(&ds.trajectory, ds.image_time(id)?, &ds.calibration.extrinsics).map_err(|e| err(e.to_string()))?;
    let labels = read_labels(&labels_dir.join(format!("{id}.png")))?;
    let gt_path = ds.gt_path(id);
    let gt = if gt_path.is_file() { Some(read_labels(&gt_path)?) } else { None };
    make_sample(
        &FrameInputs {
            id,
            rgb: &rgb,
            cloud: &cloud,
            base_pose: &base_pose,
            calib: &ds.calibration,
            labels: &labels,
            gt: gt.as_ref(),
        },
        net,
        prior,
    )
}
