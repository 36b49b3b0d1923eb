//! Projection of the robot's driven swath into camera images.

use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{
    interpolate_pose, project_point, rasterize_polygon, CameraIntrinsics, DepthImage, GeometryError, Pose, Trajectory,
};
use crate::grid::{Grid, Mask};

/// Clipping plane for quads that straddle the camera.
const NEAR_PLANE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobotFootprintSpec {
    /// Track width in meters.
    pub width: f64,
    /// Contact patch length per pose sample in meters.
    pub length: f64,
    /// Height of the ground contact below the base origin.
    pub ground_offset: f64,
}

impl Default for RobotFootprintSpec {
    fn default() -> Self {
        Self { width: 0.6, length: 0.2, ground_offset: 0.3 }
    }
}

impl RobotFootprintSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width > 0.0 && self.length > 0.0 && self.ground_offset.is_finite() {
            Ok(())
        } else {
            Err(GeometryError::InvalidPose(format!("bad footprint spec {self:?}")))
        }
    }
}

/// Which poses relative to the image time contribute to the footprint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FootprintWindow {
    #[default]
    Future,
    PastAndFuture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FootprintParams {
    pub robot: RobotFootprintSpec,
    /// Seconds of trajectory after (and optionally before) the image time.
    pub horizon: f64,
    /// Seconds between sampled poses.
    pub stride: f64,
    /// Tolerance in meters before a footprint pixel counts as occluded.
    pub occl_margin: f64,
    /// Min-filter radius applied to the sparse LiDAR depth image before the
    /// occlusion test.
    pub occlusion_fill_px: usize,
    pub window: FootprintWindow,
}

impl Default for FootprintParams {
    fn default() -> Self {
        Self {
            robot: RobotFootprintSpec::default(),
            horizon: 5.0,
            stride: 0.1,
            occl_margin: 0.3,
            occlusion_fill_px: 2,
            window: FootprintWindow::Future,
        }
    }
}

/// Ground contact rectangle in the camera frame, corners in cyclic order.
pub type Quad = [Point3<f64>; 4];

#[derive(Clone, Debug, PartialEq)]
pub struct FootprintMask {
    /// Visible footprint pixels.
    pub mask: Mask,
    /// Footprint pixels hidden behind nearer LiDAR returns.
    pub occluded: Mask,
}

impl FootprintMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { mask: Mask::filled(width, height, false), occluded: Mask::filled(width, height, false) }
    }
}

fn sample_times(t_img: f64, horizon: f64, stride: f64) -> Vec<f64> {
    let n = (horizon / stride + 1e-9).floor() as usize;
    (0..=n).map(|k| t_img + k as f64 * stride).collect()
}

/// One quad per sampled pose in `[t_img, t_img + horizon]`, expressed in the
/// camera frame at `cam_pose` (camera → world, `cam_pose.t` is the image time).
pub fn footprint_quads(
    traj: &Trajectory,
    robot: &RobotFootprintSpec,
    cam_pose: &Pose,
    horizon: f64,
    stride: f64,
    window: FootprintWindow,
) -> Result<Vec<Quad>, GeometryError> {
    if !(horizon > 0.0 && stride > 0.0) {
        return Err(GeometryError::InvalidPose(format!("horizon {horizon} and stride {stride} must be positive")));
    }
    robot.validate()?;
    let t_img = cam_pose.t;
    let mut times = sample_times(t_img, horizon, stride);
    if window == FootprintWindow::PastAndFuture {
        let past: Vec<f64> =
            sample_times(t_img, horizon, stride).into_iter().skip(1).map(|t| 2.0 * t_img - t).collect();
        times.extend(past);
    }
    let first = times.iter().cloned().fold(f64::INFINITY, f64::min);
    let last = times.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !traj.covers(first, last) {
        return Err(GeometryError::OutOfRange {
            t: if first < traj.start() { first } else { last },
            start: traj.start(),
            end: traj.end(),
        });
    }
    let cam_from_world = cam_pose.isometry().inverse();
    let (hl, hw, dz) = (robot.length / 2.0, robot.width / 2.0, robot.ground_offset);
    let corners =
        [Point3::new(hl, hw, -dz), Point3::new(hl, -hw, -dz), Point3::new(-hl, -hw, -dz), Point3::new(-hl, hw, -dz)];
    times
        .into_iter()
        .map(|t| {
            let world_from_base = interpolate_pose(traj, t)?.isometry();
            let cam_from_base = cam_from_world * world_from_base;
            Ok(corners.map(|c| cam_from_base * c))
        })
        .collect()
}

/// Clips a convex polygon to `z >= near` (Sutherland–Hodgman, one plane).
fn clip_near(poly: &[Point3<f64>], near: f64) -> Vec<Point3<f64>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        let (ina, inb) = (a.z >= near, b.z >= near);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let s = (near - a.z) / (b.z - a.z);
            out.push(a + (b - a) * s);
        }
    }
    out
}

/// Per-pixel footprint coverage and nearest footprint depth (0 where uncovered).
pub fn footprint_depth(quads: &[Quad], k: &CameraIntrinsics) -> (Mask, DepthImage) {
    let mut cover = Mask::filled(k.width, k.height, false);
    let mut depth = DepthImage::filled(k.width, k.height, 0.0);
    for quad in quads {
        let clipped = clip_near(quad, NEAR_PLANE);
        if clipped.len() < 3 {
            continue;
        }
        let pix: Vec<[f64; 2]> = clipped.iter().filter_map(|p| project_point(p, k).ok()).map(|p| [p.u, p.v]).collect();
        if pix.len() != clipped.len() {
            continue;
        }
        let normal: Vector3<f64> = (quad[1] - quad[0]).cross(&(quad[3] - quad[0]));
        let offset = normal.dot(&quad[0].coords);
        let raster = rasterize_polygon(&pix, k.width, k.height);
        for (u, v, &inside) in raster.enumerate() {
            if !inside {
                continue;
            }
            let ray = k.ray(u as f64 + 0.5, v as f64 + 0.5);
            let denom = normal.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let d = offset / denom;
            if !(d > 0.0) {
                continue;
            }
            cover.set(u, v, true);
            let cur = depth.get_mut(u, v);
            if *cur == 0.0 || d < *cur {
                *cur = d;
            }
        }
    }
    (cover, depth)
}

/// Union of projected quads, split into visible and occluded pixels. A pixel
/// is occluded when the LiDAR depth there is valid and nearer than the
/// footprint by more than `occl_margin`.
pub fn render_footprint_mask(
    quads: &[Quad],
    k: &CameraIntrinsics,
    depth: &DepthImage,
    occl_margin: f64,
) -> FootprintMask {
    assert_eq!(depth.size(), (k.width, k.height), "depth image size mismatch");
    let (cover, fp_depth) = footprint_depth(quads, k);
    let mut out = FootprintMask::empty(k.width, k.height);
    for (u, v, &c) in cover.enumerate() {
        if !c {
            continue;
        }
        let lidar = *depth.get(u, v);
        if lidar > 0.0 && *fp_depth.get(u, v) > lidar + occl_margin {
            out.occluded.set(u, v, true);
        } else {
            out.mask.set(u, v, true);
        }
    }
    out
}

/// Pixels where the footprint sits on the image, ignoring occlusion.
pub fn union_mask(fp: &FootprintMask) -> Mask {
    fp.mask.or(&fp.occluded)
}

impl From<&FootprintMask> for Grid<u8> {
    /// 1 = visible footprint, 2 = occluded footprint.
    fn from(fp: &FootprintMask) -> Self {
        Grid::from_fn(fp.mask.width(), fp.mask.height(), |u, v| {
            if *fp.mask.get(u, v) {
                1
            } else if *fp.occluded.get(u, v) {
                2
            } else {
                0
            }
        })
    }
}
