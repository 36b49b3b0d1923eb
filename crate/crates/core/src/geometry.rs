//! Rigid transforms, pinhole projection, pose interpolation, polygon
//! rasterization and LiDAR depth images.
//!
//! Frames: the camera is x-right / y-down / z-forward, the world is z-up.
//! Pixel `(u, v)` covers `[u, u+1) × [v, v+1)` in continuous image
//! coordinates, so its center is `(u + 0.5, v + 0.5)` and a projected point
//! lands in pixel `(floor(u), floor(v))`.

use nalgebra::{Isometry3, Matrix3, Point3, Quaternion, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::grid::{Grid, Mask};

/// Smallest camera-frame depth accepted by [`project_point`].
pub const MIN_DEPTH: f64 = 1e-6;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite point at index {index}")]
    NonFinitePoint { index: usize },
    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("time {t} outside trajectory span [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Timestamped rigid body pose (body → world).
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    pub t: f64,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(t: f64, rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { t, rotation, translation }
    }

    pub fn from_isometry(t: f64, iso: &Isometry3<f64>) -> Self {
        Self::new(t, iso.rotation, iso.translation.vector)
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(Translation3::from(self.translation), self.rotation)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !self.t.is_finite() {
            return Err(GeometryError::InvalidPose(format!("timestamp {}", self.t)));
        }
        let n = self.rotation.quaternion().norm();
        if (n - 1.0).abs() > 1e-9 {
            return Err(GeometryError::InvalidPose(format!("quaternion norm {n}")));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidPose("non-finite translation".into()));
        }
        Ok(())
    }
}

/// Time-sorted sequence of poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    poses: Vec<Pose>,
}

impl Trajectory {
    pub fn new(poses: Vec<Pose>) -> Result<Self, GeometryError> {
        if poses.is_empty() {
            return Err(GeometryError::EmptyTrajectory);
        }
        for p in &poses {
            p.validate()?;
        }
        if poses.windows(2).any(|w| w[1].t <= w[0].t) {
            return Err(GeometryError::InvalidPose("trajectory timestamps must be strictly increasing".into()));
        }
        Ok(Self { poses })
    }

    pub fn poses(&self) -> &[Pose] {
        &self.poses
    }

    pub fn start(&self) -> f64 {
        self.poses[0].t
    }

    pub fn end(&self) -> f64 {
        self.poses[self.poses.len() - 1].t
    }

    pub fn covers(&self, t0: f64, t1: f64) -> bool {
        t0 >= self.start() && t1 <= self.end()
    }

    /// Parses the TUM trajectory format: `t tx ty tz qx qy qz qw` per line.
    /// Blank lines and `#` comments are skipped. Quaternions are renormalized
    /// when their norm is within 1e-3 of one.
    pub fn from_tum(text: &str) -> Result<Self, GeometryError> {
        let mut poses = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| GeometryError::Parse { line: i + 1, msg: e.to_string() })?;
            if vals.len() != 8 {
                return Err(GeometryError::Parse {
                    line: i + 1,
                    msg: format!("expected 8 fields, got {}", vals.len()),
                });
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            let n = q.norm();
            if !n.is_finite() || (n - 1.0).abs() > 1e-3 {
                return Err(GeometryError::Parse { line: i + 1, msg: format!("quaternion norm {n} is not unit") });
            }
            poses.push(Pose::new(vals[0], UnitQuaternion::from_quaternion(q), Vector3::new(vals[1], vals[2], vals[3])));
        }
        Self::new(poses)
    }

    pub fn to_tum(&self) -> String {
        let mut out = String::from("# t tx ty tz qx qy qz qw\n");
        for p in &self.poses {
            let q = p.rotation.quaternion();
            out.push_str(&format!(
                "{} {} {} {} {} {} {} {}\n",
                p.t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
            ));
        }
        out
    }
}

/// Pinhole intrinsics for rectified images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidIntrinsics(format!("{self:?}")))
        }
    }

    /// Camera-frame ray through continuous image point `(u, v)`, scaled to z = 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }
}

/// Sensor extrinsics. `cam_from_lidar` maps LiDAR points into the camera
/// frame; `base_from_cam` maps camera points into the robot base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Extrinsics {
    pub cam_from_lidar: Isometry3<f64>,
    pub base_from_cam: Isometry3<f64>,
}

impl Extrinsics {
    pub fn base_from_lidar(&self) -> Isometry3<f64> {
        self.base_from_cam * self.cam_from_lidar
    }
}

/// Builds an isometry from a row-major 4×4 homogeneous matrix, checking that
/// the rotation block is orthonormal within 1e-6 and right-handed.
pub fn isometry_from_rows(m: &[f64; 16]) -> Result<Isometry3<f64>, GeometryError> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(GeometryError::InvalidTransform("non-finite entry".into()));
    }
    let r = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
    let err = (r.transpose() * r - Matrix3::identity()).abs().max();
    if err > 1e-6 || r.determinant() <= 0.0 {
        return Err(GeometryError::InvalidTransform(format!("rotation block not orthonormal (err {err:.3e})")));
    }
    if (m[12], m[13], m[14], m[15]) != (0.0, 0.0, 0.0, 1.0) {
        return Err(GeometryError::InvalidTransform("last row must be 0 0 0 1".into()));
    }
    let rot = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Isometry3::from_parts(Translation3::new(m[3], m[7], m[11]), rot))
}

/// Row-major 4×4 homogeneous matrix of an isometry.
pub fn isometry_to_rows(iso: &Isometry3<f64>) -> [f64; 16] {
    let h = iso.to_homogeneous();
    let mut out = [0.0; 16];
    for r in 0..4 {
        for c in 0..4 {
            out[r * 4 + c] = h[(r, c)];
        }
    }
    out
}

/// Per-pixel depth in meters along the camera z-axis; 0 marks no return.
pub type DepthImage = Grid<f64>;

/// Applies `transform` to every point.
pub fn transform_points(transform: &Isometry3<f64>, pts: &[Point3<f64>]) -> Result<Vec<Point3<f64>>, GeometryError> {
    pts.iter()
        .enumerate()
        .map(|(index, p)| {
            if p.iter().all(|x| x.is_finite()) {
                Ok(transform * p)
            } else {
                Err(GeometryError::NonFinitePoint { index })
            }
        })
        .collect()
}

/// Continuous image coordinates and depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

impl Projection {
    /// Integer pixel containing the projection, if inside the image.
    pub fn pixel(&self, k: &CameraIntrinsics) -> Option<(usize, usize)> {
        let (u, v) = (self.u.floor(), self.v.floor());
        if u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64 {
            Some((u as usize, v as usize))
        } else {
            None
        }
    }
}

pub fn project_point(p_cam: &Point3<f64>, k: &CameraIntrinsics) -> Result<Projection, GeometryError> {
    if !(p_cam.z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera { z: p_cam.z });
    }
    Ok(Projection { u: k.fx * p_cam.x / p_cam.z + k.cx, v: k.fy * p_cam.y / p_cam.z + k.cy, depth: p_cam.z })
}

/// Inverse of [`project_point`] at a known depth.
pub fn back_project(u: f64, v: f64, depth: f64, k: &CameraIntrinsics) -> Point3<f64> {
    Point3::from(k.ray(u, v) * depth)
}

fn slerp(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>, s: f64) -> UnitQuaternion<f64> {
    let qa = a.quaternion().coords;
    let mut qb = b.quaternion().coords;
    let mut dot = qa.dot(&qb);
    if dot < 0.0 {
        qb = -qb;
        dot = -dot;
    }
    let coords = if dot > 1.0 - 1e-12 {
        qa * (1.0 - s) + qb * s
    } else {
        let theta = dot.min(1.0).acos();
        let sin = theta.sin();
        qa * (((1.0 - s) * theta).sin() / sin) + qb * ((s * theta).sin() / sin)
    };
    UnitQuaternion::from_quaternion(Quaternion::from(coords))
}

/// Pose at time `t`: linear interpolation of translation and spherical
/// interpolation of rotation between the bracketing knots.
pub fn interpolate_pose(traj: &Trajectory, t: f64) -> Result<Pose, GeometryError> {
    let poses = traj.poses();
    if !(t >= traj.start() && t <= traj.end()) {
        return Err(GeometryError::OutOfRange { t, start: traj.start(), end: traj.end() });
    }
    let hi = poses.partition_point(|p| p.t < t);
    if poses[hi].t == t {
        return Ok(poses[hi].clone());
    }
    let (a, b) = (&poses[hi - 1], &poses[hi]);
    let s = (t - a.t) / (b.t - a.t);
    Ok(Pose::new(t, slerp(&a.rotation, &b.rotation, s), a.translation * (1.0 - s) + b.translation * s))
}

/// Even-odd fill of a polygon given in continuous image coordinates. A pixel
/// is set iff its center lies inside. Fewer than three vertices or a polygon
/// of zero area yields an empty mask.
pub fn rasterize_polygon(vertices: &[[f64; 2]], width: usize, height: usize) -> Mask {
    let mut mask = Mask::filled(width, height, false);
    let n = vertices.len();
    if n < 3 || width == 0 || height == 0 {
        return mask;
    }
    let (mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in vertices {
        vmin = vmin.min(p[1]);
        vmax = vmax.max(p[1]);
    }
    if !vmin.is_finite() || !vmax.is_finite() {
        return mask;
    }
    let row_lo = (vmin - 0.5).floor().max(0.0) as usize;
    let row_hi = ((vmax - 0.5).ceil().max(-1.0) + 1.0).min(height as f64) as usize;
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    for v in row_lo..row_hi {
        let y = v as f64 + 0.5;
        xs.clear();
        let mut j = n - 1;
        for i in 0..n {
            let (pi, pj) = (vertices[i], vertices[j]);
            if (pi[1] > y) != (pj[1] > y) {
                xs.push((pj[0] - pi[0]) * (y - pi[1]) / (pj[1] - pi[1]) + pi[0]);
            }
            j = i;
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(|a, b| a.total_cmp(b));
        // center x is inside iff an odd number of crossings lie strictly right
        // of it, i.e. x0 <= x < x1 for some sorted pair
        for pair in xs.chunks_exact(2) {
            let (x0, x1) = (pair[0], pair[1]);
            let lo = (x0 - 1.0).floor().max(0.0) as usize;
            let hi = (x1 + 1.0).ceil().clamp(0.0, width as f64) as usize;
            for u in lo..hi {
                let cx = u as f64 + 0.5;
                if cx >= x0 && cx < x1 {
                    mask.set(u, v, true);
                }
            }
        }
    }
    mask
}

/// Z-buffer of LiDAR returns in the camera image (minimum depth per pixel).
pub fn build_depth_image(cloud: &[Point3<f64>], ext: &Extrinsics, k: &CameraIntrinsics) -> DepthImage {
    let mut depth = DepthImage::filled(k.width, k.height, 0.0);
    for p in cloud {
        let pc = ext.cam_from_lidar * p;
        let Ok(proj) = project_point(&pc, k) else {
            continue;
        };
        if let Some((u, v)) = proj.pixel(k) {
            let d = depth.get_mut(u, v);
            if *d == 0.0 || proj.depth < *d {
                *d = proj.depth;
            }
        }
    }
    depth
}

/// Fills gaps in a sparse depth image with the minimum valid depth inside a
/// `(2r+1)²` window. Valid pixels may also drop to a nearer neighbor.
pub fn densify_depth(depth: &DepthImage, radius: usize) -> DepthImage {
    if radius == 0 {
        return depth.clone();
    }
    let (w, h) = depth.size();
    let r = radius as i64;
    // separable min filter over valid (non-zero) entries
    let min_valid = |a: f64, b: f64| match (a > 0.0, b > 0.0) {
        (true, true) => a.min(b),
        (true, false) => a,
        (false, true) => b,
        _ => 0.0,
    };
    let mut horiz = DepthImage::filled(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            let mut m = 0.0;
            for du in -r..=r {
                let x = u as i64 + du;
                if x >= 0 && (x as usize) < w {
                    m = min_valid(m, *depth.get(x as usize, v));
                }
            }
            horiz.set(u, v, m);
        }
    }
    let mut out = DepthImage::filled(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            let mut m = 0.0;
            for dv in -r..=r {
                let y = v as i64 + dv;
                if y >= 0 && (y as usize) < h {
                    m = min_valid(m, *horiz.get(u, y as usize));
                }
            }
            out.set(u, v, m);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 }
    }

    #[test]
    fn transform_identity_and_translation() {
        let p = [Point3::new(1.0, 2.0, 3.0)];
        assert_eq!(transform_points(&Isometry3::identity(), &p).unwrap(), p.to_vec());
        let t = Isometry3::translation(0.0, 0.0, 5.0);
        assert_eq!(transform_points(&t, &[Point3::origin()]).unwrap(), vec![Point3::new(0.0, 0.0, 5.0)]);
    }

    #[test]
    fn transform_reports_non_finite_index() {
        let pts = [Point3::new(0.0, 0.0, 0.0), Point3::new(f64::NAN, 0.0, 0.0)];
        assert_eq!(transform_points(&Isometry3::identity(), &pts), Err(GeometryError::NonFinitePoint { index: 1 }));
    }

    #[test]
    fn project_examples() {
        let k = k100();
        let p = project_point(&Point3::new(0.0, 0.0, 2.0), &k).unwrap();
        assert_eq!((p.u, p.v, p.depth), (50.0, 50.0, 2.0));
        let p = project_point(&Point3::new(1.0, 0.0, 2.0), &k).unwrap();
        assert_eq!((p.u, p.v, p.depth), (100.0, 50.0, 2.0));
        assert!(matches!(project_point(&Point3::new(0.0, 0.0, -1.0), &k), Err(GeometryError::BehindCamera { .. })));
    }

    fn traj_2() -> Trajectory {
        Trajectory::new(vec![
            Pose::new(0.0, UnitQuaternion::identity(), Vector3::zeros()),
            Pose::new(
                1.0,
                UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2),
                Vector3::new(2.0, 0.0, 0.0),
            ),
        ])
        .unwrap()
    }

    #[test]
    fn interpolate_knots_and_midpoint() {
        let traj = traj_2();
        assert_eq!(interpolate_pose(&traj, 1.0).unwrap(), traj.poses()[1]);
        let mid = interpolate_pose(&traj, 0.5).unwrap();
        assert_abs_diff_eq!(mid.translation, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-12);
        let expect = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_4);
        assert!(mid.rotation.angle_to(&expect) < 1e-9);
        assert!(matches!(interpolate_pose(&traj, 1.5), Err(GeometryError::OutOfRange { .. })));
    }

    #[test]
    fn tum_roundtrip_is_exact() {
        let traj = traj_2();
        assert_eq!(Trajectory::from_tum(&traj.to_tum()).unwrap(), traj);
    }

    #[test]
    fn tum_rejects_bad_lines() {
        assert!(matches!(Trajectory::from_tum("0 1 2 3\n"), Err(GeometryError::Parse { line: 1, .. })));
        assert!(Trajectory::from_tum("0 0 0 0 0 0 0 2\n").is_err());
    }

    #[test]
    fn square_rasterizes_to_exact_pixels() {
        let sq = [[10.0, 10.0], [20.0, 10.0], [20.0, 20.0], [10.0, 20.0]];
        let m = rasterize_polygon(&sq, 64, 64);
        assert_eq!(m.count(), 100);
        for (u, v, &b) in m.enumerate() {
            assert_eq!(b, (10..20).contains(&u) && (10..20).contains(&v));
        }
    }

    #[test]
    fn degenerate_and_outside_polygons_are_empty() {
        assert_eq!(rasterize_polygon(&[[1.0, 1.0], [5.0, 5.0]], 8, 8).count(), 0);
        assert_eq!(rasterize_polygon(&[[0.0, 0.0], [4.0, 4.0], [8.0, 8.0]], 8, 8).count(), 0);
        let out = [[-20.0, -20.0], [-10.0, -20.0], [-10.0, -10.0]];
        assert_eq!(rasterize_polygon(&out, 8, 8).count(), 0);
    }

    #[test]
    fn depth_image_keeps_nearest() {
        let ext = Extrinsics { cam_from_lidar: Isometry3::identity(), base_from_cam: Isometry3::identity() };
        let k = k100();
        let cloud = [Point3::new(0.0, 0.0, 5.0), Point3::new(0.0, 0.0, 2.0)];
        let d = build_depth_image(&cloud, &ext, &k);
        assert_eq!(*d.get(50, 50), 2.0);
        assert_eq!(d.iter().filter(|&&x| x > 0.0).count(), 1);
        assert!(build_depth_image(&[], &ext, &k).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn densify_fills_window_with_min() {
        let mut d = DepthImage::filled(5, 5, 0.0);
        d.set(2, 2, 4.0);
        d.set(3, 2, 3.0);
        let out = densify_depth(&d, 1);
        assert_eq!(*out.get(1, 1), 4.0);
        assert_eq!(*out.get(2, 2), 3.0);
        assert_eq!(*out.get(4, 4), 0.0);
    }

    #[test]
    fn calib_matrix_roundtrip_and_validation() {
        let iso = Isometry3::new(Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.2, 0.1, -0.4));
        let back = isometry_from_rows(&isometry_to_rows(&iso)).unwrap();
        assert!((back.to_homogeneous() - iso.to_homogeneous()).abs().max() < 1e-12);
        let mut bad = isometry_to_rows(&iso);
        bad[0] *= 1.1;
        assert!(isometry_from_rows(&bad).is_err());
    }
}
