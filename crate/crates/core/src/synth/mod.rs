//! Deterministic synthetic scenes: planar ground split into material
//! patches, box and wedge obstacles, a driven trajectory, ray-cast LiDAR
//! sweeps, flat-shaded camera images and ground-truth traversability.
//!
//! Ground truth uses the geometric prior's slope threshold for terrain and
//! marks ground within the prior's neighborhood radius of an obstacle
//! footprint as non-traversable (the robot cannot stand there).

pub mod world;

use nalgebra::{Isometry3, Matrix3, Point2, Point3, Rotation3, Translation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::footprint::RobotFootprintSpec;
use crate::fusion::{LabelImage, NON_TRAVERSABLE, TRAVERSABLE};
use crate::geometry::{CameraIntrinsics, Extrinsics, Pose, Trajectory};
use crate::grid::Grid;
use crate::prior::PriorParams;
use world::{make_box, make_ramp, Ground, Obstacle, Surface, World};

/// Camera position in the base frame (x forward, y left, z up).
pub const CAMERA_MOUNT: [f64; 3] = [0.3, 0.0, 0.7];
/// LiDAR position in the base frame; axes aligned with the base.
pub const LIDAR_MOUNT: [f64; 3] = [0.3, 0.0, 0.8];

const SKY_REGION: u32 = 0;
const GROUND_REGION_BASE: u32 = 1000;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("could not place obstacle {index} clear of the trajectory after {attempts} attempts")]
    Placement { index: usize, attempts: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryStyle {
    Straight,
    #[default]
    Arc,
    SCurve,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarSpec {
    /// Azimuth samples per sweep.
    pub rays: usize,
    /// Vertical channels, evenly spaced over `[elev_min_deg, elev_max_deg]`.
    pub channels: usize,
    pub elev_min_deg: f64,
    pub elev_max_deg: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self { rays: 1024, channels: 64, elev_min_deg: -25.0, elev_max_deg: 12.0, max_range: 45.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Scene size in meters (x, y); the trajectory starts near the -x edge.
    pub extent: [f64; 2],
    pub n_obstacles: usize,
    /// Min/max obstacle footprint side lengths (meters).
    pub obstacle_size: [f64; 2],
    /// Min/max ground slope (degrees).
    pub slope_range: [f64; 2],
    pub trajectory: TrajectoryStyle,
    pub frames: usize,
    /// Pose samples between consecutive frames.
    pub frame_stride: usize,
    /// Pose samples per second.
    pub pose_rate: f64,
    /// Driving speed (m/s).
    pub speed: f64,
    /// Seconds of trajectory kept after the last frame.
    pub tail: f64,
    pub ground_cells: usize,
    pub lidar: LidarSpec,
    pub camera: CameraIntrinsics,
    pub camera_pitch_deg: f64,
    pub robot: RobotFootprintSpec,
    /// Ground steeper than this is non-traversable.
    pub gt_max_slope_deg: f64,
    /// Ground closer than this to the pit around an obstacle is non-traversable.
    pub gt_inflation: f64,
    /// Extra clearance between the driven swath and inflated obstacles.
    pub path_clearance: f64,
    /// Gaussian pixel noise (σ on [0, 1] intensities).
    pub pixel_noise: f64,
    /// Gaussian LiDAR range noise (σ in meters).
    pub range_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let prior = PriorParams::default();
        Self {
            seed: 0,
            extent: [40.0, 40.0],
            n_obstacles: 8,
            obstacle_size: [0.8, 2.5],
            slope_range: [0.0, 4.0],
            trajectory: TrajectoryStyle::Arc,
            frames: 4,
            frame_stride: 10,
            pose_rate: 10.0,
            speed: 1.5,
            tail: 6.0,
            ground_cells: 14,
            lidar: LidarSpec::default(),
            camera: CameraIntrinsics { fx: 160.0, fy: 160.0, cx: 128.0, cy: 96.0, width: 256, height: 192 },
            camera_pitch_deg: 12.0,
            robot: RobotFootprintSpec::default(),
            gt_max_slope_deg: prior.theta_max,
            gt_inflation: prior.radius,
            path_clearance: 0.3,
            pixel_noise: 0.0,
            range_noise: 0.0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.to_string()));
        if self.frames == 0 || self.frame_stride == 0 || self.lidar.rays == 0 || self.lidar.channels < 2 {
            return bad("counts must be positive (at least two LiDAR channels)");
        }
        if !(self.pose_rate > 0.0 && self.speed > 0.0 && self.tail >= 0.0) {
            return bad("pose_rate and speed must be positive");
        }
        let [s0, s1] = self.slope_range;
        if !(0.0 <= s0 && s0 <= s1 && s1 <= 45.0) {
            return bad("slope range must lie within [0, 45]");
        }
        let [o0, o1] = self.obstacle_size;
        if !(0.0 < o0 && o0 <= o1) {
            return bad("obstacle size range must be positive and ordered");
        }
        if self.ground_cells == 0 || !(self.extent[0] > 0.0 && self.extent[1] > 0.0) {
            return bad("extent and ground_cells must be positive");
        }
        self.camera.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        self.robot.validate().map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        Ok(())
    }
}

/// What a LiDAR return hit, for verification.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointTruth {
    pub surface: Surface,
    pub traversable: bool,
}

#[derive(Clone, Debug)]
pub struct SynthFrame {
    pub frame_id: String,
    pub pose_index: usize,
    /// Base pose at the image time.
    pub pose: Pose,
    pub rgb: Grid<[u8; 3]>,
    /// LiDAR-frame returns `(x, y, z, intensity)`.
    pub cloud: Vec<[f32; 4]>,
    pub point_truth: Vec<PointTruth>,
    pub gt: LabelImage,
    pub gt_regions: Grid<u32>,
}

#[derive(Clone, Debug)]
pub struct SynthScene {
    pub spec: SceneSpec,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: Extrinsics,
    pub trajectory: Trajectory,
    pub world: World,
    pub frames: Vec<SynthFrame>,
}

const GROUND_ALBEDO: [[f64; 3]; 4] = [[0.35, 0.35, 0.38], [0.30, 0.55, 0.22], [0.55, 0.43, 0.30], [0.62, 0.60, 0.56]];
const OBSTACLE_ALBEDO: [[f64; 3]; 4] = [[0.72, 0.72, 0.70], [0.65, 0.30, 0.22], [0.55, 0.40, 0.20], [0.40, 0.45, 0.58]];
const SKY: [f64; 3] = [0.55, 0.72, 0.92];

pub fn sensor_extrinsics(pitch_deg: f64) -> Extrinsics {
    let p = pitch_deg.to_radians();
    let cam_x = Vector3::new(0.0, -1.0, 0.0);
    let cam_z = Vector3::new(p.cos(), 0.0, -p.sin());
    let cam_y = cam_z.cross(&cam_x);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[cam_x, cam_y, cam_z]));
    let base_from_cam = Isometry3::from_parts(
        Translation3::new(CAMERA_MOUNT[0], CAMERA_MOUNT[1], CAMERA_MOUNT[2]),
        UnitQuaternion::from_rotation_matrix(&rot),
    );
    let base_from_lidar = Isometry3::translation(LIDAR_MOUNT[0], LIDAR_MOUNT[1], LIDAR_MOUNT[2]);
    Extrinsics { cam_from_lidar: base_from_cam.inverse() * base_from_lidar, base_from_cam }
}

fn curvature(style: TrajectoryStyle, s: f64, kappa: f64) -> f64 {
    match style {
        TrajectoryStyle::Straight => 0.0,
        TrajectoryStyle::Arc => kappa,
        TrajectoryStyle::SCurve => kappa * (2.0 * std::f64::consts::PI * s / 14.0).sin(),
    }
}

fn build_trajectory(spec: &SceneSpec, ground: &Ground, rng: &mut ChaCha8Rng) -> Trajectory {
    let duration = (spec.frames - 1) as f64 * spec.frame_stride as f64 / spec.pose_rate + spec.tail;
    let n = (duration * spec.pose_rate).ceil() as usize + 1;
    let radius = rng.gen_range(14.0..28.0);
    let kappa = if rng.gen_bool(0.5) { 1.0 / radius } else { -1.0 / radius };
    let mut x = -spec.extent[0] / 2.0 + 4.0;
    let mut y = rng.gen_range(-2.0..2.0);
    let mut heading: f64 = rng.gen_range(-0.15..0.15);
    let mut s = 0.0;
    let ds = spec.speed / spec.pose_rate / 20.0;
    let normal = ground.normal();
    let mut poses = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 {
            for _ in 0..20 {
                // midpoint integration of the planar unicycle
                let mid = heading + 0.5 * ds * curvature(spec.trajectory, s, kappa);
                x += ds * mid.cos();
                y += ds * mid.sin();
                heading += ds * curvature(spec.trajectory, s + 0.5 * ds, kappa);
                s += ds;
            }
        }
        let dir = Vector3::new(heading.cos(), heading.sin(), 0.0);
        let fwd = (dir - normal * dir.dot(&normal)).normalize();
        let left = normal.cross(&fwd);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[fwd, left, normal]));
        let origin = Vector3::new(x, y, ground.height(x, y)) + normal * spec.robot.ground_offset;
        poses.push(Pose::new(i as f64 / spec.pose_rate, UnitQuaternion::from_rotation_matrix(&rot), origin));
    }
    Trajectory::new(poses).expect("generated trajectory is valid")
}

fn place_obstacles(
    spec: &SceneSpec,
    ground: &Ground,
    traj: &Trajectory,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Obstacle>, SynthError> {
    const ATTEMPTS: usize = 400;
    let clearance = spec.robot.width / 2.0 + spec.gt_inflation + spec.path_clearance;
    let path: Vec<Point2<f64>> = traj.poses().iter().map(|p| Point2::new(p.translation.x, p.translation.y)).collect();
    // Every obstacle shares one absolute top height above every sensor
    // position: tops are never observed, and a nearer obstacle hides the
    // whole part of a farther one that it overlaps instead of leaving a thin
    // visible strip above its own top edge.
    let sensor_top = traj.poses().iter().map(|p| p.translation.z + LIDAR_MOUNT[2]).fold(f64::NEG_INFINITY, f64::max);
    let top_z = sensor_top + 0.8 + 40.0 * (ground.gx.abs() + ground.gy.abs());
    // pits may not overlap
    let mut out: Vec<(Obstacle, Point2<f64>, f64)> = Vec::with_capacity(spec.n_obstacles);
    // cover the stretch seen from the frames
    let seen = ((spec.frames - 1) * spec.frame_stride).min(path.len() - 1);
    for index in 0..spec.n_obstacles {
        let ramp = rng.gen_bool(0.3);
        let material = rng.gen_range(0..OBSTACLE_ALBEDO.len());
        let [lo, hi] = spec.obstacle_size;
        let (len, wid) = (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let yaw = rng.gen_range(0.0..std::f64::consts::PI);
        let ramp_angle: f64 = rng.gen_range(55.0..75.0);
        let mut placed = None;
        for _ in 0..ATTEMPTS {
            let anchor = rng.gen_range(0..=seen);
            let along = rng.gen_range(4.0..22.0);
            let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let lateral = clearance + world::PIT_WIDTH + 0.5 * (len * len + wid * wid).sqrt() + rng.gen_range(0.0..8.0);
            let p = &traj.poses()[anchor];
            let h = p.rotation * Vector3::x();
            let hxy = Vector3::new(h.x, h.y, 0.0).normalize();
            let c = Point2::new(
                p.translation.x + hxy.x * along - hxy.y * lateral * side,
                p.translation.y + hxy.y * along + hxy.x * lateral * side,
            );
            if top_z - ground.height(c.x, c.y) < 1.5 {
                continue;
            }
            let ob = if ramp {
                make_ramp(c, yaw, ramp_angle, top_z, wid / 2.0, ground, material)
            } else {
                make_box(c, yaw, len / 2.0, wid / 2.0, top_z, ground, material)
            };
            let r = pit_radius(&ob, c);
            let apart = out.iter().all(|(_, oc, or)| (c - oc).norm() > r + or + 0.2);
            if apart && path.iter().all(|q| ob.pit_distance(q.x, q.y) >= clearance) {
                placed = Some((ob, c, r));
                break;
            }
        }
        out.push(placed.ok_or(SynthError::Placement { index, attempts: ATTEMPTS })?);
    }
    Ok(out.into_iter().map(|(o, _, _)| o).collect())
}

/// Radius of the circle about `c` that covers the obstacle's pit.
fn pit_radius(ob: &Obstacle, c: Point2<f64>) -> f64 {
    ob.pit_outline.iter().map(|p| (p - c).norm()).fold(0.0, f64::max)
}

struct Rules {
    max_slope: f64,
    inflation: f64,
}

fn ground_truth(world: &World, rules: &Rules, hit: &world::Hit) -> (bool, u32) {
    match hit.surface {
        Surface::Sky => (false, SKY_REGION),
        Surface::Obstacle { index } => (false, 1 + index as u32),
        Surface::Ground { cell } => {
            let trav = world.ground.slope_deg() <= rules.max_slope
                && world.hazard_distance(hit.point.x, hit.point.y) > rules.inflation;
            (trav, GROUND_REGION_BASE + 2 * cell as u32 + (!trav) as u32)
        }
    }
}

fn albedo(world: &World, surface: Surface) -> [f64; 3] {
    match surface {
        Surface::Sky => SKY,
        Surface::Ground { cell } => GROUND_ALBEDO[world.ground.cell_material[cell]],
        Surface::Obstacle { index } => OBSTACLE_ALBEDO[world.obstacles[index].material],
    }
}

fn render_frame(
    spec: &SceneSpec,
    world: &World,
    rules: &Rules,
    ext: &Extrinsics,
    pose: &Pose,
    pose_index: usize,
    rng: &mut ChaCha8Rng,
) -> SynthFrame {
    let k = &spec.camera;
    let world_from_base = pose.isometry();
    let world_from_cam = world_from_base * ext.base_from_cam;
    let cam_origin = world_from_cam * Point3::origin();
    let sun = Vector3::new(0.3, 0.2, 0.9).normalize();
    let pixel_noise = (spec.pixel_noise > 0.0).then(|| Normal::new(0.0, spec.pixel_noise).unwrap());

    let mut rgb = Grid::filled(k.width, k.height, [0u8; 3]);
    let mut gt = LabelImage::filled(k.width, k.height, NON_TRAVERSABLE);
    let mut regions = Grid::filled(k.width, k.height, SKY_REGION);
    for v in 0..k.height {
        for u in 0..k.width {
            let dir = (world_from_cam.rotation * k.ray(u as f64 + 0.5, v as f64 + 0.5)).normalize();
            let (color, label, region) = match world.cast(&cam_origin, &dir, f64::INFINITY) {
                None => (SKY, false, SKY_REGION),
                Some(hit) => {
                    let a = albedo(world, hit.surface);
                    let shade = 0.35 + 0.65 * hit.normal.dot(&sun).max(0.0);
                    let (trav, region) = ground_truth(world, rules, &hit);
                    (a.map(|c| c * shade), trav, region)
                }
            };
            let mut px = [0u8; 3];
            for (c, out) in color.iter().zip(px.iter_mut()) {
                let noisy = match &pixel_noise {
                    Some(n) => c + n.sample(rng),
                    None => *c,
                };
                *out = (noisy.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            rgb.set(u, v, px);
            gt.set(u, v, if label { TRAVERSABLE } else { NON_TRAVERSABLE });
            regions.set(u, v, region);
        }
    }

    let world_from_lidar = world_from_base * ext.base_from_lidar();
    let lidar_origin = world_from_lidar * Point3::origin();
    let lidar_from_world = world_from_lidar.inverse();
    let range_noise = (spec.range_noise > 0.0).then(|| Normal::new(0.0, spec.range_noise).unwrap());
    let l = &spec.lidar;
    let mut cloud = Vec::new();
    let mut point_truth = Vec::new();
    for c in 0..l.channels {
        let elev =
            (l.elev_min_deg + (l.elev_max_deg - l.elev_min_deg) * c as f64 / (l.channels - 1) as f64).to_radians();
        for j in 0..l.rays {
            let az = 2.0 * std::f64::consts::PI * j as f64 / l.rays as f64;
            let local = Vector3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin());
            let dir = world_from_lidar.rotation * local;
            let Some(hit) = world.cast(&lidar_origin, &dir, l.max_range) else {
                continue;
            };
            let range = match &range_noise {
                Some(n) => hit.t + n.sample(rng),
                None => hit.t,
            };
            let p = lidar_from_world * (lidar_origin + dir * range);
            let a = albedo(world, hit.surface);
            let intensity = (a[0] + a[1] + a[2]) / 3.0;
            cloud.push([p.x as f32, p.y as f32, p.z as f32, intensity as f32]);
            point_truth.push(PointTruth { surface: hit.surface, traversable: ground_truth(world, rules, &hit).0 });
        }
    }

    SynthFrame {
        frame_id: format!("{pose_index:06}"),
        pose_index,
        pose: pose.clone(),
        rgb,
        cloud,
        point_truth,
        gt,
        gt_regions: regions,
    }
}

/// Generates a scene; identical specs give bit-identical output.
pub fn generate_scene(spec: &SceneSpec) -> Result<SynthScene, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let slope = rng.gen_range(spec.slope_range[0]..=spec.slope_range[1]).to_radians().tan();
    let dir = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let [ex, ey] = spec.extent;
    let cell_sites = (0..spec.ground_cells)
        .map(|_| Point2::new(rng.gen_range(-ex / 2.0..ex / 2.0), rng.gen_range(-ey / 2.0..ey / 2.0)))
        .collect();
    let cell_material = (0..spec.ground_cells).map(|_| rng.gen_range(0..GROUND_ALBEDO.len())).collect();
    let ground = Ground { gx: slope * dir.cos(), gy: slope * dir.sin(), cell_sites, cell_material };
    if ground.slope_deg() > spec.gt_max_slope_deg {
        return Err(SynthError::InvalidSpec(format!(
            "sampled ground slope {:.1}° is not traversable; the robot cannot drive there",
            ground.slope_deg()
        )));
    }
    let trajectory = build_trajectory(spec, &ground, &mut rng);
    let obstacles = place_obstacles(spec, &ground, &trajectory, &mut rng)?;
    let world = World { ground, obstacles };
    let ext = sensor_extrinsics(spec.camera_pitch_deg);
    let rules = Rules { max_slope: spec.gt_max_slope_deg, inflation: spec.gt_inflation };
    let frames = (0..spec.frames)
        .map(|i| {
            let idx = i * spec.frame_stride;
            render_frame(spec, &world, &rules, &ext, &trajectory.poses()[idx], idx, &mut rng)
        })
        .collect();
    Ok(SynthScene { spec: spec.clone(), intrinsics: spec.camera, extrinsics: ext, trajectory, world, frames })
}

impl SynthFrame {
    pub fn cloud_points(&self) -> Vec<Point3<f64>> {
        self.cloud.iter().map(|p| Point3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect()
    }

    pub fn image_time(&self) -> f64 {
        self.pose.t
    }
}
