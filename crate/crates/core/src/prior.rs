//! Per-point LiDAR geometry (height, slope, roughness), seed classification
//! and projection of seeds into the image.

use std::collections::HashMap;

use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

use crate::geometry::{project_point, CameraIntrinsics, Extrinsics};
use crate::grid::Grid;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum PriorError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cloud has {points} points but {labels} seed labels")]
    LengthMismatch { points: usize, labels: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointFeatures {
    /// Height above the local ground estimate (meters).
    pub height: f64,
    /// Angle between the fitted normal and world up (degrees).
    pub slope_deg: f64,
    /// RMS point-to-plane residual of the local fit (meters).
    pub roughness: f64,
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SeedLabel {
    Pos,
    Neg,
    Unknown,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum SeedPixel {
    #[default]
    None = 0,
    Pos = 1,
    Neg = 2,
}

impl SeedPixel {
    pub fn from_u8(x: u8) -> Option<Self> {
        match x {
            0 => Some(Self::None),
            1 => Some(Self::Pos),
            2 => Some(Self::Neg),
            _ => None,
        }
    }
}

/// Sparse image-space seeds. `labels == None` exactly where `depth == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedImage {
    pub labels: Grid<SeedPixel>,
    pub depth: Grid<f64>,
}

impl SeedImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { labels: Grid::filled(width, height, SeedPixel::None), depth: Grid::filled(width, height, 0.0) }
    }

    pub fn count(&self, which: SeedPixel) -> usize {
        self.labels.iter().filter(|&&l| l == which).count()
    }

    pub fn mask(&self, which: SeedPixel) -> crate::grid::Mask {
        self.labels.map(|&l| l == which)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorParams {
    /// Neighborhood radius in meters.
    pub radius: f64,
    pub min_neighbors: usize,
    pub theta_max: f64,
    pub theta_neg: f64,
    pub h_max: f64,
    pub h_neg: f64,
    pub r_max: f64,
}

impl Default for PriorParams {
    fn default() -> Self {
        Self { radius: 0.5, min_neighbors: 8, theta_max: 25.0, theta_neg: 45.0, h_max: 0.15, h_neg: 0.4, r_max: 0.05 }
    }
}

impl PriorParams {
    pub fn thresholds(&self) -> SeedThresholds {
        SeedThresholds {
            theta_max: self.theta_max,
            theta_neg: self.theta_neg,
            h_max: self.h_max,
            h_neg: self.h_neg,
            r_max: self.r_max,
        }
    }
}

/// POS/NEG decision thresholds. The gap between the `*_max` and `*_neg`
/// values is the abstaining band.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeedThresholds {
    pub theta_max: f64,
    pub theta_neg: f64,
    pub h_max: f64,
    pub h_neg: f64,
    pub r_max: f64,
}

impl SeedThresholds {
    pub fn validate(&self) -> Result<(), PriorError> {
        let all = [self.theta_max, self.theta_neg, self.h_max, self.h_neg, self.r_max];
        if all.iter().any(|x| !(*x > 0.0)) {
            return Err(PriorError::Config(format!("thresholds must be positive: {self:?}")));
        }
        if self.theta_neg < self.theta_max || self.h_neg < self.h_max {
            return Err(PriorError::Config(format!("negative thresholds must not be below positive ones: {self:?}")));
        }
        Ok(())
    }
}

/// Fixed-radius neighbor search over a hashed voxel grid with cell size =
/// radius. Built once per cloud, read-only afterwards.
pub struct RadiusIndex<'a> {
    points: &'a [Point3<f64>],
    radius: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
}

impl<'a> RadiusIndex<'a> {
    pub fn new(points: &'a [Point3<f64>], radius: f64) -> Self {
        assert!(radius > 0.0);
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, radius)).or_default().push(i as u32);
        }
        Self { points, radius, cells }
    }

    fn key(p: &Point3<f64>, radius: f64) -> (i64, i64, i64) {
        ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64, (p.z / radius).floor() as i64)
    }

    /// Indices of all points within `radius` (inclusive) of `q`, ascending.
    pub fn within(&self, q: &Point3<f64>, out: &mut Vec<u32>) {
        out.clear();
        let (cx, cy, cz) = Self::key(q, self.radius);
        let r2 = self.radius * self.radius;
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(ids.iter().filter(|&&i| (self.points[i as usize] - q).norm_squared() <= r2));
                    }
                }
            }
        }
        out.sort_unstable();
    }
}

/// Null direction of a rank-2 symmetric matrix as the largest cross product
/// of its rows. The iterative eigensolver's vectors are only good to about
/// the square root of machine precision; this is good to the eigengap.
fn null_vector(m: &Matrix3<f64>) -> Option<Vector3<f64>> {
    let r = [m.row(0).transpose(), m.row(1).transpose(), m.row(2).transpose()];
    let best = [r[0].cross(&r[1]), r[0].cross(&r[2]), r[1].cross(&r[2])]
        .into_iter()
        .max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
    let n = best.norm();
    (n > 0.0).then(|| best / n)
}

/// Local plane fit per point over its radius neighborhood.
///
/// The normal is the eigenvector of the smallest covariance eigenvalue,
/// oriented upward; roughness is the RMS residual (square root of that
/// eigenvalue); height is measured against the 10th-percentile neighbor z.
/// Points with fewer than `min_neighbors` neighbors (the point itself
/// included) or a rank-deficient neighborhood are invalid.
pub fn compute_point_features(cloud: &[Point3<f64>], radius: f64, min_neighbors: usize) -> Vec<PointFeatures> {
    let index = RadiusIndex::new(cloud, radius);
    let mut nbrs = Vec::new();
    let mut zs = Vec::new();
    cloud
        .iter()
        .map(|p| {
            index.within(p, &mut nbrs);
            if nbrs.len() < min_neighbors.max(3) {
                return PointFeatures::default();
            }
            fit_features(cloud, p, &nbrs, &mut zs)
        })
        .collect()
}

fn fit_features(cloud: &[Point3<f64>], p: &Point3<f64>, nbrs: &[u32], zs: &mut Vec<f64>) -> PointFeatures {
    let n = nbrs.len() as f64;
    let mean = nbrs.iter().fold(Vector3::zeros(), |acc, &i| acc + cloud[i as usize].coords) / n;
    let mut cov = Matrix3::zeros();
    for &i in nbrs {
        let d = cloud[i as usize].coords - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (l0, l1, l2) = (eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]], eig.eigenvalues[order[2]]);
    if !(l2 > 0.0) || l1 <= 1e-10 * l2.max(1e-12) {
        return PointFeatures::default();
    }
    let normal = null_vector(&(cov - Matrix3::identity() * eig.eigenvalues[order[0]]))
        .unwrap_or_else(|| eig.eigenvectors.column(order[0]).into_owned());
    // atan2 stays well conditioned near flat, where acos(n_z) does not
    let slope_deg = normal.xy().norm().atan2(normal.z.abs()).to_degrees();

    zs.clear();
    zs.extend(nbrs.iter().map(|&i| cloud[i as usize].z));
    zs.sort_by(f64::total_cmp);
    let ground = zs[((zs.len() - 1) as f64 * 0.1).floor() as usize];

    PointFeatures { height: p.z - ground, slope_deg, roughness: l0.sqrt(), valid: true }
}

pub fn classify_seeds(features: &[PointFeatures], th: &SeedThresholds) -> Result<Vec<SeedLabel>, PriorError> {
    th.validate()?;
    Ok(features
        .iter()
        .map(|f| {
            if !f.valid {
                SeedLabel::Unknown
            } else if f.slope_deg <= th.theta_max && f.height.abs() <= th.h_max && f.roughness <= th.r_max {
                SeedLabel::Pos
            } else if f.slope_deg > th.theta_neg || f.height > th.h_neg {
                SeedLabel::Neg
            } else {
                SeedLabel::Unknown
            }
        })
        .collect())
}

/// Projects labeled LiDAR points (LiDAR frame) into the image. NEG wins
/// per-pixel label conflicts; the nearest labeled point sets the depth.
pub fn project_seeds(
    cloud: &[Point3<f64>],
    seeds: &[SeedLabel],
    ext: &Extrinsics,
    k: &CameraIntrinsics,
) -> Result<SeedImage, PriorError> {
    if cloud.len() != seeds.len() {
        return Err(PriorError::LengthMismatch { points: cloud.len(), labels: seeds.len() });
    }
    let mut img = SeedImage::empty(k.width, k.height);
    for (p, &s) in cloud.iter().zip(seeds) {
        let px = match s {
            SeedLabel::Pos => SeedPixel::Pos,
            SeedLabel::Neg => SeedPixel::Neg,
            SeedLabel::Unknown => continue,
        };
        let Ok(proj) = project_point(&(ext.cam_from_lidar * p), k) else {
            continue;
        };
        let Some((u, v)) = proj.pixel(k) else {
            continue;
        };
        let d = img.depth.get_mut(u, v);
        if *d == 0.0 || proj.depth < *d {
            *d = proj.depth;
        }
        let l = img.labels.get_mut(u, v);
        if *l != SeedPixel::Neg {
            *l = px;
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Isometry3;

    fn plane_grid(slope_deg: f64, n: i32, pitch: f64) -> Vec<Point3<f64>> {
        let g = slope_deg.to_radians().tan();
        let mut pts = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                let (x, y) = (i as f64 * pitch, j as f64 * pitch);
                pts.push(Point3::new(x, y, g * x));
            }
        }
        pts
    }

    #[test]
    fn flat_plane_features() {
        let pts = plane_grid(0.0, 20, 0.05);
        let feats = compute_point_features(&pts, 0.3, 8);
        for (p, f) in pts.iter().zip(&feats) {
            if p.x.abs() < 0.6 && p.y.abs() < 0.6 {
                assert!(f.valid);
                assert!(f.slope_deg < 1e-6);
                assert!(f.roughness < 1e-6);
                assert!(f.height.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn inclined_plane_slope() {
        let pts = plane_grid(30.0, 20, 0.05);
        let feats = compute_point_features(&pts, 0.3, 8);
        for (p, f) in pts.iter().zip(&feats) {
            if p.x.abs() < 0.6 && p.y.abs() < 0.6 {
                assert!((f.slope_deg - 30.0).abs() < 0.5, "{}", f.slope_deg);
            }
        }
    }

    #[test]
    fn isolated_and_collinear_points_are_invalid() {
        let pts = vec![Point3::new(0.0, 0.0, 0.0), Point3::new(10.0, 0.0, 0.0)];
        assert!(compute_point_features(&pts, 0.5, 1).iter().all(|f| !f.valid));
        let line: Vec<_> = (0..20).map(|i| Point3::new(i as f64 * 0.01, 0.0, 0.0)).collect();
        assert!(compute_point_features(&line, 0.5, 8).iter().all(|f| !f.valid));
    }

    fn feat(slope: f64, h: f64, r: f64) -> PointFeatures {
        PointFeatures { height: h, slope_deg: slope, roughness: r, valid: true }
    }

    #[test]
    fn classify_examples() {
        let th = PriorParams::default().thresholds();
        let out = classify_seeds(
            &[
                feat(0.0, 0.0, 0.0),
                feat(90.0, 0.0, 0.0),
                feat(25.0, 0.0, 0.0),
                PointFeatures::default(),
                feat(35.0, 0.0, 0.0),
            ],
            &th,
        )
        .unwrap();
        assert_eq!(out, vec![SeedLabel::Pos, SeedLabel::Neg, SeedLabel::Pos, SeedLabel::Unknown, SeedLabel::Unknown]);
    }

    #[test]
    fn inverted_band_is_config_error() {
        let mut th = PriorParams::default().thresholds();
        th.theta_neg = 10.0;
        assert!(matches!(classify_seeds(&[], &th), Err(PriorError::Config(_))));
        let mut th = PriorParams::default().thresholds();
        th.h_neg = 0.1;
        assert!(classify_seeds(&[], &th).is_err());
    }

    fn setup() -> (Extrinsics, CameraIntrinsics) {
        (
            Extrinsics { cam_from_lidar: Isometry3::identity(), base_from_cam: Isometry3::identity() },
            CameraIntrinsics { fx: 100.0, fy: 100.0, cx: 50.0, cy: 50.0, width: 100, height: 100 },
        )
    }

    #[test]
    fn project_single_and_conflicting_seeds() {
        let (ext, k) = setup();
        let p = Point3::new(0.3, -0.2, 4.0);
        let img = project_seeds(&[p], &[SeedLabel::Pos], &ext, &k).unwrap();
        let (u, v) = project_point(&p, &k).unwrap().pixel(&k).unwrap();
        assert_eq!(*img.labels.get(u, v), SeedPixel::Pos);
        assert_eq!(img.count(SeedPixel::Pos), 1);

        let q = Point3::new(0.6, -0.4, 8.0); // same ray, farther
        let img = project_seeds(&[p, q], &[SeedLabel::Pos, SeedLabel::Neg], &ext, &k).unwrap();
        assert_eq!(*img.labels.get(u, v), SeedPixel::Neg);
        assert_eq!(*img.depth.get(u, v), 4.0);

        let behind = project_seeds(&[Point3::new(0.0, 0.0, -3.0)], &[SeedLabel::Neg], &ext, &k).unwrap();
        assert_eq!(behind.count(SeedPixel::Neg), 0);
        assert!(project_seeds(&[p], &[], &ext, &k).is_err());
    }

    #[test]
    fn seed_image_labels_match_depth_support() {
        let (ext, k) = setup();
        let pts: Vec<_> = (0..50).map(|i| Point3::new(i as f64 * 0.02 - 0.5, 0.1, 2.0 + i as f64 * 0.1)).collect();
        let labels: Vec<_> = (0..50).map(|i| [SeedLabel::Pos, SeedLabel::Neg, SeedLabel::Unknown][i % 3]).collect();
        let img = project_seeds(&pts, &labels, &ext, &k).unwrap();
        for (l, d) in img.labels.iter().zip(img.depth.iter()) {
            assert_eq!(*l == SeedPixel::None, *d == 0.0);
        }
    }
}
