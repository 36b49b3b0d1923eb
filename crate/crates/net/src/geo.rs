//! Image-aligned LiDAR rendering for the geometric stream.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use travkit_core::geometry::{project_point, CameraIntrinsics, Extrinsics};
use travkit_core::grid::{Grid, Mask};
use travkit_core::prior::PointFeatures;

use crate::graph::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeoError {
    #[error("normalization parameter {0} must be positive and finite")]
    BadNorm(&'static str),
    #[error("cloud has {points} points but {features} feature records")]
    LengthMismatch { points: usize, features: usize },
}

/// Channel normalization. Inverse depth is `d_min / d` clamped to `[0, 1]`;
/// returns beyond `d_max` are dropped; height is clipped to `±h_clip` and
/// mapped linearly onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeoNorm {
    pub h_clip: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for GeoNorm {
    fn default() -> Self {
        Self { h_clip: 1.0, d_min: 1.0, d_max: 40.0 }
    }
}

impl GeoNorm {
    pub fn validate(&self) -> Result<(), GeoError> {
        for (name, v) in [("h_clip", self.h_clip), ("d_min", self.d_min), ("d_max", self.d_max)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GeoError::BadNorm(name));
            }
        }
        Ok(())
    }

    pub fn inverse_depth(&self, d: f64) -> f64 {
        (self.d_min / d).clamp(0.0, 1.0)
    }

    pub fn height(&self, h: f64) -> f64 {
        (h.clamp(-self.h_clip, self.h_clip) + self.h_clip) / (2.0 * self.h_clip)
    }

    pub fn slope(&self, deg: f64) -> f64 {
        (deg / 90.0).clamp(0.0, 1.0)
    }
}

/// Channels are inverse depth, height and slope; all zero where
/// `validity` is false.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometricImage {
    pub channels: Grid<[f64; 3]>,
    pub validity: Mask,
}

impl GeometricImage {
    pub fn empty(width: usize, height: usize) -> Self {
        Self { channels: Grid::filled(width, height, [0.0; 3]), validity: Grid::filled(width, height, false) }
    }

    /// Network input: the three channels plus validity as a fourth plane.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h) = self.channels.size();
        let mut data = Vec::with_capacity(4 * w * h);
        for c in 0..3 {
            data.extend(self.channels.iter().map(|px| px[c]));
        }
        data.extend(self.validity.iter().map(|&v| if v { 1.0 } else { 0.0 }));
        Tensor::from_vec(4, h, w, data)
    }
}

/// Z-buffered projection of a LiDAR-frame cloud: the nearest return per pixel
/// writes its normalized channels. Points with invalid features still mark
/// the pixel valid, with neutral height and zero slope.
pub fn build_geometric_input(
    cloud: &[Point3<f64>],
    features: &[PointFeatures],
    ext: &Extrinsics,
    k: &CameraIntrinsics,
    norm: &GeoNorm,
) -> Result<GeometricImage, GeoError> {
    norm.validate()?;
    if cloud.len() != features.len() {
        return Err(GeoError::LengthMismatch { points: cloud.len(), features: features.len() });
    }
    let mut img = GeometricImage::empty(k.width, k.height);
    let mut zbuf = Grid::filled(k.width, k.height, f64::INFINITY);
    for (p, f) in cloud.iter().zip(features) {
        let Ok(proj) = project_point(&(ext.cam_from_lidar * p), k) else { continue };
        if proj.depth > norm.d_max {
            continue;
        }
        let Some((u, v)) = proj.pixel(k) else { continue };
        if proj.depth >= *zbuf.get(u, v) {
            continue;
        }
        zbuf.set(u, v, proj.depth);
        let (h, s) = if f.valid { (f.height, f.slope_deg) } else { (0.0, 0.0) };
        img.channels.set(u, v, [norm.inverse_depth(proj.depth), norm.height(h), norm.slope(s)]);
        img.validity.set(u, v, true);
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Isometry3;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics { fx: 10.0, fy: 10.0, cx: 4.0, cy: 3.0, width: 8, height: 6 }
    }

    fn ext() -> Extrinsics {
        Extrinsics { cam_from_lidar: Isometry3::identity(), base_from_cam: Isometry3::identity() }
    }

    fn feat(h: f64, s: f64) -> PointFeatures {
        PointFeatures { height: h, slope_deg: s, roughness: 0.0, valid: true }
    }

    #[test]
    fn empty_cloud_is_all_zero() {
        let g = build_geometric_input(&[], &[], &ext(), &k(), &GeoNorm::default()).unwrap();
        assert!(g.channels.iter().all(|c| *c == [0.0; 3]));
        assert_eq!(g.validity.count(), 0);
    }

    #[test]
    fn point_at_max_depth_has_hand_computed_channels() {
        let norm = GeoNorm { h_clip: 0.5, d_min: 2.0, d_max: 16.0 };
        // (x, y) = (0, 0) lands on the principal point pixel (4, 3)
        let g =
            build_geometric_input(&[Point3::new(0.0, 0.0, 16.0)], &[feat(0.25, 30.0)], &ext(), &k(), &norm).unwrap();
        assert_eq!(*g.channels.get(4, 3), [2.0 / 16.0, 0.75, 1.0 / 3.0]);
        assert!(*g.validity.get(4, 3));
        assert_eq!(g.validity.count(), 1);
        // just beyond d_max the return is dropped
        let g = build_geometric_input(&[Point3::new(0.0, 0.0, 16.5)], &[feat(0.0, 0.0)], &ext(), &k(), &norm).unwrap();
        assert_eq!(g.validity.count(), 0);
    }

    #[test]
    fn nearest_point_wins() {
        let pts = [Point3::new(0.0, 0.0, 8.0), Point3::new(0.0, 0.0, 4.0), Point3::new(0.0, 0.0, 6.0)];
        let fs = [feat(0.0, 0.0), feat(0.0, 45.0), feat(0.0, 90.0)];
        let g = build_geometric_input(&pts, &fs, &ext(), &k(), &GeoNorm::default()).unwrap();
        assert_eq!(g.channels.get(4, 3)[2], 0.5);
    }

    #[test]
    fn bad_norm_rejected() {
        let norm = GeoNorm { h_clip: 0.0, ..GeoNorm::default() };
        assert_eq!(build_geometric_input(&[], &[], &ext(), &k(), &norm), Err(GeoError::BadNorm("h_clip")));
    }
}
