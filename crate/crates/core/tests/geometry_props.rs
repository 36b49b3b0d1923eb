use nalgebra::{Isometry3, Point3, Translation3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use travkit_core::geometry::{
    back_project, build_depth_image, interpolate_pose, project_point, rasterize_polygon, transform_points,
    CameraIntrinsics, Extrinsics, Pose, Trajectory,
};
use travkit_core::grid::Mask;

fn iso() -> impl Strategy<Value = Isometry3<f64>> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0f64..3.1, prop::array::uniform3(-20.0f64..20.0)).prop_map(
        |(a, angle, t)| {
            let axis = Vector3::from(a);
            let rot = if axis.norm() < 1e-6 {
                UnitQuaternion::identity()
            } else {
                UnitQuaternion::from_scaled_axis(axis.normalize() * angle)
            };
            Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), rot)
        },
    )
}

fn point(r: f64) -> impl Strategy<Value = Point3<f64>> {
    prop::array::uniform3(-r..r).prop_map(Point3::from)
}

fn intrinsics(w: usize, h: usize) -> impl Strategy<Value = CameraIntrinsics> {
    (40.0f64..600.0, 40.0f64..600.0, 0.0..w as f64, 0.0..h as f64).prop_map(move |(fx, fy, cx, cy)| CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width: w,
        height: h,
    })
}

/// Crossing-number test of one point.
fn pnpoly(poly: &[[f64; 2]], x: f64, y: f64) -> bool {
    let mut c = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a[1] > y) != (b[1] > y) && x < (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1]) + a[0] {
            c = !c;
        }
        j = i;
    }
    c
}

proptest! {
    #[test]
    fn inverse_transform_restores_points(t in iso(), pts in prop::collection::vec(point(100.0), 1..50)) {
        let there = transform_points(&t, &pts).unwrap();
        let back = transform_points(&t.inverse(), &there).unwrap();
        for (p, q) in pts.iter().zip(&back) {
            prop_assert!((p - q).norm() < 1e-7);
        }
    }

    #[test]
    fn transform_matches_matrix_multiply(t in iso(), pts in prop::collection::vec(point(50.0), 100)) {
        let m = t.to_homogeneous();
        let got = transform_points(&t, &pts).unwrap();
        for (p, g) in pts.iter().zip(&got) {
            for r in 0..3 {
                let want = m[(r, 0)] * p.x + m[(r, 1)] * p.y + m[(r, 2)] * p.z + m[(r, 3)];
                prop_assert!((g[r] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn projection_round_trips(k in intrinsics(640, 480), xy in prop::array::uniform2(-30.0f64..30.0), z in 0.2f64..80.0) {
        let p = Point3::new(xy[0], xy[1], z);
        let pr = project_point(&p, &k).unwrap();
        prop_assert!((back_project(pr.u, pr.v, pr.depth, &k) - p).norm() < 1e-9);
    }

    #[test]
    fn rasterization_ignores_where_the_vertex_list_starts(
        poly in prop::collection::vec(prop::array::uniform2(-10.0f64..74.0), 3..9),
        shift in 0usize..8,
    ) {
        let mut rotated = poly.clone();
        rotated.rotate_left(shift % poly.len());
        prop_assert_eq!(rasterize_polygon(&poly, 64, 64), rasterize_polygon(&rotated, 64, 64));
    }

    #[test]
    fn random_triangle_matches_point_in_polygon(tri in prop::array::uniform3(prop::array::uniform2(-5.0f64..69.0))) {
        let got = rasterize_polygon(&tri, 64, 64);
        let want = Mask::from_fn(64, 64, |u, v| pnpoly(&tri, u as f64 + 0.5, v as f64 + 0.5));
        prop_assert_eq!(got, want);
    }

    #[test]
    fn depth_image_ignores_point_order(
        k in intrinsics(48, 36),
        pts in prop::collection::vec(point(15.0), 0..400),
        seed in any::<u64>(),
    ) {
        let ext = Extrinsics { cam_from_lidar: Isometry3::identity(), base_from_cam: Isometry3::identity() };
        let mut shuffled = pts.clone();
        // deterministic permutation from the seed
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        prop_assert_eq!(build_depth_image(&pts, &ext, &k), build_depth_image(&shuffled, &ext, &k));
    }
}

#[test]
fn depth_image_of_random_points_is_the_per_pixel_minimum() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let k = CameraIntrinsics { fx: 60.0, fy: 60.0, cx: 32.0, cy: 24.0, width: 64, height: 48 };
    let ext = Extrinsics { cam_from_lidar: Isometry3::identity(), base_from_cam: Isometry3::identity() };
    // packed into a narrow frustum so many pixels get several returns
    let pts: Vec<Point3<f64>> = (0..1000)
        .map(|_| {
            let z = rng.gen_range(0.5..20.0);
            Point3::new(rng.gen_range(-0.5..0.5) * z, rng.gen_range(-0.4..0.4) * z, z)
        })
        .collect();
    let depth = build_depth_image(&pts, &ext, &k);
    let mut shared = 0;
    for v in 0..48 {
        for u in 0..64 {
            let hits: Vec<f64> = pts
                .iter()
                .filter(|p| {
                    ((60.0 * p.x / p.z + 32.0).floor(), (60.0 * p.y / p.z + 24.0).floor()) == (u as f64, v as f64)
                })
                .map(|p| p.z)
                .collect();
            shared += (hits.len() > 1) as usize;
            let want = hits.iter().copied().fold(f64::INFINITY, f64::min);
            assert_eq!(*depth.get(u, v), if hits.is_empty() { 0.0 } else { want }, "pixel ({u}, {v})");
        }
    }
    assert!(shared > 10);
}

#[test]
fn slerp_midpoint_of_quarter_turn_is_eighth_turn() {
    let q0 = UnitQuaternion::identity();
    let q1 = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_2);
    let traj =
        Trajectory::new(vec![Pose::new(0.0, q0, Vector3::zeros()), Pose::new(2.0, q1, Vector3::new(2.0, 0.0, 0.0))])
            .unwrap();
    let mid = interpolate_pose(&traj, 1.0).unwrap();
    let want = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), std::f64::consts::FRAC_PI_4);
    assert!(mid.rotation.angle_to(&want) < 1e-9);
    assert!((mid.translation - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
}
