//! Scene geometry and ray casting.

use nalgebra::{Matrix3, Point2, Point3, Vector2, Vector3};

/// Ground surface: the plane `z = gx·x + gy·y`, partitioned into material
/// patches by a Voronoi diagram over `cell_sites`.
#[derive(Clone, Debug)]
pub struct Ground {
    pub gx: f64,
    pub gy: f64,
    pub cell_sites: Vec<Point2<f64>>,
    pub cell_material: Vec<usize>,
}

impl Ground {
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.gx * x + self.gy * y
    }

    pub fn normal(&self) -> Vector3<f64> {
        Vector3::new(-self.gx, -self.gy, 1.0).normalize()
    }

    pub fn slope_deg(&self) -> f64 {
        self.normal().z.clamp(-1.0, 1.0).acos().to_degrees()
    }

    pub fn cell(&self, x: f64, y: f64) -> usize {
        let p = Point2::new(x, y);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, s) in self.cell_sites.iter().enumerate() {
            let d = (s - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    fn intersect(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        // n·(o + t d) = 0 with n = (-gx, -gy, 1)
        let n = Vector3::new(-self.gx, -self.gy, 1.0);
        let denom = n.dot(dir);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = -n.dot(&origin.coords) / denom;
        (t > 1e-9).then_some(t)
    }
}

/// Half-space `n·x <= d`.
pub type Plane = (Vector3<f64>, f64);

/// Width of the pit around every obstacle. Wider than the prior's
/// neighborhood radius, so no wall point has grade-level ground neighbors.
pub const PIT_WIDTH: f64 = 0.6;
/// Pit depth below the lowest point of its rim; deep enough that neither
/// the pit floor nor the foot of the obstacle is visible from the sensors.
pub const PIT_DEPTH: f64 = 5.0;
/// Height of the vertical front face below a ramp's inclined top.
pub const RAMP_LIP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObstacleKind {
    Box,
    Ramp,
}

/// Convex solid `{x : n_i·x <= d_i}` standing in a rectangular pit.
#[derive(Clone, Debug)]
pub struct Obstacle {
    pub kind: ObstacleKind,
    pub planes: Vec<Plane>,
    /// Counter-clockwise xy footprint.
    pub footprint: Vec<Point2<f64>>,
    /// Pit side walls and floor; the pit is open at the ground plane.
    pub pit: Vec<Plane>,
    pub pit_outline: Vec<Point2<f64>>,
    pub material: usize,
}

/// Ray entry into a convex solid: `(t, face normal)`, Cyrus–Beck clipping.
fn entry(planes: &[Plane], origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let mut t_in = f64::NEG_INFINITY;
    let mut t_out = f64::INFINITY;
    let mut n_in = Vector3::zeros();
    for (n, d) in planes {
        let denom = n.dot(dir);
        let dist = d - n.dot(&origin.coords);
        if denom.abs() < 1e-15 {
            if dist < 0.0 {
                return None;
            }
            continue;
        }
        let t = dist / denom;
        if denom < 0.0 {
            if t > t_in {
                t_in = t;
                n_in = *n;
            }
        } else if t < t_out {
            t_out = t;
        }
        if t_in > t_out {
            return None;
        }
    }
    (t_in > 1e-9 && t_in <= t_out).then_some((t_in, n_in))
}

/// Exit from a convex region containing `origin`: `(t, outward normal)`.
fn exit(planes: &[Plane], origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    planes
        .iter()
        .filter_map(|(n, d)| {
            let denom = n.dot(dir);
            (denom > 1e-15).then(|| ((d - n.dot(&origin.coords)) / denom, *n))
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

impl Obstacle {
    /// Horizontal distance from `(x, y)` to the footprint (0 inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        polygon_distance(&self.footprint, &Point2::new(x, y))
    }

    /// Horizontal distance from `(x, y)` to the pit opening (0 inside).
    pub fn pit_distance(&self, x: f64, y: f64) -> f64 {
        polygon_distance(&self.pit_outline, &Point2::new(x, y))
    }

    fn pit_contains(&self, x: f64, y: f64) -> bool {
        self.pit_distance(x, y) == 0.0
    }

    /// Vertices of the solid clipped to the region above the ground plane.
    pub fn vertices_above(&self, ground: &Ground) -> Vec<Point3<f64>> {
        let mut planes = self.planes.clone();
        // z >= gx x + gy y  <=>  gx x + gy y - z <= 0
        planes.push((Vector3::new(ground.gx, ground.gy, -1.0), 0.0));
        let mut out: Vec<Point3<f64>> = Vec::new();
        for i in 0..planes.len() {
            for j in i + 1..planes.len() {
                for k in j + 1..planes.len() {
                    let m = Matrix3::from_rows(&[
                        planes[i].0.transpose(),
                        planes[j].0.transpose(),
                        planes[k].0.transpose(),
                    ]);
                    let Some(inv) = m.try_inverse() else { continue };
                    let x = inv * Vector3::new(planes[i].1, planes[j].1, planes[k].1);
                    if planes.iter().all(|(n, d)| n.dot(&x) <= d + 1e-9)
                        && !out.iter().any(|p| (p.coords - x).norm() < 1e-9)
                    {
                        out.push(Point3::from(x));
                    }
                }
            }
        }
        out
    }
}

pub fn polygon_distance(poly: &[Point2<f64>], p: &Point2<f64>) -> f64 {
    let n = poly.len();
    let mut inside = true;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let e = b - a;
        let cross = e.x * (p.y - a.y) - e.y * (p.x - a.x);
        if cross < 0.0 {
            inside = false;
        }
        let s = ((p - a).dot(&e) / e.norm_squared()).clamp(0.0, 1.0);
        best = best.min((a + e * s - p).norm());
    }
    if inside {
        0.0
    } else {
        best
    }
}

/// Oriented rectangle corners (counter-clockwise) in xy.
pub fn rect_corners(center: Point2<f64>, yaw: f64, half_len: f64, half_wid: f64) -> Vec<Point2<f64>> {
    let (c, s) = (yaw.cos(), yaw.sin());
    let ax = Vector2::new(c, s);
    let ay = Vector2::new(-s, c);
    [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
        .iter()
        .map(|(i, j)| center + ax * (i * half_len) + ay * (j * half_wid))
        .collect()
}

fn rect_planes(center: Point2<f64>, yaw: f64, half_len: f64, half_wid: f64) -> Vec<Plane> {
    let (c, s) = (yaw.cos(), yaw.sin());
    let ax = Vector3::new(c, s, 0.0);
    let ay = Vector3::new(-s, c, 0.0);
    let o = Vector3::new(center.x, center.y, 0.0);
    vec![
        (ax, ax.dot(&o) + half_len),
        (-ax, -ax.dot(&o) + half_len),
        (ay, ay.dot(&o) + half_wid),
        (-ay, -ay.dot(&o) + half_wid),
    ]
}

struct Pit {
    planes: Vec<Plane>,
    outline: Vec<Point2<f64>>,
    floor: f64,
}

fn pit(center: Point2<f64>, yaw: f64, half_len: f64, half_wid: f64, ground: &Ground) -> Pit {
    let (hl, hw) = (half_len + PIT_WIDTH, half_wid + PIT_WIDTH);
    let outline = rect_corners(center, yaw, hl, hw);
    let rim_low = outline.iter().map(|p| ground.height(p.x, p.y)).fold(f64::INFINITY, f64::min);
    let floor = rim_low - PIT_DEPTH;
    let mut planes = rect_planes(center, yaw, hl, hw);
    planes.push((-Vector3::z(), -floor));
    Pit { planes, outline, floor }
}

/// Box with vertical walls and a horizontal top at `top_z`, standing on the
/// floor of its pit.
pub fn make_box(
    center: Point2<f64>,
    yaw: f64,
    half_len: f64,
    half_wid: f64,
    top_z: f64,
    ground: &Ground,
    material: usize,
) -> Obstacle {
    let pit = pit(center, yaw, half_len, half_wid, ground);
    let mut planes = rect_planes(center, yaw, half_len, half_wid);
    planes.push((Vector3::z(), top_z));
    planes.push((-Vector3::z(), -pit.floor));
    Obstacle {
        kind: ObstacleKind::Box,
        planes,
        footprint: rect_corners(center, yaw, half_len, half_wid),
        pit: pit.planes,
        pit_outline: pit.outline,
        material,
    }
}

/// Steep ramp along its local +x: a vertical front face rising `RAMP_LIP`
/// above the ground, then a top inclined at `angle_deg` up to about `top_z`,
/// capped at `top_z` and closed by a vertical back face.
pub fn make_ramp(
    center: Point2<f64>,
    yaw: f64,
    angle_deg: f64,
    top_z: f64,
    half_wid: f64,
    ground: &Ground,
    material: usize,
) -> Obstacle {
    let tan = angle_deg.to_radians().tan();
    let rise = top_z - ground.height(center.x, center.y) - RAMP_LIP;
    let half_len = rise.max(0.1) / tan / 2.0;
    let ax = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
    let front = center - Vector2::new(ax.x, ax.y) * half_len;
    let z0 = ground.height(front.x, front.y) + RAMP_LIP;
    // z - z0 <= tan * (ax·(x - front))
    let fvec = Vector3::new(front.x, front.y, 0.0);
    let face_n = Vector3::new(0.0, 0.0, 1.0) - ax * tan;
    let face_d = z0 - tan * ax.dot(&fvec);
    let norm = face_n.norm();
    let pit = pit(center, yaw, half_len, half_wid, ground);
    let mut planes = vec![(face_n / norm, face_d / norm)];
    planes.extend(rect_planes(center, yaw, half_len, half_wid));
    planes.push((Vector3::z(), top_z));
    planes.push((-Vector3::z(), -pit.floor));
    Obstacle {
        kind: ObstacleKind::Ramp,
        planes,
        footprint: rect_corners(center, yaw, half_len, half_wid),
        pit: pit.planes,
        pit_outline: pit.outline,
        material,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Surface {
    Sky,
    /// Grade-level ground or the wall of a pit.
    Ground {
        cell: usize,
    },
    Obstacle {
        index: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    pub t: f64,
    pub point: Point3<f64>,
    pub normal: Vector3<f64>,
    pub surface: Surface,
}

/// Ground plane with obstacles in non-overlapping pits. Rays must start
/// above the ground and outside every pit.
#[derive(Clone, Debug)]
pub struct World {
    pub ground: Ground,
    pub obstacles: Vec<Obstacle>,
}

impl World {
    pub fn cast(&self, origin: &Point3<f64>, dir: &Vector3<f64>, max_t: f64) -> Option<Hit> {
        let mut best: Option<(f64, Vector3<f64>, Surface)> = None;
        if let Some(t) = self.ground.intersect(origin, dir) {
            let p = origin + dir * t;
            best = match self.obstacles.iter().find(|o| o.pit_contains(p.x, p.y)) {
                // through the pit opening onto a pit wall or the floor
                Some(ob) => exit(&ob.pit, &p, dir).map(|(dt, n)| {
                    let q = p + dir * dt;
                    (t + dt, -n, Surface::Ground { cell: self.ground.cell(q.x, q.y) })
                }),
                None => Some((t, self.ground.normal(), Surface::Ground { cell: self.ground.cell(p.x, p.y) })),
            };
        }
        for (index, ob) in self.obstacles.iter().enumerate() {
            if let Some((t, n)) = entry(&ob.planes, origin, dir) {
                if best.is_none_or(|b| t < b.0) {
                    best = Some((t, n, Surface::Obstacle { index }));
                }
            }
        }
        best.filter(|b| b.0 <= max_t).map(|(t, normal, surface)| Hit { t, point: origin + dir * t, normal, surface })
    }

    /// Distance in xy from a point to the nearest pit opening.
    pub fn hazard_distance(&self, x: f64, y: f64) -> f64 {
        self.obstacles.iter().map(|o| o.pit_distance(x, y)).fold(f64::INFINITY, f64::min)
    }
}
