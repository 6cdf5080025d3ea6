//! Planar poses, convex polytopes in half-space form, rigid transforms, and
//! exact distance computations.
//!
//! The distance routines here are deliberately enumeration-based (vertex and
//! edge pairs) rather than iterative: they serve as the trusted oracle that
//! solver output is judged against, so they must not share failure modes with
//! the solvers.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Geometric predicate tolerance (membership, vertex dedup, determinants).
const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Robot pose in the plane: position in meters, heading in radians.
///
/// `theta` is kept normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanarState {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

/// Wraps an angle into `(-pi, pi]`.
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut t = theta % two_pi;
    if t <= -std::f64::consts::PI {
        t += two_pi;
    } else if t > std::f64::consts::PI {
        t -= two_pi;
    }
    t
}

/// Difference `a - b` wrapped into `(-pi, pi]`.
pub fn angle_difference(a: f64, b: f64) -> f64 {
    normalize_angle(a - b)
}

impl PlanarState {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Rotation matrix of the heading.
    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.theta.sin_cos();
        Matrix2::new(c, -s, s, c)
    }
}

/// Serialized form of a polytope inside scenario files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolytopeData {
    pub normals: Vec<[f64; 2]>,
    pub offsets: Vec<f64>,
}

/// Bounded convex polytope `{ z : n_i . z <= h_i }` with unit-norm face
/// normals.
///
/// Construction validates all invariants (>= 3 faces, unit normals after
/// rescaling, bounded, non-empty interior) and caches the vertex
/// representation, which the distance routines need anyway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PolytopeData", into = "PolytopeData")]
pub struct ConvexPolytope {
    normals: Vec<Vector2<f64>>,
    offsets: Vec<f64>,
    vertices: Vec<Vector2<f64>>,
    centroid: Vector2<f64>,
    circumradius: f64,
}

impl TryFrom<PolytopeData> for ConvexPolytope {
    type Error = GeometryError;
    fn try_from(data: PolytopeData) -> Result<Self, Self::Error> {
        let normals = data
            .normals
            .iter()
            .map(|n| Vector2::new(n[0], n[1]))
            .collect();
        ConvexPolytope::new(normals, data.offsets)
    }
}

impl From<ConvexPolytope> for PolytopeData {
    fn from(p: ConvexPolytope) -> Self {
        PolytopeData {
            normals: p.normals.iter().map(|n| [n.x, n.y]).collect(),
            offsets: p.offsets.clone(),
        }
    }
}

impl ConvexPolytope {
    /// Builds a polytope from face normals and offsets. Normals are rescaled
    /// to unit length (offsets rescaled accordingly).
    pub fn new(normals: Vec<Vector2<f64>>, offsets: Vec<f64>) -> Result<Self, GeometryError> {
        if normals.len() != offsets.len() {
            return Err(GeometryError::DimensionMismatch {
                what: "offsets",
                expected: normals.len(),
                got: offsets.len(),
            });
        }
        if normals.len() < 3 {
            return Err(GeometryError::InvalidShape(format!(
                "need at least 3 faces, got {}",
                normals.len()
            )));
        }
        let mut unit_normals = Vec::with_capacity(normals.len());
        let mut unit_offsets = Vec::with_capacity(offsets.len());
        for (n, h) in normals.iter().zip(&offsets) {
            let norm = n.norm();
            if !norm.is_finite() || norm < GEOM_EPS || !h.is_finite() {
                return Err(GeometryError::InvalidShape(
                    "non-finite or zero-length face normal".into(),
                ));
            }
            unit_normals.push(n / norm);
            unit_offsets.push(h / norm);
        }

        if !positively_spanning(&unit_normals) {
            return Err(GeometryError::InvalidShape(
                "normals do not positively span the plane (unbounded set)".into(),
            ));
        }

        let vertices = enumerate_vertices(&unit_normals, &unit_offsets);
        if vertices.len() < 3 {
            return Err(GeometryError::InvalidShape(
                "fewer than 3 vertices: empty or degenerate interior".into(),
            ));
        }
        let centroid = vertices.iter().sum::<Vector2<f64>>() / vertices.len() as f64;
        // Strict feasibility of the vertex centroid certifies a non-empty
        // interior.
        for (n, h) in unit_normals.iter().zip(&unit_offsets) {
            if n.dot(&centroid) >= h - GEOM_EPS {
                return Err(GeometryError::InvalidShape(
                    "no strictly feasible interior point".into(),
                ));
            }
        }
        let circumradius = vertices
            .iter()
            .map(|v| (v - centroid).norm())
            .fold(0.0, f64::max);

        Ok(Self {
            normals: unit_normals,
            offsets: unit_offsets,
            vertices,
            centroid,
            circumradius,
        })
    }

    /// Axis-aligned rectangle centered at the origin.
    pub fn rectangle(width: f64, height: f64) -> Result<Self, GeometryError> {
        let hw = width / 2.0;
        let hh = height / 2.0;
        Self::new(
            vec![
                Vector2::new(1.0, 0.0),
                Vector2::new(-1.0, 0.0),
                Vector2::new(0.0, 1.0),
                Vector2::new(0.0, -1.0),
            ],
            vec![hw, hw, hh, hh],
        )
    }

    /// Regular polygon with `faces` sides and the given inradius.
    pub fn regular(faces: usize, inradius: f64) -> Result<Self, GeometryError> {
        let normals = (0..faces)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / faces as f64;
                Vector2::new(a.cos(), a.sin())
            })
            .collect();
        Self::new(normals, vec![inradius; faces])
    }

    pub fn num_faces(&self) -> usize {
        self.normals.len()
    }

    pub fn normals(&self) -> &[Vector2<f64>] {
        &self.normals
    }

    pub fn offsets(&self) -> &[f64] {
        &self.offsets
    }

    pub fn vertices(&self) -> &[Vector2<f64>] {
        &self.vertices
    }

    pub fn centroid(&self) -> Vector2<f64> {
        self.centroid
    }

    /// Largest vertex distance from the vertex centroid.
    pub fn circumradius(&self) -> f64 {
        self.circumradius
    }

    pub fn contains(&self, q: &Vector2<f64>) -> bool {
        self.normals
            .iter()
            .zip(&self.offsets)
            .all(|(n, h)| n.dot(q) <= h + GEOM_EPS)
    }
}

/// True iff the unit normals positively span the plane, i.e. the largest
/// angular gap between consecutive normals is below pi.
fn positively_spanning(normals: &[Vector2<f64>]) -> bool {
    let mut angles: Vec<f64> = normals.iter().map(|n| n.y.atan2(n.x)).collect();
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut max_gap: f64 = 0.0;
    for i in 0..angles.len() {
        let next = if i + 1 == angles.len() {
            angles[0] + 2.0 * std::f64::consts::PI
        } else {
            angles[i + 1]
        };
        max_gap = max_gap.max(next - angles[i]);
    }
    max_gap < std::f64::consts::PI - GEOM_EPS
}

/// All intersection points of face-boundary pairs that satisfy every
/// half-space, deduplicated and sorted counter-clockwise.
fn enumerate_vertices(normals: &[Vector2<f64>], offsets: &[f64]) -> Vec<Vector2<f64>> {
    let m = normals.len();
    let mut verts: Vec<Vector2<f64>> = Vec::new();
    for i in 0..m {
        for j in (i + 1)..m {
            let det = normals[i].x * normals[j].y - normals[i].y * normals[j].x;
            if det.abs() < GEOM_EPS {
                continue;
            }
            let v = Vector2::new(
                (offsets[i] * normals[j].y - offsets[j] * normals[i].y) / det,
                (normals[i].x * offsets[j] - normals[j].x * offsets[i]) / det,
            );
            let feasible = normals
                .iter()
                .zip(offsets)
                .all(|(n, h)| n.dot(&v) <= h + 1e-7);
            if feasible && !verts.iter().any(|w| (w - v).norm() < 1e-7) {
                verts.push(v);
            }
        }
    }
    if verts.len() >= 3 {
        let c = verts.iter().sum::<Vector2<f64>>() / verts.len() as f64;
        verts.sort_by(|a, b| {
            let aa = (a.y - c.y).atan2(a.x - c.x);
            let ab = (b.y - c.y).atan2(b.x - c.x);
            aa.partial_cmp(&ab).unwrap()
        });
    }
    verts
}

/// An obstacle: pose `(a, b, phi)`, current velocity estimate, and its
/// body-frame shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObstacleState {
    pub a: f64,
    pub b: f64,
    pub phi: f64,
    pub velocity: [f64; 2],
    pub shape: ConvexPolytope,
}

impl ObstacleState {
    pub fn new(a: f64, b: f64, phi: f64, velocity: Vector2<f64>, shape: ConvexPolytope) -> Self {
        Self {
            a,
            b,
            phi: normalize_angle(phi),
            velocity: [velocity.x, velocity.y],
            shape,
        }
    }

    pub fn pose(&self) -> PlanarState {
        PlanarState::new(self.a, self.b, self.phi)
    }

    pub fn center(&self) -> Vector2<f64> {
        Vector2::new(self.a, self.b)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.velocity[0], self.velocity[1])
    }

    /// The obstacle's occupied region in world coordinates.
    pub fn world_polytope(&self) -> ConvexPolytope {
        transform(&self.shape, &self.pose())
    }
}

/// Half-space form of the rigid motion `z -> R(pose) z + p(pose)` applied to
/// `shape`. A point `q` lies in the output iff `R^T (q - p)` lies in the
/// input.
pub fn transform(shape: &ConvexPolytope, pose: &PlanarState) -> ConvexPolytope {
    let rot = pose.rotation();
    let p = pose.position();
    let normals: Vec<Vector2<f64>> = shape.normals.iter().map(|n| rot * n).collect();
    let offsets: Vec<f64> = normals
        .iter()
        .zip(&shape.offsets)
        .map(|(n, h)| h + n.dot(&p))
        .collect();
    let vertices: Vec<Vector2<f64>> = shape.vertices.iter().map(|v| rot * v + p).collect();
    let centroid = rot * shape.centroid + p;
    // Rigid motion: validity and circumradius are preserved, so rebuild
    // directly without re-running construction checks.
    ConvexPolytope {
        normals,
        offsets,
        vertices,
        centroid,
        circumradius: shape.circumradius,
    }
}

/// Pose composition: `compose(p2, p1)` is the pose of applying `p1` first,
/// then `p2` (matching `transform(transform(S, p1), p2)`).
pub fn compose(p2: &PlanarState, p1: &PlanarState) -> PlanarState {
    let r2 = p2.rotation();
    let p = r2 * p1.position() + p2.position();
    PlanarState::new(p.x, p.y, p1.theta + p2.theta)
}

/// Center distance between two poses (headings ignored).
pub fn dist_c(a: &PlanarState, b: &PlanarState) -> f64 {
    (a.position() - b.position()).norm()
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < GEOM_EPS * GEOM_EPS {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Separating-axis intersection test over the face normals of both polygons.
fn polygons_intersect(p: &ConvexPolytope, q: &ConvexPolytope) -> bool {
    let separated = |poly: &ConvexPolytope, other: &ConvexPolytope| {
        poly.normals.iter().zip(&poly.offsets).any(|(n, h)| {
            other
                .vertices
                .iter()
                .map(|v| n.dot(v))
                .fold(f64::INFINITY, f64::min)
                > *h
        })
    };
    !(separated(p, q) || separated(q, p))
}

/// Exact minimum Euclidean distance between two bounded convex polytopes.
///
/// Zero iff the sets intersect; otherwise the minimum over all vertex/edge
/// pairs of the two polygon boundaries, which is exact in 2D.
pub fn polytope_distance(p: &ConvexPolytope, q: &ConvexPolytope) -> f64 {
    if polygons_intersect(p, q) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let edge_pairs = |verts: &[Vector2<f64>], other: &[Vector2<f64>], best: &mut f64| {
        let m = other.len();
        for v in verts {
            for i in 0..m {
                let d = point_segment_distance(v, &other[i], &other[(i + 1) % m]);
                if d < *best {
                    *best = d;
                }
            }
        }
    };
    edge_pairs(&p.vertices, &q.vertices, &mut best);
    edge_pairs(&q.vertices, &p.vertices, &mut best);
    best
}

/// Checks a dual separation certificate for "robot shape at `pose` is at
/// least distance `d` from `obstacle`".
///
/// All four conditions must hold within `tol`:
/// norm condition `||H^T lam|| <= 1`, nonnegativity of `lam`, `mu`, `z`,
/// the componentwise equality `mu^T G + lam^T H R(pose) = 0`, and the scalar
/// equality `lam^T H p(pose) - lam^T h - mu^T g - z = d`.
pub fn dual_certificate_check(
    lam: &[f64],
    mu: &[f64],
    z: f64,
    robot_shape: &ConvexPolytope,
    pose: &PlanarState,
    obstacle: &ConvexPolytope,
    d: f64,
    tol: f64,
) -> Result<bool, GeometryError> {
    if lam.len() != obstacle.num_faces() {
        return Err(GeometryError::DimensionMismatch {
            what: "lam entries (obstacle faces)",
            expected: obstacle.num_faces(),
            got: lam.len(),
        });
    }
    if mu.len() != robot_shape.num_faces() {
        return Err(GeometryError::DimensionMismatch {
            what: "mu entries (robot faces)",
            expected: robot_shape.num_faces(),
            got: mu.len(),
        });
    }

    if lam.iter().any(|&v| v < -tol) || mu.iter().any(|&v| v < -tol) || z < -tol {
        return Ok(false);
    }

    // H^T lam in world coordinates.
    let mut ht_lam = Vector2::zeros();
    for (n, &l) in obstacle.normals.iter().zip(lam) {
        ht_lam += n * l;
    }
    if ht_lam.norm() > 1.0 + tol {
        return Ok(false);
    }

    // mu^T G + lam^T H R(pose), as a column 2-vector.
    let rot = pose.rotation();
    let mut u = rot.transpose() * ht_lam;
    for (n, &m) in robot_shape.normals.iter().zip(mu) {
        u += n * m;
    }
    if u.x.abs() > tol || u.y.abs() > tol {
        return Ok(false);
    }

    let lam_h: f64 = obstacle.offsets.iter().zip(lam).map(|(h, l)| h * l).sum();
    let mu_g: f64 = robot_shape.offsets.iter().zip(mu).map(|(g, m)| g * m).sum();
    let v = ht_lam.dot(&pose.position()) - lam_h - mu_g - z - d;
    Ok(v.abs() <= tol)
}
