//! Point-cloud containers, rotations, neighborhoods and preprocessing.
//!
//! Convention: points and vector features are row vectors. A [`Rotation`]
//! with matrix `R` acts on a row vector `p` as `p · Rᵀ` (equivalently
//! `R p` in column form), and on a vector-list feature `V` (C×3) as
//! `V · Rᵀ`. Every rotation in the crate goes through [`Rotation::apply`]
//! so point-level and feature-level rotation always agree.

mod synthetic;

pub use synthetic::{
    generate_synthetic_instance, generate_synthetic_pair, random_family_instances, SyntheticFamily, SyntheticPairSpec,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keypoint {
    pub semantic_id: u32,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u32>>,
    keypoints: Vec<Keypoint>,
    pub category: String,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::invalid(format!("point {i} has a non-finite coordinate")));
        }
        Ok(Self {
            points,
            labels: None,
            keypoints: Vec::new(),
            category: String::new(),
        })
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::shape("PointCloud::with_labels", self.points.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_keypoints(mut self, keypoints: Vec<Keypoint>) -> Result<Self> {
        if let Some(kp) = keypoints.iter().find(|k| k.index >= self.points.len()) {
            return Err(Error::invalid(format!(
                "keypoint {} index {} out of range for {} points",
                kp.semantic_id,
                kp.index,
                self.points.len()
            )));
        }
        self.keypoints = keypoints;
        Ok(self)
    }

    pub fn with_category(mut self, category: impl Into<String>) -> Self {
        self.category = category.into();
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn keypoints(&self) -> &[Keypoint] {
        &self.keypoints
    }

    /// Same metadata, new coordinates. Used by geometric maps that keep indexing.
    fn map_points(&self, points: Vec<Point>) -> Self {
        Self {
            points,
            labels: self.labels.clone(),
            keypoints: self.keypoints.clone(),
            category: self.category.clone(),
        }
    }

    pub fn rotated(&self, rotation: &Rotation) -> Self {
        rotate(self, rotation)
    }

    /// Draws `n` points (without replacement when possible, padding with
    /// replacement otherwise). Labels follow their points; keypoints whose
    /// point survives are remapped to the first surviving copy.
    pub fn resample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("resample target must be at least 1"));
        }
        let len = self.len();
        let mut order: Vec<usize> = (0..len).collect();
        // Fisher-Yates, explicit so the draw sequence is stable across rand versions.
        for i in (1..len).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut picked: Vec<usize> = order.into_iter().take(n).collect();
        while picked.len() < n {
            picked.push(rng.gen_range(0..len));
        }
        let points = picked.iter().map(|&i| self.points[i]).collect();
        let labels = self.labels.as_ref().map(|l| picked.iter().map(|&i| l[i]).collect());
        let keypoints = self
            .keypoints
            .iter()
            .filter_map(|kp| {
                picked.iter().position(|&i| i == kp.index).map(|index| Keypoint {
                    semantic_id: kp.semantic_id,
                    index,
                })
            })
            .collect();
        Ok(Self {
            points,
            labels,
            keypoints,
            category: self.category.clone(),
        })
    }
}

/// Proper rotation stored as a row-major 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation {
    matrix: [[f64; 3]; 3],
}

impl Rotation {
    pub const ORTHONORMAL_TOL: f64 = 1e-6;

    pub fn identity() -> Self {
        Self {
            matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn from_matrix(matrix: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { matrix };
        let err = r.orthonormality_error();
        if err > Self::ORTHONORMAL_TOL || (r.determinant() - 1.0).abs() > Self::ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "matrix is not a proper rotation (orthonormality error {err:.3e}, det {:.6})",
                r.determinant()
            )));
        }
        Ok(r)
    }

    /// From a quaternion `(w, x, y, z)`; normalized first.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self> {
        let norm = q.iter().map(|c| c * c).sum::<f64>().sqrt();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::invalid("quaternion must be finite and non-zero"));
        }
        let [w, x, y, z] = q.map(|c| c / norm);
        Ok(Self {
            matrix: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - z * w),
                    2.0 * (x * z + y * w),
                ],
                [
                    2.0 * (x * y + z * w),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - x * w),
                ],
                [
                    2.0 * (x * z - y * w),
                    2.0 * (y * z + x * w),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        })
    }

    pub fn from_axis_angle(axis: Point, angle: f64) -> Result<Self> {
        let n = norm(axis);
        if n == 0.0 {
            return Err(Error::invalid("rotation axis must be non-zero"));
        }
        let (s, c) = (0.5 * angle).sin_cos();
        Self::from_quaternion([c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.matrix
    }

    pub fn transpose(&self) -> Self {
        let m = &self.matrix;
        Self {
            matrix: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Rotates a row vector: `v · Rᵀ`.
    #[inline]
    pub fn apply(&self, v: Point) -> Point {
        let m = &self.matrix;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    pub fn compose(&self, other: &Rotation) -> Rotation {
        // self ∘ other: apply `other` first.
        let a = &self.matrix;
        let b = &other.matrix;
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        Rotation { matrix: m }
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.matrix;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Max elementwise deviation of `RᵀR` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let m = &self.matrix;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| m[k][i] * m[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }

    /// Geodesic angle from the identity, in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let m = &self.matrix;
        let trace = m[0][0] + m[1][1] + m[2][2];
        ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }
}

/// Haar-uniform rotation via a uniform unit quaternion (Shoemake's subgroup
/// algorithm): three uniform variates give the quaternion directly.
pub fn sample_uniform_rotation<R: Rng + ?Sized>(rng: &mut R) -> Rotation {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let q = [
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ];
    Rotation::from_quaternion(q).expect("unit quaternion")
}

pub fn rotate(cloud: &PointCloud, rotation: &Rotation) -> PointCloud {
    cloud.map_points(cloud.points.iter().map(|&p| rotation.apply(p)).collect())
}

/// Indices of the `k` nearest neighbours of every point, self excluded,
/// ordered by distance then index.
pub fn knn_graph(cloud: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    knn_points(cloud.points(), k)
}

pub(crate) fn knn_points(points: &[Point], k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("knn requires 1 <= k < N (k = {k}, N = {n})")));
    }
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for (i, &p) in points.iter().enumerate() {
        cand.clear();
        cand.extend(
            points
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &q)| (sq_dist(p, q), j)),
        );
        let by_dist_then_index = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, by_dist_then_index);
            cand.truncate(k);
        }
        cand.sort_unstable_by(by_dist_then_index);
        out.push(cand.iter().map(|&(_, j)| j).collect());
    }
    Ok(out)
}

/// Centers the cloud at its centroid and scales the farthest point to norm 1.
/// A cloud of coincident points is only centered.
pub fn normalize_to_unit_sphere(cloud: &PointCloud) -> PointCloud {
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in cloud.points() {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    centroid.iter_mut().for_each(|c| *c /= n);
    let centered: Vec<Point> = cloud.points().iter().map(|&p| sub(p, centroid)).collect();
    let extent = centered.iter().map(|&p| norm(p)).fold(0.0, f64::max);
    if extent > 0.0 {
        cloud.map_points(centered.into_iter().map(|p| scale(p, 1.0 / extent)).collect())
    } else {
        cloud.map_points(centered)
    }
}

#[inline]
pub fn sq_dist(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

#[inline]
pub(crate) fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Point, b: Point) -> Point {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

/// Index of the nearest point in `cloud` to `query`, lowest index on ties.
pub fn nearest_index(query: Point, cloud: &[Point]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &q) in cloud.iter().enumerate() {
        let d = sq_dist(query, q);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}
