//! Point-cloud container and the geometric preprocessing pipeline.

pub mod hilbert;
mod patches;
mod sampling;

pub use patches::{build_patches, serialize_keypoints, PatchSet};
pub use sampling::{farthest_point_sample, farthest_point_sample_from, knn};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Point3, b: Point3) -> Point3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scaled(a: Point3, s: f64) -> Point3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Point3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: Point3, b: Point3) -> f64 {
    let d = sub(a, b);
    dot(d, d)
}

/// Non-empty, finite, ordered set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    /// Builds a cloud from a flat `[x0, y0, z0, x1, ...]` buffer.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if !flat.len().is_multiple_of(3) {
            return Err(Error::Shape {
                op: "point cloud",
                lhs: vec![flat.len()],
                rhs: vec![3],
            });
        }
        Self::new(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    // A cloud is never empty; kept for API symmetry with `len`.
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn get(&self, i: usize) -> Point3 {
        self.points[i]
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn centroid(&self) -> Point3 {
        let n = self.points.len() as f64;
        let s = self.points.iter().fold([0.0; 3], |acc, &p| add(acc, p));
        scaled(s, 1.0 / n)
    }

    /// New cloud made of the points at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.points[i]).collect())
    }

    pub fn map(&self, f: impl Fn(Point3) -> Point3) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Centers on the centroid and scales so the farthest point has norm 1.
    ///
    /// A cloud whose points all coincide keeps scale 1.
    pub fn normalize_unit(&self) -> (PointCloud, Normalization) {
        let centroid = self.centroid();
        let radius = self
            .points
            .iter()
            .map(|&p| norm(sub(p, centroid)))
            .fold(0.0, f64::max);
        let scale = if radius > 0.0 { radius } else { 1.0 };
        let t = Normalization { centroid, scale };
        (self.map(|p| t.apply(p)), t)
    }
}

/// The transform applied by [`PointCloud::normalize_unit`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub centroid: Point3,
    pub scale: f64,
}

impl Normalization {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        scaled(sub(p, self.centroid), 1.0 / self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        add(scaled(p, self.scale), self.centroid)
    }
}
