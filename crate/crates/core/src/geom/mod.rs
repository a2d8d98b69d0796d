//! Point-cloud containers, normalization, and spatial queries.

mod kdtree;
mod sample;

pub use kdtree::NeighborIndex;
pub use sample::{sample_queries, sample_queries_from_sources, xi_distances, QueryBatch};

use thiserror::Error;

/// 3-vector used throughout the geometry layer (64-bit).
pub type Vec3 = nalgebra::Vector3<f64>;

/// Minimum sigma in model units; keeps Gaussian sampling well-defined on
/// duplicated points.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("point cloud needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("ground-truth normals length {normals} does not match point count {points}")]
    NormalsLengthMismatch { points: usize, normals: usize },
    #[error("ground-truth normal {index} has zero length")]
    ZeroNormal { index: usize },
    #[error("degenerate cloud: bounding-box diagonal is zero or not finite")]
    DegenerateCloud,
    #[error("point {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("xi = {xi} must be positive and smaller than the point count {points}")]
    InvalidXi { xi: usize, points: usize },
}

/// A point cloud with optional ground-truth normals (evaluation only).
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub gt_normals: Option<Vec<Vec3>>,
    pub name: String,
}

impl PointCloud {
    /// Builds a cloud; requires at least 4 finite points.
    pub fn new(points: Vec<Vec3>, name: impl Into<String>) -> Result<Self, GeomError> {
        if points.len() < 4 {
            return Err(GeomError::TooFewPoints { needed: 4, got: points.len() });
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(GeomError::NonFinitePoint { index: i });
            }
        }
        Ok(Self { points, gt_normals: None, name: name.into() })
    }

    /// Attaches ground-truth normals, re-normalizing each to unit length.
    pub fn with_normals(mut self, normals: Vec<Vec3>) -> Result<Self, GeomError> {
        if normals.len() != self.points.len() {
            return Err(GeomError::NormalsLengthMismatch {
                points: self.points.len(),
                normals: normals.len(),
            });
        }
        let mut unit = Vec::with_capacity(normals.len());
        for (i, n) in normals.iter().enumerate() {
            let len = n.norm();
            if len <= 0.0 || !len.is_finite() {
                return Err(GeomError::ZeroNormal { index: i });
            }
            unit.push(n / len);
        }
        self.gt_normals = Some(unit);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Axis-aligned bounding box as (min, max).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = self.points[0];
        let mut hi = self.points[0];
        for p in &self.points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        (lo, hi)
    }

    /// Euclidean length of the bounding-box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }
}

/// Similarity transform mapping original coordinates to model units:
/// `model = (original - center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform {
    pub center: Vec3,
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn identity() -> Self {
        Self { center: Vec3::zeros(), scale: 1.0 }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - self.center) / self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p * self.scale + self.center
    }
}

/// Centers a cloud on its bounding-box center and scales so the largest
/// half-extent is 1; all output coordinates lie in `[-1, 1]`.
pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizationTransform), GeomError> {
    let (lo, hi) = cloud.bounds();
    let center = (lo + hi) / 2.0;
    let half = (hi - lo) / 2.0;
    let scale = half.iter().fold(0.0f64, |m, h| m.max(*h));
    if scale <= 0.0 || !scale.is_finite() {
        return Err(GeomError::DegenerateCloud);
    }
    let transform = NormalizationTransform { center, scale };
    let points = cloud.points.iter().map(|p| transform.apply(p)).collect();
    let out = PointCloud {
        points,
        gt_normals: cloud.gt_normals.clone(),
        name: cloud.name.clone(),
    };
    Ok((out, transform))
}
