//! Post-training products: oriented normals by local gradient aggregation,
//! denoised clouds by one-step projection, and iso-surface meshes.

mod mesh;

pub use mesh::{extract_mesh, MeshError, MeshGrid, TriangleMesh};

use crate::field::{unit_or_fallback, SignedField};
use crate::geom::{NeighborIndex, PointCloud, Vec3};
use crate::loss::EPS_OPPOSED;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InferError {
    #[error("invalid aggregation config: {0}")]
    ConfigInvalid(String),
}

/// Neighborhood-aggregation parameters for normal inference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregationConfig {
    /// Neighbor count.
    pub kappa: usize,
    /// Angle scale of the alignment weight, radians.
    pub theta: f64,
    /// Include sampled queries alongside the raw points.
    pub use_query_augmentation: bool,
    /// When false, normals are the raw field gradients at each point.
    pub aggregate: bool,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            kappa: 8,
            theta: std::f64::consts::PI / 12.0,
            use_query_augmentation: true,
            aggregate: true,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<(), InferError> {
        if self.kappa < 1 {
            return Err(InferError::ConfigInvalid("kappa must be at least 1".into()));
        }
        if !(self.theta > 0.0 && self.theta < std::f64::consts::PI) {
            return Err(InferError::ConfigInvalid("theta must lie in (0, pi)".into()));
        }
        Ok(())
    }
}

/// How each output normal was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalProvenance {
    Aggregated,
    RawGradient,
}

/// Unit normals aligned with the cloud's point order.
#[derive(Debug, Clone)]
pub struct OrientedNormals {
    pub normals: Vec<Vec3>,
    pub provenance: Vec<NormalProvenance>,
}

/// Neighbor weight: `exp(−δ − φ)` with
/// `φ = ((1 − cos)/(1 − cos ϑ))²`. Decreases in both the distance and the
/// angle to the center normal and lies in `(0, 1]`.
pub fn mu_weight(delta: f64, cos_to_center: f64, theta: f64) -> f64 {
    let phi = ((1.0 - cos_to_center) / (1.0 - theta.cos())).powi(2);
    (-delta - phi).exp()
}

/// Averaged projection normals for a point set, batched.
fn averaged_normals<F: SignedField + ?Sized>(
    field: &F,
    points: &[Vec3],
) -> (Vec<Vec3>, Vec<bool>) {
    let n = points.len();
    let mut values = vec![0.0; n];
    let mut grads = vec![Vec3::zeros(); n];
    field.value_grad_batch(points, &mut values, &mut grads);

    let mut degenerate = vec![false; n];
    let mut projected = Vec::with_capacity(n);
    let mut unit = Vec::with_capacity(n);
    for i in 0..n {
        let (u, d) = unit_or_fallback(&grads[i]);
        degenerate[i] = d;
        unit.push(u);
        projected.push(points[i] - u * values[i]);
    }

    let mut pvalues = vec![0.0; n];
    let mut pgrads = vec![Vec3::zeros(); n];
    field.value_grad_batch(&projected, &mut pvalues, &mut pgrads);

    let mut nbar = Vec::with_capacity(n);
    for i in 0..n {
        let (u2, d2) = unit_or_fallback(&pgrads[i]);
        degenerate[i] |= d2;
        let sum = unit[i] + u2;
        if sum.norm() < EPS_OPPOSED {
            nbar.push(unit[i]);
        } else {
            nbar.push(sum / sum.norm());
        }
    }
    (nbar, degenerate)
}

/// Oriented normals for every cloud point by weighted aggregation of the
/// averaged projection normals over the `kappa` nearest neighbors in the
/// combined point-plus-query set.
pub fn infer_normals<F: SignedField + ?Sized>(
    field: &F,
    cloud: &PointCloud,
    queries: Option<&[Vec3]>,
    cfg: &AggregationConfig,
) -> Result<OrientedNormals, InferError> {
    cfg.validate()?;
    let n = cloud.len();

    if !cfg.aggregate {
        // Ablation: the raw field gradient at each point is the normal.
        let mut values = vec![0.0; n];
        let mut grads = vec![Vec3::zeros(); n];
        field.value_grad_batch(&cloud.points, &mut values, &mut grads);
        let mut normals = Vec::with_capacity(n);
        for g in &grads {
            let (u, _) = unit_or_fallback(g);
            normals.push(u);
        }
        return Ok(OrientedNormals {
            normals,
            provenance: vec![NormalProvenance::RawGradient; n],
        });
    }

    let mut combined: Vec<Vec3> = cloud.points.clone();
    if cfg.use_query_augmentation {
        if let Some(q) = queries {
            combined.extend_from_slice(q);
        }
    }

    let (nbar, degenerate) = averaged_normals(field, &combined);
    let index = NeighborIndex::build(&combined);

    let mut normals = Vec::with_capacity(n);
    let mut provenance = Vec::with_capacity(n);
    for i in 0..n {
        let center = nbar[i];
        let hits = index.knn(&cloud.points[i], cfg.kappa + 1);
        let mut acc = center;
        let mut taken = 0;
        for (j, delta) in hits {
            if j == i {
                continue;
            }
            if taken == cfg.kappa {
                break;
            }
            let cos = nbar[j].dot(&center);
            acc += nbar[j] * mu_weight(delta, cos, cfg.theta);
            taken += 1;
        }
        let averaged = acc / (cfg.kappa as f64 + 1.0);
        let len = averaged.norm();
        let out = if len < EPS_OPPOSED { center } else { averaged / len };
        normals.push(out);
        provenance.push(if degenerate[i] {
            NormalProvenance::RawGradient
        } else {
            NormalProvenance::Aggregated
        });
    }
    Ok(OrientedNormals { normals, provenance })
}

/// One projection step for every raw point: `p' = p − f(p)·n_p`. Repeated
/// calls apply further rounds.
pub fn denoise<F: SignedField + ?Sized>(field: &F, cloud: &PointCloud) -> PointCloud {
    let n = cloud.len();
    let mut values = vec![0.0; n];
    let mut grads = vec![Vec3::zeros(); n];
    field.value_grad_batch(&cloud.points, &mut values, &mut grads);
    let points = (0..n)
        .map(|i| {
            let (u, _) = unit_or_fallback(&grads[i]);
            cloud.points[i] - u * values[i]
        })
        .collect();
    PointCloud { points, gt_normals: cloud.gt_normals.clone(), name: cloud.name.clone() }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::shapes::{SphereField, SyntheticShape, ShapeKind};

    #[test]
    fn config_validation() {
        assert!(AggregationConfig::default().validate().is_ok());
        assert!(AggregationConfig { kappa: 0, ..Default::default() }.validate().is_err());
        assert!(AggregationConfig { theta: 0.0, ..Default::default() }.validate().is_err());
        assert!(
            AggregationConfig { theta: std::f64::consts::PI, ..Default::default() }
                .validate()
                .is_err()
        );
    }

    #[test]
    fn mu_weight_bounds_and_monotonicity() {
        let theta = std::f64::consts::PI / 12.0;
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let delta = k as f64 * 0.3;
            let w = mu_weight(delta, 1.0, theta);
            assert!(w > 0.0 && w <= 1.0);
            assert!(w < prev || k == 0);
            prev = w;
        }
        let mut prev = f64::INFINITY;
        for k in 0..20 {
            let cos = 1.0 - k as f64 * 0.1;
            let w = mu_weight(0.0, cos, theta);
            assert!(w > 0.0 && w <= 1.0);
            assert!(w < prev || k == 0, "mu must decrease with angle");
            prev = w;
        }
    }

    #[test]
    fn parallel_neighbors_keep_direction() {
        // On an exact sphere field all averaged normals are radial, so a
        // tight cap of points has nearly-parallel normals and the
        // aggregated direction matches the center's own.
        let field = SphereField { radius: 1.0 };
        let shape = SyntheticShape::new(ShapeKind::Sphere);
        let cloud = shape.sample(200, 3);
        let out = infer_normals(&field, &cloud, None, &AggregationConfig::default()).unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            let radial = -p / p.norm(); // gradient points inward
            let angle = out.normals[i].dot(&radial).clamp(-1.0, 1.0).acos().to_degrees();
            assert!(angle < 1.0, "point {i}: angle {angle}");
            assert_eq!(out.provenance[i], NormalProvenance::Aggregated);
        }
    }

    #[test]
    fn normals_are_unit_length() {
        let field = SphereField { radius: 1.0 };
        let cloud = SyntheticShape::new(ShapeKind::Torus).sample(300, 5);
        let out = infer_normals(&field, &cloud, None, &AggregationConfig::default()).unwrap();
        for n in &out.normals {
            assert!((n.norm() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn aggregation_off_uses_raw_gradients() {
        let field = SphereField { radius: 1.0 };
        let cloud = SyntheticShape::new(ShapeKind::Sphere).sample(50, 9);
        let cfg = AggregationConfig { aggregate: false, ..Default::default() };
        let out = infer_normals(&field, &cloud, None, &cfg).unwrap();
        for (i, p) in cloud.points.iter().enumerate() {
            let expect = -p / p.norm();
            assert!((out.normals[i] - expect).norm() < 1e-9);
            assert_eq!(out.provenance[i], NormalProvenance::RawGradient);
        }
    }

    #[test]
    fn far_neighbors_are_suppressed() {
        // neighbors beyond distance 10 contribute e^-10-scale weights
        let field = SphereField { radius: 1.0 };
        let mut pts = vec![Vec3::new(0.0, 0.0, 1.0)];
        for k in 0..8 {
            let angle = k as f64;
            pts.push(Vec3::new(15.0 + angle.cos(), angle.sin(), 1.0));
        }
        let cloud = PointCloud::new(pts, "far").unwrap();
        let cfg = AggregationConfig { kappa: 8, ..Default::default() };
        let out = infer_normals(&field, &cloud, None, &cfg).unwrap();
        // center point normal vs its own averaged normal (radial at z=1)
        let center = Vec3::new(0.0, 0.0, -1.0);
        let angle = out.normals[0].dot(&center).clamp(-1.0, 1.0).acos().to_degrees();
        assert!(angle < 1.0, "far neighbors shifted the normal by {angle} degrees");
    }

    #[test]
    fn aggregation_is_permutation_invariant() {
        let field = SphereField { radius: 1.0 };
        let shape = SyntheticShape::new(ShapeKind::Sphere);
        let cloud = shape.sample(100, 11);
        let queries: Vec<Vec3> = shape.sample(100, 13).points;
        let cfg = AggregationConfig::default();
        let a = infer_normals(&field, &cloud, Some(&queries), &cfg).unwrap();
        // permute the augmentation queries; neighbor sums must not change
        let mut permuted = queries.clone();
        permuted.reverse();
        let b = infer_normals(&field, &cloud, Some(&permuted), &cfg).unwrap();
        for (x, y) in a.normals.iter().zip(b.normals.iter()) {
            assert!((x - y).norm() < 1e-9);
        }
    }

    #[test]
    fn denoise_keeps_surface_points_fixed() {
        let field = SphereField { radius: 1.0 };
        let cloud = SyntheticShape::new(ShapeKind::Sphere).sample(100, 17);
        let out = denoise(&field, &cloud);
        assert_eq!(out.len(), cloud.len());
        for (a, b) in cloud.points.iter().zip(out.points.iter()) {
            assert!((a - b).norm() < 1e-5);
        }
    }

    #[test]
    fn denoise_projects_noisy_points_onto_sphere() {
        let field = SphereField { radius: 1.0 };
        let mut cloud = SyntheticShape::new(ShapeKind::Sphere).sample(200, 19);
        let mut r = crate::rng::stream(7, "noise", 0);
        for p in &mut cloud.points {
            *p += Vec3::new(
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
            ) * 0.05;
        }
        let out = denoise(&field, &cloud);
        for p in &out.points {
            assert!((p.norm() - 1.0).abs() < 1e-9);
        }
    }
}
