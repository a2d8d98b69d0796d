//! Normal-error, Chamfer, and point-to-mesh metrics.

use crate::geom::{NeighborIndex, Vec3};
use crate::infer::TriangleMesh;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("thresholds must be sorted ascending")]
    UnsortedThresholds,
}

/// Angle between two unit vectors, degrees.
pub fn angle_degrees(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

fn per_point_angles(est: &[Vec3], gt: &[Vec3], oriented: bool) -> Result<Vec<f64>, MetricError> {
    if est.len() != gt.len() {
        return Err(MetricError::LengthMismatch { left: est.len(), right: gt.len() });
    }
    Ok(est
        .iter()
        .zip(gt.iter())
        .map(|(e, g)| {
            let a = angle_degrees(e, g);
            if oriented {
                a
            } else {
                a.min(180.0 - a)
            }
        })
        .collect())
}

/// RMSE over per-point normal angles, degrees. Unoriented mode folds each
/// angle to `min(angle, 180 − angle)`.
pub fn normal_rmse(est: &[Vec3], gt: &[Vec3], oriented: bool) -> Result<f64, MetricError> {
    let angles = per_point_angles(est, gt, oriented)?;
    let mean_sq = angles.iter().map(|a| a * a).sum::<f64>() / angles.len() as f64;
    Ok(mean_sq.sqrt())
}

/// Fraction of points with angular error at or below each threshold.
/// `thresholds` must be sorted ascending.
pub fn pgp_curve(
    est: &[Vec3],
    gt: &[Vec3],
    thresholds: &[f64],
    oriented: bool,
) -> Result<Vec<f64>, MetricError> {
    for w in thresholds.windows(2) {
        if w[1] < w[0] {
            return Err(MetricError::UnsortedThresholds);
        }
    }
    let angles = per_point_angles(est, gt, oriented)?;
    let n = angles.len() as f64;
    Ok(thresholds
        .iter()
        .map(|t| angles.iter().filter(|a| **a <= *t).count() as f64 / n)
        .collect())
}

/// Symmetric Chamfer distance. L1 averages nearest-neighbor distances,
/// L2 averages squared distances; both average the two directions.
pub fn chamfer(a: &[Vec3], b: &[Vec3], squared: bool) -> f64 {
    assert!(!a.is_empty() && !b.is_empty(), "chamfer needs nonempty sets");
    let dir = |from: &[Vec3], to_index: &NeighborIndex| -> f64 {
        let mut total = 0.0;
        for p in from {
            let (_, d) = to_index.nearest(p);
            total += if squared { d * d } else { d };
        }
        total / from.len() as f64
    };
    let ia = NeighborIndex::build(a);
    let ib = NeighborIndex::build(b);
    0.5 * (dir(a, &ib) + dir(b, &ia))
}

/// Closest point on a triangle (region walk over the barycentric domain).
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

struct BvhNode {
    min: Vec3,
    max: Vec3,
    // leaf: triangle range into order; inner: children ids
    content: BvhContent,
}

enum BvhContent {
    Leaf { start: usize, end: usize },
    Inner { left: usize, right: usize },
}

/// Bounding-volume hierarchy over mesh triangles for exact closest-point
/// queries with branch-and-bound pruning.
pub struct MeshDistance<'a> {
    mesh: &'a TriangleMesh,
    order: Vec<u32>,
    nodes: Vec<BvhNode>,
    root: usize,
}

impl<'a> MeshDistance<'a> {
    pub fn new(mesh: &'a TriangleMesh) -> Self {
        assert!(!mesh.triangles.is_empty(), "empty mesh");
        let centroids: Vec<Vec3> = mesh
            .triangles
            .iter()
            .map(|t| (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0)
            .collect();
        let mut s = Self {
            mesh,
            order: (0..mesh.triangles.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = s.order.len();
        s.root = s.build(0, n, &centroids);
        s
    }

    fn tri_bounds(&self, ti: usize) -> (Vec3, Vec3) {
        let t = &self.mesh.triangles[ti];
        let mut lo = self.mesh.vertices[t[0]];
        let mut hi = lo;
        for &vi in &t[1..] {
            let v = self.mesh.vertices[vi];
            for c in 0..3 {
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        (lo, hi)
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let mut lo = Vec3::from_element(f64::INFINITY);
        let mut hi = Vec3::from_element(f64::NEG_INFINITY);
        for &ti in &self.order[start..end] {
            let (tlo, thi) = self.tri_bounds(ti as usize);
            for c in 0..3 {
                lo[c] = lo[c].min(tlo[c]);
                hi[c] = hi[c].max(thi[c]);
            }
        }
        if end - start <= 8 {
            self.nodes.push(BvhNode { min: lo, max: hi, content: BvhContent::Leaf { start, end } });
            return self.nodes.len() - 1;
        }
        let mut axis = 0;
        for c in 1..3 {
            if hi[c] - lo[c] > hi[axis] - lo[axis] {
                axis = c;
            }
        }
        let mid = (start + end) / 2;
        self.order[start..end].select_nth_unstable_by(mid - start, |&x, &y| {
            centroids[x as usize][axis]
                .total_cmp(&centroids[y as usize][axis])
                .then(x.cmp(&y))
        });
        let left = self.build(start, mid, centroids);
        let right = self.build(mid, end, centroids);
        self.nodes.push(BvhNode { min: lo, max: hi, content: BvhContent::Inner { left, right } });
        self.nodes.len() - 1
    }

    fn box_dist_sq(node: &BvhNode, p: &Vec3) -> f64 {
        let mut d2 = 0.0;
        for c in 0..3 {
            let d = if p[c] < node.min[c] {
                node.min[c] - p[c]
            } else if p[c] > node.max[c] {
                p[c] - node.max[c]
            } else {
                0.0
            };
            d2 += d * d;
        }
        d2
    }

    /// Exact distance from `p` to the nearest triangle.
    pub fn distance(&self, p: &Vec3) -> f64 {
        let mut best = f64::INFINITY;
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if Self::box_dist_sq(node, p) >= best {
                continue;
            }
            match &node.content {
                BvhContent::Leaf { start, end } => {
                    for &ti in &self.order[*start..*end] {
                        let t = &self.mesh.triangles[ti as usize];
                        let q = closest_point_on_triangle(
                            p,
                            &self.mesh.vertices[t[0]],
                            &self.mesh.vertices[t[1]],
                            &self.mesh.vertices[t[2]],
                        );
                        let d2 = (p - q).norm_squared();
                        if d2 < best {
                            best = d2;
                        }
                    }
                }
                BvhContent::Inner { left, right } => {
                    // visit the nearer child first
                    let dl = Self::box_dist_sq(&self.nodes[*left], p);
                    let dr = Self::box_dist_sq(&self.nodes[*right], p);
                    if dl <= dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        best.sqrt()
    }
}

/// Mean exact distance from each point to its closest location on the mesh.
pub fn point_to_mesh(points: &[Vec3], mesh: &TriangleMesh) -> f64 {
    assert!(!points.is_empty(), "no query points");
    let dist = MeshDistance::new(mesh);
    points.iter().map(|p| dist.distance(p)).sum::<f64>() / points.len() as f64
}
