//! Gaussian query sampling around raw points.
//!
//! Each query is a raw point plus isotropic Gaussian noise whose standard
//! deviation adapts to local density: the distance from the point to its
//! xi-th nearest neighbor (self excluded).

use super::{GeomError, NeighborIndex, PointCloud, Vec3, SIGMA_FLOOR};
use crate::rng;
use rand::Rng;

/// Sampled noisy queries with their per-query sigma and source point index.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub queries: Vec<Vec3>,
    pub sigmas: Vec<f64>,
    pub source_indices: Vec<usize>,
}

impl QueryBatch {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Per-point sigma: distance from each cloud point to its xi-th nearest
/// neighbor, excluding the point itself, clamped to [`SIGMA_FLOOR`].
pub fn xi_distances(
    cloud: &PointCloud,
    index: &NeighborIndex,
    xi: usize,
) -> Result<Vec<f64>, GeomError> {
    let n = cloud.len();
    if xi == 0 || xi >= n {
        return Err(GeomError::InvalidXi { xi, points: n });
    }
    let mut out = Vec::with_capacity(n);
    for (i, p) in cloud.points.iter().enumerate() {
        // k = xi + 1 so the xi-th non-self neighbor survives even when the
        // point matches itself at distance zero. Duplicate coordinates can
        // still shadow the self entry; drop exactly one index-i hit.
        let hits = index.knn(p, xi + 1);
        let mut skipped_self = false;
        let mut rank = 0usize;
        let mut sigma = None;
        for (j, d) in &hits {
            if !skipped_self && *j == i {
                skipped_self = true;
                continue;
            }
            rank += 1;
            if rank == xi {
                sigma = Some(*d);
                break;
            }
        }
        out.push(sigma.expect("xi < N guarantees enough neighbors").max(SIGMA_FLOOR));
    }
    Ok(out)
}

/// Draws `count` queries from uniformly chosen source points (with
/// replacement). Deterministic for a given seed.
pub fn sample_queries(
    cloud: &PointCloud,
    index: &NeighborIndex,
    count: usize,
    xi: usize,
    rng_seed: u64,
) -> Result<QueryBatch, GeomError> {
    let sigmas = xi_distances(cloud, index, xi)?;
    let mut r = rng::stream(rng_seed, "queries", 0);
    let sources: Vec<usize> = (0..count).map(|_| r.gen_range(0..cloud.len())).collect();
    Ok(sample_queries_from_sources(cloud, &sigmas, sources, &mut r))
}

/// Draws one Gaussian query per listed source point using `rng`.
pub fn sample_queries_from_sources<R: Rng>(
    cloud: &PointCloud,
    sigmas: &[f64],
    sources: Vec<usize>,
    rng: &mut R,
) -> QueryBatch {
    let mut queries = Vec::with_capacity(sources.len());
    let mut batch_sigmas = Vec::with_capacity(sources.len());
    for &s in &sources {
        let sigma = sigmas[s];
        let eps = Vec3::new(
            rng::standard_normal(rng) * sigma,
            rng::standard_normal(rng) * sigma,
            rng::standard_normal(rng) * sigma,
        );
        queries.push(cloud.points[s] + eps);
        batch_sigmas.push(sigma);
    }
    QueryBatch { queries, sigmas: batch_sigmas, source_indices: sources }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_cloud(n: usize, h: f64) -> PointCloud {
        let mut pts = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    pts.push(Vec3::new(x as f64 * h, y as f64 * h, z as f64 * h));
                }
            }
        }
        PointCloud::new(pts, "grid").unwrap()
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let cloud = grid_cloud(5, 0.1);
        let index = NeighborIndex::build(&cloud.points);
        let a = sample_queries(&cloud, &index, 200, 3, 99).unwrap();
        let b = sample_queries(&cloud, &index, 200, 3, 99).unwrap();
        assert_eq!(a.source_indices, b.source_indices);
        for (qa, qb) in a.queries.iter().zip(b.queries.iter()) {
            assert_eq!(qa.x.to_bits(), qb.x.to_bits());
            assert_eq!(qa.y.to_bits(), qb.y.to_bits());
            assert_eq!(qa.z.to_bits(), qb.z.to_bits());
        }
    }

    #[test]
    fn grid_spacing_gives_sigma_h() {
        let h = 0.25;
        let cloud = grid_cloud(4, h);
        let index = NeighborIndex::build(&cloud.points);
        let batch = sample_queries(&cloud, &index, 50, 1, 7).unwrap();
        for s in &batch.sigmas {
            assert!((s - h).abs() < 1e-12, "sigma {s} != {h}");
        }
    }

    #[test]
    fn invalid_xi_is_rejected() {
        let cloud = grid_cloud(2, 1.0);
        let index = NeighborIndex::build(&cloud.points);
        let n = cloud.len();
        assert!(matches!(
            sample_queries(&cloud, &index, 10, n, 1),
            Err(GeomError::InvalidXi { .. })
        ));
        assert!(matches!(
            xi_distances(&cloud, &index, 0),
            Err(GeomError::InvalidXi { .. })
        ));
    }

    #[test]
    fn sigma_matches_brute_force_xi_distance() {
        let mut r = crate::rng::stream(5, "sigma", 0);
        let pts: Vec<Vec3> = (0..300)
            .map(|_| {
                Vec3::new(
                    crate::rng::standard_normal(&mut r),
                    crate::rng::standard_normal(&mut r),
                    crate::rng::standard_normal(&mut r),
                )
            })
            .collect();
        let cloud = PointCloud::new(pts.clone(), "rand").unwrap();
        let index = NeighborIndex::build(&cloud.points);
        let xi = 8;
        let sigmas = xi_distances(&cloud, &index, xi).unwrap();
        for (i, p) in pts.iter().enumerate() {
            let mut ds: Vec<f64> = pts
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| (q - p).norm())
                .collect();
            ds.sort_by(f64::total_cmp);
            assert!((sigmas[i] - ds[xi - 1]).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_points_clamp_sigma() {
        let mut pts = vec![Vec3::new(0.5, 0.5, 0.5); 6];
        pts.push(Vec3::new(1.0, 0.0, 0.0));
        let cloud = PointCloud::new(pts, "dups").unwrap();
        let index = NeighborIndex::build(&cloud.points);
        let sigmas = xi_distances(&cloud, &index, 2).unwrap();
        assert_eq!(sigmas[0], SIGMA_FLOOR);
    }

    #[test]
    fn query_spread_tracks_configured_sigma() {
        // Empirical per-axis std over many seeds should match sigma within 10%.
        let mut pts = Vec::new();
        let mut r = crate::rng::stream(21, "sphere", 0);
        for _ in 0..2000 {
            let g = Vec3::new(
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
            );
            pts.push(g / g.norm());
        }
        let cloud = PointCloud::new(pts, "sphere").unwrap();
        let index = NeighborIndex::build(&cloud.points);
        let xi = 8;
        let sigmas = xi_distances(&cloud, &index, xi).unwrap();

        let mut sum_sq = vec![0.0f64; 3];
        let mut norm = 0.0f64;
        for seed in 0..100u64 {
            let batch = sample_queries(&cloud, &index, 500, xi, seed).unwrap();
            for (k, &src) in batch.source_indices.iter().enumerate() {
                let d = batch.queries[k] - cloud.points[src];
                for a in 0..3 {
                    sum_sq[a] += (d[a] / sigmas[src]).powi(2);
                }
                norm += 1.0;
            }
        }
        for a in 0..3 {
            let std = (sum_sq[a] / norm).sqrt();
            assert!((std - 1.0).abs() < 0.1, "axis {a} std {std}");
        }
    }
}
