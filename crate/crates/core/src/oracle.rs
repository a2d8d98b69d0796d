//! Slow reference implementations used by the test suites.
//!
//! Everything here favors obviousness over speed and stays independent of
//! the main implementation paths: the reference network runs scalar f64
//! forward passes and finite-difference input gradients, neighbor queries
//! are exhaustive scans, and distances are direct double loops. Tests
//! compare the fast paths against these.

use crate::geom::Vec3;
use crate::loss::{AblationFlags, LossWeights, ScaleSet};
use crate::net::{Activation, FieldNetwork, NetConfig};

/// Exhaustive k-nearest-neighbor scan ordered by `(distance, index)`.
pub fn brute_knn(points: &[Vec3], query: &Vec3, k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> =
        points.iter().enumerate().map(|(i, p)| (i, (p - query).norm())).collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Scalar 64-bit replica of a [`FieldNetwork`] for finite-difference
/// oracles. Parameters are widened exactly; the forward pass is a plain
/// per-point loop.
pub struct RefNet {
    config: NetConfig,
    weights: Vec<Vec<Vec<f64>>>,
    biases: Vec<Vec<f64>>,
}

impl From<&FieldNetwork> for RefNet {
    fn from(net: &FieldNetwork) -> Self {
        let flat = net.params_flat();
        Self::from_flat(&net.config, &flat)
    }
}

impl RefNet {
    /// Builds the replica from flat parameters (widened to f64).
    pub fn from_flat(config: &NetConfig, flat: &[f32]) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut ofs = 0;
        for l in 0..=config.hidden_layers {
            let (rows, cols) = (config.out_dim(l), config.in_dim(l));
            let mut w = vec![vec![0.0f64; cols]; rows];
            for r in w.iter_mut() {
                for v in r.iter_mut() {
                    *v = flat[ofs] as f64;
                    ofs += 1;
                }
            }
            let mut b = vec![0.0f64; rows];
            for v in b.iter_mut() {
                *v = flat[ofs] as f64;
                ofs += 1;
            }
            weights.push(w);
            biases.push(b);
        }
        Self { config: config.clone(), weights, biases }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        let act = Activation { beta: self.config.beta };
        let input0 = [x[0], x[1], x[2]];
        let mut z: Vec<f64> = input0.to_vec();
        for l in 0..=self.config.hidden_layers {
            let mut input = z;
            if l == self.config.skip_at {
                input.extend_from_slice(&input0);
            }
            let rows = self.weights[l].len();
            let mut a = vec![0.0f64; rows];
            for r in 0..rows {
                let mut acc = self.biases[l][r];
                for (c, w) in self.weights[l][r].iter().enumerate() {
                    acc += w * input[c];
                }
                a[r] = acc;
            }
            if l < self.config.hidden_layers {
                for v in a.iter_mut() {
                    *v = act.value(*v);
                }
            }
            z = a;
        }
        z[0]
    }

    pub fn values(&self, xs: &[Vec3]) -> Vec<f64> {
        xs.iter().map(|x| self.value(x)).collect()
    }

    /// Input gradient by central differences in f64.
    pub fn grad_fd(&self, x: &Vec3) -> Vec3 {
        let h = 1e-5;
        let mut g = Vec3::zeros();
        for c in 0..3 {
            let mut hi = *x;
            let mut lo = *x;
            hi[c] += h;
            lo[c] -= h;
            g[c] = (self.value(&hi) - self.value(&lo)) / (2.0 * h);
        }
        g
    }

    fn unit_grad(&self, x: &Vec3) -> Vec3 {
        let g = self.grad_fd(x);
        let n = g.norm();
        if n < crate::field::EPS_GRAD {
            Vec3::from(crate::field::FALLBACK_NORMAL)
        } else {
            g / n
        }
    }
}

/// Reference composite loss mirroring the training objective, computed
/// entirely through [`RefNet`] with exhaustive neighbor scans. Used for
/// parameter-perturbation finite differences.
pub fn ref_total_loss(
    rn: &RefNet,
    cloud: &[Vec3],
    queries: &[Vec3],
    sources: &[usize],
    weights: &LossWeights,
    scales: &ScaleSet,
    flags: &AblationFlags,
) -> f64 {
    let n = queries.len();
    let nf = n as f64;
    let ps: Vec<Vec3> = sources.iter().map(|s| cloud[*s]).collect();

    struct Rec {
        f_q: f64,
        n_q: Vec3,
        qp: Vec3,
        n_qp: Vec3,
    }
    let recs: Vec<Rec> = queries
        .iter()
        .map(|q| {
            let f_q = rn.value(q);
            let n_q = rn.unit_grad(q);
            let qp = q - n_q * f_q;
            let n_qp = rn.unit_grad(&qp);
            Rec { f_q, n_q, qp, n_qp }
        })
        .collect();

    let mut total = 0.0;

    if flags.sd {
        let mut sum = 0.0;
        for (i, r) in recs.iter().enumerate() {
            sum += weights.surface_sd_weight * rn.value(&r.qp).powi(2)
                + r.f_q.powi(2)
                + rn.value(&ps[i]).powi(2);
        }
        total += sum / nf;
    }

    if flags.ld || flags.pd {
        let mut sum = 0.0;
        for p in &ps {
            // nearest projected point, ties to the lowest index
            let mut best = (f64::INFINITY, 0usize);
            for (j, r) in recs.iter().enumerate() {
                let d = (r.qp - p).norm();
                if d < best.0 {
                    best = (d, j);
                }
            }
            let r = &recs[best.1];
            let diff = r.qp - p;
            if flags.ld {
                sum += diff.norm();
            }
            if flags.pd {
                let n_p = rn.unit_grad(p);
                sum += diff.dot(&n_p).abs() + diff.dot(&r.n_qp).abs();
            }
        }
        total += weights.lambda1 * sum / nf;
    }

    if flags.n {
        let mut sum = 0.0;
        for r in &recs {
            let w = (-weights.rho * r.f_q.abs()).exp();
            sum += (1.0 - r.n_qp.dot(&r.n_q)) * w;
        }
        total += weights.lambda2 * sum / nf;
    }

    if flags.v {
        for &k in &scales.scales {
            let mut sum = 0.0;
            for (i, r) in recs.iter().enumerate() {
                let nn = brute_knn(cloud, &queries[i], k);
                let mut centroid = Vec3::zeros();
                for (j, _) in &nn {
                    centroid += cloud[*j];
                }
                let h = queries[i] - centroid / k as f64;
                let sum_n = r.n_q + r.n_qp;
                let nbar = if sum_n.norm() < 1e-9 { r.n_q } else { sum_n / sum_n.norm() };
                sum += (nbar * r.f_q - h).norm();
            }
            total += sum / nf;
        }
    }

    total
}

/// Symmetric Chamfer distance by exhaustive double loop.
/// L1 averages distances; L2 averages squared distances.
pub fn chamfer_brute(a: &[Vec3], b: &[Vec3], squared: bool) -> f64 {
    let dir = |from: &[Vec3], to: &[Vec3]| -> f64 {
        let mut total = 0.0;
        for p in from {
            let mut best = f64::INFINITY;
            for q in to {
                let d = (p - q).norm();
                if d < best {
                    best = d;
                }
            }
            total += if squared { best * best } else { best };
        }
        total / from.len() as f64
    };
    0.5 * (dir(a, b) + dir(b, a))
}

/// Closest point on a triangle via unconstrained least squares followed by
/// explicit edge clamping (distinct from the region-walk used by the fast
/// path).
pub fn closest_point_on_triangle_brute(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> Vec3 {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let m11 = ab.dot(&ab);
    let m12 = ab.dot(&ac);
    let m22 = ac.dot(&ac);
    let r1 = ab.dot(&ap);
    let r2 = ac.dot(&ap);
    let det = m11 * m22 - m12 * m12;
    if det.abs() > 1e-300 {
        let s = (m22 * r1 - m12 * r2) / det;
        let t = (m11 * r2 - m12 * r1) / det;
        if s >= 0.0 && t >= 0.0 && s + t <= 1.0 {
            return a + ab * s + ac * t;
        }
    }
    // Otherwise the closest point lies on one of the edges.
    let seg = |u: &Vec3, v: &Vec3| -> Vec3 {
        let d = v - u;
        let len2 = d.norm_squared();
        if len2 == 0.0 {
            return *u;
        }
        let t = ((p - u).dot(&d) / len2).clamp(0.0, 1.0);
        u + d * t
    };
    let candidates = [seg(a, b), seg(b, c), seg(c, a)];
    let mut best = candidates[0];
    let mut best_d = (p - best).norm_squared();
    for cand in &candidates[1..] {
        let d = (p - cand).norm_squared();
        if d < best_d {
            best_d = d;
            best = *cand;
        }
    }
    best
}

/// Mean point-to-mesh distance by scanning every triangle.
pub fn point_to_mesh_brute(points: &[Vec3], vertices: &[Vec3], triangles: &[[usize; 3]]) -> f64 {
    let mut total = 0.0;
    for p in points {
        let mut best = f64::INFINITY;
        for t in triangles {
            let q = closest_point_on_triangle_brute(
                p,
                &vertices[t[0]],
                &vertices[t[1]],
                &vertices[t[2]],
            );
            let d = (p - q).norm();
            if d < best {
                best = d;
            }
        }
        total += best;
    }
    total / points.len() as f64
}

/// Error function, Abramowitz & Stegun 7.1.26 (|error| < 1.5e-7).
pub fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// CDF of the chi distribution with 3 degrees of freedom.
pub fn chi3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    erf(x / std::f64::consts::SQRT_2)
        - (2.0 / std::f64::consts::PI).sqrt() * x * (-x * x / 2.0).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refnet_matches_fast_forward() {
        let config = NetConfig { hidden_width: 16, hidden_layers: 3, skip_at: 1, ..NetConfig::default() };
        let net = FieldNetwork::init_geometric(&config, 77).unwrap();
        let rn = RefNet::from(&net);
        let mut r = crate::rng::stream(1, "refnet", 0);
        for _ in 0..50 {
            let x = Vec3::new(
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
                crate::rng::standard_normal(&mut r),
            );
            let fast = net.value(&x);
            let slow = rn.value(&x);
            assert!((fast - slow).abs() < 1e-4, "fast {fast} vs ref {slow}");
        }
    }

    #[test]
    fn erf_known_values() {
        assert!((erf(0.0)).abs() < 1e-9);
        assert!((erf(1.0) - 0.8427007929).abs() < 2e-7);
        assert!((erf(-1.0) + 0.8427007929).abs() < 2e-7);
        assert!((erf(3.0) - 0.9999779095).abs() < 2e-7);
    }

    #[test]
    fn chi3_cdf_is_monotone() {
        let mut prev = 0.0;
        let mut x = 0.0;
        while x < 5.0 {
            let v = chi3_cdf(x);
            assert!(v >= prev - 1e-12);
            assert!((0.0..=1.0).contains(&v));
            prev = v;
            x += 0.05;
        }
        assert!(chi3_cdf(5.0) > 0.99);
    }

    #[test]
    fn closest_point_interior_and_edges() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        // above the interior
        let q = closest_point_on_triangle_brute(&Vec3::new(0.2, 0.2, 1.0), &a, &b, &c);
        assert!((q - Vec3::new(0.2, 0.2, 0.0)).norm() < 1e-12);
        // beyond vertex b
        let q = closest_point_on_triangle_brute(&Vec3::new(2.0, -0.5, 0.0), &a, &b, &c);
        assert!((q - b).norm() < 1e-12);
        // beside edge ab
        let q = closest_point_on_triangle_brute(&Vec3::new(0.5, -1.0, 0.0), &a, &b, &c);
        assert!((q - Vec3::new(0.5, 0.0, 0.0)).norm() < 1e-12);
    }
}
