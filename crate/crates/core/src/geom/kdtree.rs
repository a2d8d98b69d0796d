//! Exact k-nearest-neighbor index (kd-tree with leaf buckets).
//!
//! Results are exact and deterministic: neighbors are ordered by
//! `(distance, index)` so ties resolve to the lowest point index, matching
//! the brute-force oracle used in tests.

use super::Vec3;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, threshold: f64, left: usize, right: usize },
}

/// Immutable spatial index over a fixed point set; safe for concurrent reads.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vec3>,
    order: Vec<u32>,
    nodes: Vec<Node>,
    root: usize,
}

/// Max-heap entry ordered by (distance², index); the heap root is the
/// current worst candidate.
#[derive(PartialEq)]
struct Candidate {
    d2: f64,
    idx: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl NeighborIndex {
    /// Builds the index; `points` must be nonempty.
    pub fn build(points: &[Vec3]) -> Self {
        assert!(!points.is_empty(), "cannot index an empty point set");
        let mut tree = Self {
            points: points.to_vec(),
            order: (0..points.len() as u32).collect(),
            nodes: Vec::new(),
            root: 0,
        };
        let n = points.len();
        tree.root = tree.build_range(0, n);
        tree
    }

    /// Number of indexed points.
    pub fn source_size(&self) -> usize {
        self.points.len()
    }

    /// The indexed point at `i` (original input order).
    pub fn point(&self, i: usize) -> &Vec3 {
        &self.points[i]
    }

    fn build_range(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        // Split on the axis with the largest extent.
        let mut lo = self.points[self.order[start] as usize];
        let mut hi = lo;
        for &i in &self.order[start..end] {
            let p = self.points[i as usize];
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let mut axis = 0;
        for a in 1..3 {
            if hi[a] - lo[a] > hi[axis] - lo[axis] {
                axis = a;
            }
        }
        let mid = (start + end) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a as usize][axis]
                .total_cmp(&points[b as usize][axis])
                .then(a.cmp(&b))
        });
        let threshold = self.points[self.order[mid] as usize][axis];
        let left = self.build_range(start, mid);
        let right = self.build_range(mid, end);
        self.nodes.push(Node::Split { axis, threshold, left, right });
        self.nodes.len() - 1
    }

    /// The `k` nearest indexed points to `query`, sorted by non-decreasing
    /// distance (ties by index). `k` larger than the point count returns
    /// all points.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(self.points.len());
        if k == 0 {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.search(self.root, query, k, &mut heap);
        let mut out: Vec<(usize, f64)> = heap
            .into_iter()
            .map(|c| (c.idx as usize, c.d2.sqrt()))
            .collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn search(&self, node: usize, query: &Vec3, k: usize, heap: &mut BinaryHeap<Candidate>) {
        match &self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let d2 = (self.points[i as usize] - query).norm_squared();
                    let cand = Candidate { d2, idx: i };
                    if heap.len() < k {
                        heap.push(cand);
                    } else if cand < *heap.peek().unwrap() {
                        heap.pop();
                        heap.push(cand);
                    }
                }
            }
            Node::Split { axis, threshold, left, right } => {
                let delta = query[*axis] - threshold;
                let (near, far) = if delta < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, k, heap);
                let worst = heap.peek().map(|c| c.d2).unwrap_or(f64::INFINITY);
                if heap.len() < k || delta * delta <= worst {
                    self.search(far, query, k, heap);
                }
            }
        }
    }

    /// Nearest single neighbor.
    pub fn nearest(&self, query: &Vec3) -> (usize, f64) {
        self.knn(query, 1)[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::brute_knn;
    use crate::rng::{standard_normal, stream};

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    #[test]
    fn knn_orders_by_distance() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(3.0, 0.0, 0.0)];
        let idx = NeighborIndex::build(&pts);
        let r = idx.knn(&v(0.9, 0.0, 0.0), 2);
        assert_eq!(r[0].0, 1);
        assert_eq!(r[1].0, 0);
    }

    #[test]
    fn indexed_point_is_its_own_nearest() {
        let pts = vec![v(0.0, 0.0, 0.0), v(1.0, 2.0, 3.0), v(-1.0, 0.5, 0.0), v(4.0, 4.0, 4.0)];
        let idx = NeighborIndex::build(&pts);
        for (i, p) in pts.iter().enumerate() {
            let r = idx.knn(p, 1);
            assert_eq!(r[0].0, i);
            assert_eq!(r[0].1, 0.0);
        }
    }

    #[test]
    fn full_k_returns_all_sorted() {
        let pts = vec![v(0.0, 0.0, 0.0), v(2.0, 0.0, 0.0), v(1.0, 0.0, 0.0), v(5.0, 0.0, 0.0)];
        let idx = NeighborIndex::build(&pts);
        let r = idx.knn(&v(0.0, 0.0, 0.0), pts.len());
        assert_eq!(r.len(), pts.len());
        for w in r.windows(2) {
            assert!(w[0].1 <= w[1].1);
        }
    }

    #[test]
    fn matches_brute_force_on_random_cloud() {
        let mut rng = stream(11, "knn", 0);
        let pts: Vec<Vec3> = (0..2000)
            .map(|_| {
                v(
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                    standard_normal(&mut rng),
                )
            })
            .collect();
        let idx = NeighborIndex::build(&pts);
        for _ in 0..50 {
            let q = v(
                standard_normal(&mut rng),
                standard_normal(&mut rng),
                standard_normal(&mut rng),
            );
            let got = idx.knn(&q, 8);
            let want = brute_knn(&pts, &q, 8);
            assert_eq!(
                got.iter().map(|g| g.0).collect::<Vec<_>>(),
                want.iter().map(|w| w.0).collect::<Vec<_>>()
            );
            for (g, w) in got.iter().zip(want.iter()) {
                assert!((g.1 - w.1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let pts = vec![v(1.0, 1.0, 1.0), v(1.0, 1.0, 1.0), v(1.0, 1.0, 1.0), v(2.0, 0.0, 0.0)];
        let idx = NeighborIndex::build(&pts);
        let r = idx.knn(&v(1.0, 1.0, 1.0), 3);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
