//! Marching-cubes extraction of the zero level set.
//!
//! The 256 cell cases are generated once at startup by tracing the
//! iso-contour segments across the cube's faces and stitching them into
//! closed loops, then fan-triangulating each loop. Ambiguous faces (two
//! diagonal corners inside) are resolved by a fixed rule — each segment
//! cuts off one inside arc — which is applied identically on both sides
//! of a shared face, so meshes are watertight. Vertices are welded by
//! global grid-edge identity, triangle winding points toward decreasing
//! field values (outward), and output ordering is a pure function of the
//! cell scan order.

use crate::field::SignedField;
use crate::geom::{NormalizationTransform, Vec3};
use std::collections::HashMap;
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("no zero crossing inside the grid bounds")]
    EmptyLevelSet,
    #[error("invalid mesh grid: {0}")]
    InvalidGrid(String),
}

/// Sampling lattice for extraction: cells per axis and model-space bounds.
#[derive(Debug, Clone, Copy)]
pub struct MeshGrid {
    pub resolution: [usize; 3],
    pub min: Vec3,
    pub max: Vec3,
}

impl Default for MeshGrid {
    fn default() -> Self {
        Self {
            resolution: [256, 256, 256],
            min: Vec3::new(-1.1, -1.1, -1.1),
            max: Vec3::new(1.1, 1.1, 1.1),
        }
    }
}

impl MeshGrid {
    pub fn cubic(resolution: usize, bound: f64) -> Self {
        Self {
            resolution: [resolution; 3],
            min: Vec3::new(-bound, -bound, -bound),
            max: Vec3::new(bound, bound, bound),
        }
    }

    pub fn validate(&self) -> Result<(), MeshError> {
        for a in 0..3 {
            if self.resolution[a] < 8 {
                return Err(MeshError::InvalidGrid(format!(
                    "resolution {} on axis {a} is below the minimum of 8",
                    self.resolution[a]
                )));
            }
            if !(self.max[a] > self.min[a]) {
                return Err(MeshError::InvalidGrid("empty bounds".into()));
            }
        }
        Ok(())
    }

    pub fn cell_size(&self) -> Vec3 {
        Vec3::new(
            (self.max.x - self.min.x) / self.resolution[0] as f64,
            (self.max.y - self.min.y) / self.resolution[1] as f64,
            (self.max.z - self.min.z) / self.resolution[2] as f64,
        )
    }
}

/// Indexed triangle mesh.
#[derive(Debug, Clone, Default)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    /// `V − E + F` with edges counted once per undirected pair.
    pub fn euler_characteristic(&self) -> i64 {
        let mut edges = std::collections::HashSet::new();
        for t in &self.triangles {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                edges.insert((a.min(b), a.max(b)));
            }
        }
        self.vertices.len() as i64 - edges.len() as i64 + self.triangles.len() as i64
    }

    pub fn triangle_area(&self, t: &[usize; 3]) -> f64 {
        let a = self.vertices[t[0]];
        let b = self.vertices[t[1]];
        let c = self.vertices[t[2]];
        (b - a).cross(&(c - a)).norm() / 2.0
    }

    pub fn triangle_normal(&self, t: &[usize; 3]) -> Vec3 {
        let a = self.vertices[t[0]];
        let b = self.vertices[t[1]];
        let c = self.vertices[t[2]];
        let n = (b - a).cross(&(c - a));
        let len = n.norm();
        if len > 0.0 {
            n / len
        } else {
            Vec3::zeros()
        }
    }

    /// Maps vertices back to original coordinates.
    pub fn map_back(&mut self, transform: &NormalizationTransform) {
        for v in &mut self.vertices {
            *v = transform.invert(v);
        }
    }
}

// Cube topology: corner coordinates and the edge/face incidence used by
// the table generator.
const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 0),
    (4, 5),
    (5, 6),
    (6, 7),
    (7, 4),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Face corner cycles, counterclockwise seen from outside the cube.
const FACES: [[usize; 4]; 6] = [
    [0, 3, 2, 1], // z = 0
    [4, 5, 6, 7], // z = 1
    [0, 1, 5, 4], // y = 0
    [2, 3, 7, 6], // y = 1
    [0, 4, 7, 3], // x = 0
    [1, 2, 6, 5], // x = 1
];

fn edge_id(a: usize, b: usize) -> u8 {
    for (i, (u, v)) in EDGES.iter().enumerate() {
        if (*u == a && *v == b) || (*u == b && *v == a) {
            return i as u8;
        }
    }
    unreachable!("corners {a},{b} do not share an edge");
}

struct McTables {
    tris: Vec<Vec<[u8; 3]>>,
}

fn generate_case(mask: usize) -> Vec<[u8; 3]> {
    if mask == 0 || mask == 255 {
        return Vec::new();
    }
    let inside = |c: usize| mask & (1 << c) != 0;

    // Directed segments (entry edge -> exit edge) per face: an entry is an
    // outside->inside transition along the face cycle; its segment ends at
    // the first inside->outside transition after the inside arc.
    let mut next: HashMap<u8, u8> = HashMap::new();
    for cycle in &FACES {
        for k in 0..4 {
            let a = cycle[k];
            let b = cycle[(k + 1) % 4];
            if !inside(a) && inside(b) {
                let entry = edge_id(a, b);
                let mut m = (k + 1) % 4;
                while inside(cycle[(m + 1) % 4]) {
                    m = (m + 1) % 4;
                }
                let exit = edge_id(cycle[m], cycle[(m + 1) % 4]);
                let prev = next.insert(entry, exit);
                assert!(prev.is_none(), "duplicate entry segment in case {mask}");
            }
        }
    }

    // Chain segments into closed loops; every crossing edge has exactly one
    // incoming and one outgoing segment.
    let mut tris = Vec::new();
    let mut remaining = next.clone();
    let mut starts: Vec<u8> = remaining.keys().copied().collect();
    starts.sort_unstable();
    for start in starts {
        if !remaining.contains_key(&start) {
            continue;
        }
        let mut loop_edges = vec![start];
        let mut cur = start;
        loop {
            let n = remaining.remove(&cur).expect("open contour in cube case");
            if n == start {
                break;
            }
            loop_edges.push(n);
            cur = n;
        }
        assert!(loop_edges.len() >= 3, "degenerate loop in case {mask}");
        for i in 1..loop_edges.len() - 1 {
            tris.push([loop_edges[0], loop_edges[i], loop_edges[i + 1]]);
        }
    }
    tris
}

fn tables() -> &'static McTables {
    static TABLES: OnceLock<McTables> = OnceLock::new();
    TABLES.get_or_init(|| McTables { tris: (0..256).map(generate_case).collect() })
}

/// Extracts the `f = 0` iso-surface as a welded triangle mesh. Triangle
/// winding points toward decreasing field values (outward under the
/// inside-positive convention).
pub fn extract_mesh<F: SignedField + ?Sized>(
    field: &F,
    grid: &MeshGrid,
) -> Result<TriangleMesh, MeshError> {
    grid.validate()?;
    let tabs = tables();
    let [nx, ny, nz] = grid.resolution;
    let cell = grid.cell_size();
    let slab_len = (nx + 1) * (ny + 1);

    let sample_slab = |iz: usize| -> Vec<f64> {
        let z = grid.min.z + cell.z * iz as f64;
        let mut pts = Vec::with_capacity(slab_len);
        for iy in 0..=ny {
            let y = grid.min.y + cell.y * iy as f64;
            for ix in 0..=nx {
                let x = grid.min.x + cell.x * ix as f64;
                pts.push(Vec3::new(x, y, z));
            }
        }
        let mut out = vec![0.0; slab_len];
        field.value_batch(&pts, &mut out);
        out
    };

    let corner_pos = |ix: usize, iy: usize, iz: usize| -> Vec3 {
        Vec3::new(
            grid.min.x + cell.x * ix as f64,
            grid.min.y + cell.y * iy as f64,
            grid.min.z + cell.z * iz as f64,
        )
    };

    let mut mesh = TriangleMesh::default();
    // global edge key -> welded vertex id
    let mut edge_vertex: HashMap<u64, usize> = HashMap::new();
    let edge_key = |ix: usize, iy: usize, iz: usize, axis: usize| -> u64 {
        (((iz * (ny + 1) + iy) * (nx + 1) + ix) * 3 + axis) as u64
    };

    let mut below = sample_slab(0);
    for iz in 0..nz {
        let above = sample_slab(iz + 1);
        for iy in 0..ny {
            for ix in 0..nx {
                let at = |dx: usize, dy: usize| (iy + dy) * (nx + 1) + (ix + dx);
                let values = [
                    below[at(0, 0)],
                    below[at(1, 0)],
                    below[at(1, 1)],
                    below[at(0, 1)],
                    above[at(0, 0)],
                    above[at(1, 0)],
                    above[at(1, 1)],
                    above[at(0, 1)],
                ];
                let mut mask = 0usize;
                for (c, v) in values.iter().enumerate() {
                    if *v > 0.0 {
                        mask |= 1 << c;
                    }
                }
                let case = &tabs.tris[mask];
                if case.is_empty() {
                    continue;
                }
                let mut cell_vertex = [usize::MAX; 12];
                for tri in case {
                    for &e in tri {
                        let e = e as usize;
                        if cell_vertex[e] != usize::MAX {
                            continue;
                        }
                        let (c0, c1) = EDGES[e];
                        let g0 = [
                            ix + CORNERS[c0][0],
                            iy + CORNERS[c0][1],
                            iz + CORNERS[c0][2],
                        ];
                        let g1 = [
                            ix + CORNERS[c1][0],
                            iy + CORNERS[c1][1],
                            iz + CORNERS[c1][2],
                        ];
                        let axis = (0..3).find(|a| g0[*a] != g1[*a]).expect("axis edge");
                        let base = [g0[0].min(g1[0]), g0[1].min(g1[1]), g0[2].min(g1[2])];
                        let key = edge_key(base[0], base[1], base[2], axis);
                        let id = *edge_vertex.entry(key).or_insert_with(|| {
                            let v0 = values[c0];
                            let v1 = values[c1];
                            let t = (v0 / (v0 - v1)).clamp(0.0, 1.0);
                            let p0 = corner_pos(g0[0], g0[1], g0[2]);
                            let p1 = corner_pos(g1[0], g1[1], g1[2]);
                            mesh.vertices.push(p0 + (p1 - p0) * t);
                            mesh.vertices.len() - 1
                        });
                        cell_vertex[e] = id;
                    }
                    mesh.triangles.push([
                        cell_vertex[tri[0] as usize],
                        cell_vertex[tri[1] as usize],
                        cell_vertex[tri[2] as usize],
                    ]);
                }
            }
        }
        below = above;
    }

    if mesh.triangles.is_empty() {
        return Err(MeshError::EmptyLevelSet);
    }
    weld_and_clean(&mut mesh);
    if mesh.triangles.is_empty() {
        return Err(MeshError::EmptyLevelSet);
    }
    Ok(mesh)
}

/// Merges bit-identical vertex positions (edge crossings that landed on a
/// shared grid corner) and drops zero-area triangles.
fn weld_and_clean(mesh: &mut TriangleMesh) {
    let mut canonical: HashMap<[u64; 3], usize> = HashMap::new();
    let mut remap = vec![0usize; mesh.vertices.len()];
    let mut kept: Vec<Vec3> = Vec::with_capacity(mesh.vertices.len());
    for (i, v) in mesh.vertices.iter().enumerate() {
        let key = [v.x.to_bits(), v.y.to_bits(), v.z.to_bits()];
        match canonical.get(&key) {
            Some(&id) => remap[i] = id,
            None => {
                kept.push(*v);
                let id = kept.len() - 1;
                canonical.insert(key, id);
                remap[i] = id;
            }
        }
    }
    mesh.vertices = kept;
    let mut tris = Vec::with_capacity(mesh.triangles.len());
    for t in &mesh.triangles {
        let t = [remap[t[0]], remap[t[1]], remap[t[2]]];
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        let area = {
            let a = mesh.vertices[t[0]];
            let b = mesh.vertices[t[1]];
            let c = mesh.vertices[t[2]];
            (b - a).cross(&(c - a)).norm() / 2.0
        };
        if area < 1e-12 {
            continue;
        }
        tris.push(t);
    }
    mesh.triangles = tris;

    // Drop unreferenced vertices so V - E + F is meaningful.
    let mut used = vec![false; mesh.vertices.len()];
    for t in &mesh.triangles {
        for &i in t {
            used[i] = true;
        }
    }
    let mut remap = vec![usize::MAX; mesh.vertices.len()];
    let mut kept = Vec::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        if used[i] {
            remap[i] = kept.len();
            kept.push(*v);
        }
    }
    mesh.vertices = kept;
    for t in &mut mesh.triangles {
        for i in t.iter_mut() {
            *i = remap[*i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::shapes::{SphereField, TorusField};

    #[test]
    fn all_cases_generate_consistent_loops() {
        let tabs = tables();
        for mask in 0..256usize {
            let tris = &tabs.tris[mask];
            if mask == 0 || mask == 255 {
                assert!(tris.is_empty());
                continue;
            }
            // the triangulated edges must exactly cover the crossing edges
            let mut crossing = std::collections::BTreeSet::new();
            for (e, (a, b)) in EDGES.iter().enumerate() {
                let ia = mask & (1 << a) != 0;
                let ib = mask & (1 << b) != 0;
                if ia != ib {
                    crossing.insert(e as u8);
                }
            }
            let mut seen = std::collections::BTreeSet::new();
            for t in tris {
                for &e in t {
                    seen.insert(e);
                }
            }
            assert_eq!(seen, crossing, "case {mask}");
        }
    }

    #[test]
    fn single_corner_case_orientation() {
        // only corner 0 inside: the surface normal points away from it
        let tris = generate_case(1);
        assert_eq!(tris.len(), 1);
        let mid = |e: u8| -> Vec3 {
            let (a, b) = EDGES[e as usize];
            let pa = Vec3::new(CORNERS[a][0] as f64, CORNERS[a][1] as f64, CORNERS[a][2] as f64);
            let pb = Vec3::new(CORNERS[b][0] as f64, CORNERS[b][1] as f64, CORNERS[b][2] as f64);
            (pa + pb) / 2.0
        };
        let [a, b, c] = tris[0];
        let (pa, pb, pc) = (mid(a), mid(b), mid(c));
        let n = (pb - pa).cross(&(pc - pa));
        let centroid = (pa + pb + pc) / 3.0;
        assert!(n.dot(&centroid) > 0.0, "normal should point away from corner 0");
    }

    #[test]
    fn sphere_mesh_radius_and_topology() {
        let field = SphereField { radius: 1.0 };
        let grid = MeshGrid::cubic(64, 1.1);
        let mesh = extract_mesh(&field, &grid).unwrap();
        let cell = grid.cell_size().x;
        for v in &mesh.vertices {
            assert!(
                (v.norm() - 1.0).abs() < 1.5 * cell,
                "vertex radius {} too far from 1",
                v.norm()
            );
        }
        assert_eq!(mesh.euler_characteristic(), 2);
        // winding: normals point outward (toward decreasing f)
        let mut bad = 0;
        for t in &mesh.triangles {
            let n = mesh.triangle_normal(t);
            let c = (mesh.vertices[t[0]] + mesh.vertices[t[1]] + mesh.vertices[t[2]]) / 3.0;
            if n.dot(&c) <= 0.0 {
                bad += 1;
            }
        }
        assert_eq!(bad, 0, "{bad} inward-facing triangles");
    }

    #[test]
    fn torus_mesh_euler_characteristic_is_zero() {
        let field = TorusField { major: 0.7, minor: 0.3 };
        let mesh = extract_mesh(&field, &MeshGrid::cubic(64, 1.1)).unwrap();
        assert_eq!(mesh.euler_characteristic(), 0);
    }

    #[test]
    fn positive_field_has_empty_level_set() {
        struct Pos;
        impl SignedField for Pos {
            fn value(&self, _: &Vec3) -> f64 {
                1.0
            }
            fn value_grad(&self, _: &Vec3) -> (f64, Vec3) {
                (1.0, Vec3::zeros())
            }
        }
        let r = extract_mesh(&Pos, &MeshGrid::cubic(16, 1.0));
        assert!(matches!(r, Err(MeshError::EmptyLevelSet)));
    }

    #[test]
    fn doubling_resolution_reduces_radial_error() {
        let field = SphereField { radius: 1.0 };
        let err_at = |res: usize| -> f64 {
            let mesh = extract_mesh(&field, &MeshGrid::cubic(res, 1.1)).unwrap();
            mesh.vertices.iter().map(|v| (v.norm() - 1.0).abs()).fold(0.0, f64::max)
        };
        let coarse = err_at(32);
        let fine = err_at(64);
        assert!(fine < coarse, "max radial error {fine} !< {coarse}");
    }

    #[test]
    fn no_degenerate_triangles_after_welding() {
        // field values hit exact zeros at grid corners
        struct Shifted;
        impl SignedField for Shifted {
            fn value(&self, x: &Vec3) -> f64 {
                0.5 - x.norm()
            }
            fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
                (self.value(x), -x / x.norm().max(1e-12))
            }
        }
        let mesh = extract_mesh(&Shifted, &MeshGrid::cubic(10, 1.0)).unwrap();
        for t in &mesh.triangles {
            assert!(mesh.triangle_area(t) >= 1e-12);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(MeshGrid::cubic(4, 1.0).validate().is_err());
        assert!(MeshGrid::cubic(8, 1.0).validate().is_ok());
    }
}
