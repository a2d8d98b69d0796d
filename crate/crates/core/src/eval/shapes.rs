//! Analytic test shapes: signed fields, surface normals, and seeded
//! surface samplers. These stand in for external benchmark data.

use crate::field::SignedField;
use crate::geom::{PointCloud, Vec3};
use crate::rng;
use rand::Rng;

/// Inside-positive sphere field: `f(x) = r − ‖x‖`.
#[derive(Debug, Clone, Copy)]
pub struct SphereField {
    pub radius: f64,
}

impl SignedField for SphereField {
    fn value(&self, x: &Vec3) -> f64 {
        self.radius - x.norm()
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let n = x.norm();
        let g = if n > 0.0 { -x / n } else { Vec3::zeros() };
        (self.radius - n, g)
    }
}

/// Inside-positive torus field around the z axis:
/// `f(x) = r − ‖(‖xy‖ − R, z)‖`.
#[derive(Debug, Clone, Copy)]
pub struct TorusField {
    pub major: f64,
    pub minor: f64,
}

impl SignedField for TorusField {
    fn value(&self, x: &Vec3) -> f64 {
        let rho = (x.x * x.x + x.y * x.y).sqrt();
        let d = ((rho - self.major).powi(2) + x.z * x.z).sqrt();
        self.minor - d
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let rho = (x.x * x.x + x.y * x.y).sqrt();
        let u = rho - self.major;
        let d = (u * u + x.z * x.z).sqrt();
        let g = if d > 0.0 && rho > 0.0 {
            -Vec3::new(u * x.x / rho, u * x.y / rho, x.z) / d
        } else {
            Vec3::zeros()
        };
        (self.minor - d, g)
    }
}

/// Inside-positive axis-aligned box field (exact signed distance).
#[derive(Debug, Clone, Copy)]
pub struct CubeField {
    pub half_extent: f64,
}

impl SignedField for CubeField {
    fn value(&self, x: &Vec3) -> f64 {
        let q = Vec3::new(
            x.x.abs() - self.half_extent,
            x.y.abs() - self.half_extent,
            x.z.abs() - self.half_extent,
        );
        let outside = Vec3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
        let inside = q.x.max(q.y).max(q.z).min(0.0);
        -(outside + inside)
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        // central differences; exact enough for a mock field
        let h = 1e-6;
        let mut g = Vec3::zeros();
        for c in 0..3 {
            let mut hi = *x;
            let mut lo = *x;
            hi[c] += h;
            lo[c] -= h;
            g[c] = (self.value(&hi) - self.value(&lo)) / (2.0 * h);
        }
        (self.value(x), g)
    }
}

/// The synthetic shapes the harness ships.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Torus,
    Plane,
    Cube,
}

impl ShapeKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "sphere" => Some(Self::Sphere),
            "torus" => Some(Self::Torus),
            "plane" => Some(Self::Plane),
            "cube" => Some(Self::Cube),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Torus => "torus",
            Self::Plane => "plane",
            Self::Cube => "cube",
        }
    }
}

/// A synthetic shape: analytic signed distance, analytic normals, and a
/// seeded surface sampler.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticShape {
    pub kind: ShapeKind,
}

impl SyntheticShape {
    pub fn new(kind: ShapeKind) -> Self {
        Self { kind }
    }

    /// Analytic signed distance (inside positive).
    pub fn sdf(&self, x: &Vec3) -> f64 {
        match self.kind {
            ShapeKind::Sphere => SphereField { radius: 1.0 }.value(x),
            ShapeKind::Torus => TorusField { major: 0.7, minor: 0.3 }.value(x),
            ShapeKind::Plane => -x.z,
            ShapeKind::Cube => CubeField { half_extent: 0.8 }.value(x),
        }
    }

    /// Analytic outward unit normal at a surface point.
    pub fn normal(&self, x: &Vec3) -> Vec3 {
        match self.kind {
            ShapeKind::Sphere => {
                let n = x.norm();
                if n > 0.0 {
                    x / n
                } else {
                    Vec3::z()
                }
            }
            ShapeKind::Torus => {
                let rho = (x.x * x.x + x.y * x.y).sqrt();
                let u = rho - 0.7;
                let d = (u * u + x.z * x.z).sqrt();
                if d > 0.0 && rho > 0.0 {
                    Vec3::new(u * x.x / rho, u * x.y / rho, x.z) / d
                } else {
                    Vec3::z()
                }
            }
            ShapeKind::Plane => Vec3::z(),
            ShapeKind::Cube => {
                // face of largest |coordinate|
                let ax = [x.x.abs(), x.y.abs(), x.z.abs()];
                let mut best = 0;
                for c in 1..3 {
                    if ax[c] > ax[best] {
                        best = c;
                    }
                }
                let mut n = Vec3::zeros();
                n[best] = x[best].signum();
                n
            }
        }
    }

    /// `count` surface samples with ground-truth normals attached.
    pub fn sample(&self, count: usize, seed: u64) -> PointCloud {
        let mut r = rng::stream(seed, "shape-sample", self.kind as u64);
        let mut pts = Vec::with_capacity(count);
        match self.kind {
            ShapeKind::Sphere => {
                while pts.len() < count {
                    let g = Vec3::new(
                        rng::standard_normal(&mut r),
                        rng::standard_normal(&mut r),
                        rng::standard_normal(&mut r),
                    );
                    let n = g.norm();
                    if n > 1e-9 {
                        pts.push(g / n);
                    }
                }
            }
            ShapeKind::Torus => {
                // area-weighted rejection on the tube angle
                let (major, minor) = (0.7, 0.3);
                while pts.len() < count {
                    let theta = r.gen::<f64>() * std::f64::consts::TAU;
                    let phi = r.gen::<f64>() * std::f64::consts::TAU;
                    let accept = (major + minor * phi.cos()) / (major + minor);
                    if r.gen::<f64>() < accept {
                        let rho = major + minor * phi.cos();
                        pts.push(Vec3::new(
                            rho * theta.cos(),
                            rho * theta.sin(),
                            minor * phi.sin(),
                        ));
                    }
                }
            }
            ShapeKind::Plane => {
                for _ in 0..count {
                    pts.push(Vec3::new(
                        r.gen::<f64>() * 2.0 - 1.0,
                        r.gen::<f64>() * 2.0 - 1.0,
                        0.0,
                    ));
                }
            }
            ShapeKind::Cube => {
                let h = 0.8;
                for _ in 0..count {
                    let face = r.gen_range(0..6usize);
                    let a = r.gen::<f64>() * 2.0 * h - h;
                    let b = r.gen::<f64>() * 2.0 * h - h;
                    let p = match face {
                        0 => Vec3::new(h, a, b),
                        1 => Vec3::new(-h, a, b),
                        2 => Vec3::new(a, h, b),
                        3 => Vec3::new(a, -h, b),
                        4 => Vec3::new(a, b, h),
                        _ => Vec3::new(a, b, -h),
                    };
                    pts.push(p);
                }
            }
        }
        let normals: Vec<Vec3> = pts.iter().map(|p| self.normal(p)).collect();
        PointCloud::new(pts, self.kind.name())
            .expect("synthetic sample")
            .with_normals(normals)
            .expect("unit normals")
    }
}
