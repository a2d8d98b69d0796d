//! Corruption protocols for the synthetic benchmark: Gaussian noise at
//! fixed fractions of the bounding-box diagonal, stripe occlusions, and a
//! density gradient.

use crate::geom::{GeomError, PointCloud, Vec3};
use crate::rng;
use rand::Rng;

/// Supported corruption protocols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorruptionProtocol {
    NoiseLow,
    NoiseMedium,
    NoiseHigh,
    Stripe,
    Gradient,
}

impl CorruptionProtocol {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "noise_low" | "low" => Some(Self::NoiseLow),
            "noise_med" | "noise_medium" | "medium" => Some(Self::NoiseMedium),
            "noise_high" | "high" => Some(Self::NoiseHigh),
            "stripe" => Some(Self::Stripe),
            "gradient" => Some(Self::Gradient),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::NoiseLow => "noise_low",
            Self::NoiseMedium => "noise_medium",
            Self::NoiseHigh => "noise_high",
            Self::Stripe => "stripe",
            Self::Gradient => "gradient",
        }
    }

    /// Noise standard deviation as a fraction of the bounding-box
    /// diagonal: 0.12% (low), 0.6% (medium), 1.2% (high).
    pub fn noise_fraction(&self) -> Option<f64> {
        match self {
            Self::NoiseLow => Some(0.0012),
            Self::NoiseMedium => Some(0.006),
            Self::NoiseHigh => Some(0.012),
            Self::Stripe | Self::Gradient => None,
        }
    }
}

/// Axis-aligned slabs removed by the stripe protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct StripeParams {
    pub axis: usize,
    pub centers: Vec<f64>,
    pub width: f64,
}

impl Default for StripeParams {
    fn default() -> Self {
        Self { axis: 0, centers: vec![-0.5, 0.0, 0.5], width: 0.1 }
    }
}

impl StripeParams {
    pub fn contains(&self, p: &Vec3) -> bool {
        self.centers.iter().any(|c| (p[self.axis] - c).abs() < self.width / 2.0)
    }
}

/// Linear keep-probability ramp along an axis for the gradient protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientParams {
    pub axis: usize,
    pub min_keep: f64,
}

impl Default for GradientParams {
    fn default() -> Self {
        Self { axis: 0, min_keep: 0.1 }
    }
}

/// Applies a protocol with default stripe/gradient parameters.
pub fn corrupt(
    cloud: &PointCloud,
    protocol: CorruptionProtocol,
    seed: u64,
) -> Result<PointCloud, GeomError> {
    corrupt_with(cloud, protocol, seed, &StripeParams::default(), &GradientParams::default())
}

/// Applies a protocol. Noise modes add isotropic Gaussian displacement
/// with sigma tied to the cloud's bounding-box diagonal; stripe removes
/// points inside the slabs; gradient subsamples with probability linear
/// along an axis. Deterministic per seed. Ground-truth normals follow
/// their points.
pub fn corrupt_with(
    cloud: &PointCloud,
    protocol: CorruptionProtocol,
    seed: u64,
    stripe: &StripeParams,
    gradient: &GradientParams,
) -> Result<PointCloud, GeomError> {
    let mut r = rng::stream(seed, "corrupt", protocol as u64);
    match protocol {
        CorruptionProtocol::NoiseLow | CorruptionProtocol::NoiseMedium | CorruptionProtocol::NoiseHigh => {
            let sigma = protocol.noise_fraction().unwrap() * cloud.bbox_diagonal();
            let points: Vec<Vec3> = cloud
                .points
                .iter()
                .map(|p| {
                    p + Vec3::new(
                        rng::standard_normal(&mut r) * sigma,
                        rng::standard_normal(&mut r) * sigma,
                        rng::standard_normal(&mut r) * sigma,
                    )
                })
                .collect();
            Ok(PointCloud {
                points,
                gt_normals: cloud.gt_normals.clone(),
                name: format!("{}-{}", cloud.name, protocol.name()),
            })
        }
        CorruptionProtocol::Stripe => {
            let keep: Vec<usize> = (0..cloud.len())
                .filter(|i| !stripe.contains(&cloud.points[*i]))
                .collect();
            subset(cloud, &keep, protocol.name())
        }
        CorruptionProtocol::Gradient => {
            let (lo, hi) = cloud.bounds();
            let span = (hi[gradient.axis] - lo[gradient.axis]).max(1e-12);
            let keep: Vec<usize> = (0..cloud.len())
                .filter(|i| {
                    let t = (cloud.points[*i][gradient.axis] - lo[gradient.axis]) / span;
                    let p = gradient.min_keep + (1.0 - gradient.min_keep) * t;
                    r.gen::<f64>() < p
                })
                .collect();
            subset(cloud, &keep, protocol.name())
        }
    }
}

fn subset(cloud: &PointCloud, keep: &[usize], suffix: &str) -> Result<PointCloud, GeomError> {
    if keep.len() < 4 {
        return Err(GeomError::TooFewPoints { needed: 4, got: keep.len() });
    }
    let points = keep.iter().map(|i| cloud.points[*i]).collect();
    let gt_normals = cloud
        .gt_normals
        .as_ref()
        .map(|ns| keep.iter().map(|i| ns[*i]).collect());
    Ok(PointCloud { points, gt_normals, name: format!("{}-{}", cloud.name, suffix) })
}
