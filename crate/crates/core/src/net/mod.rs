//! The implicit MLP: architecture, geometric initialization, and
//! forward / input-gradient evaluation.
//!
//! The network maps R^3 to a scalar through `hidden_layers` softplus
//! layers plus a final affine map. The input is re-concatenated at one
//! hidden layer (the layer before it emits `width - 3` units so the
//! concatenated vector is `width` wide again). At the default
//! width 256 / depth 8 / skip 4 this is 461,054 parameters.

mod batch;
mod checkpoint;

pub use batch::{BatchCache, BatchEval, ParamGrad};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData, CheckpointError};

use crate::field::{unit_or_fallback, SignedField};
use crate::geom::Vec3;
use crate::rng;
use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
}

/// Architecture and initialization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Hidden width after the skip concatenation.
    pub hidden_width: usize,
    /// Number of softplus layers; affine maps = `hidden_layers + 1`.
    pub hidden_layers: usize,
    /// Hidden layer whose input is `[h, x]`; must be in `1..hidden_layers`.
    pub skip_at: usize,
    /// Softplus sharpness.
    pub beta: f64,
    /// Radius of the sphere the geometric init approximates.
    pub radius: f64,
    /// When set, the initialized field is positive inside the sphere.
    pub sign_inside_positive: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_width: 256,
            hidden_layers: 8,
            skip_at: 4,
            beta: 100.0,
            radius: 0.5,
            sign_inside_positive: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.hidden_width <= 3 {
            return Err(NetError::InvalidConfig("hidden_width must exceed 3".into()));
        }
        if self.hidden_layers < 2 {
            return Err(NetError::InvalidConfig("hidden_layers must be at least 2".into()));
        }
        if self.skip_at == 0 || self.skip_at >= self.hidden_layers {
            return Err(NetError::InvalidConfig(format!(
                "skip_at {} must be in 1..{}",
                self.skip_at, self.hidden_layers
            )));
        }
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(NetError::InvalidConfig("beta must be positive".into()));
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return Err(NetError::InvalidConfig("radius must be positive".into()));
        }
        Ok(())
    }

    /// Output width of affine map `l` (`0..=hidden_layers`).
    pub fn out_dim(&self, l: usize) -> usize {
        if l == self.hidden_layers {
            1
        } else if l + 1 == self.skip_at {
            self.hidden_width - 3
        } else {
            self.hidden_width
        }
    }

    /// Input width of affine map `l`.
    pub fn in_dim(&self, l: usize) -> usize {
        if l == 0 {
            3
        } else if l == self.skip_at {
            self.out_dim(l - 1) + 3
        } else {
            self.out_dim(l - 1)
        }
    }

    /// Total scalar parameter count (pure function of the config).
    pub fn param_count(&self) -> usize {
        (0..=self.hidden_layers)
            .map(|l| self.in_dim(l) * self.out_dim(l) + self.out_dim(l))
            .sum()
    }
}

/// Smooth scalar activation `softplus(beta * a) / beta` with analytic
/// first and second derivatives.
#[derive(Debug, Clone, Copy)]
pub struct Activation {
    pub beta: f64,
}

impl Activation {
    pub fn value(&self, a: f64) -> f64 {
        let z = self.beta * a;
        if z > 20.0 {
            a
        } else if z < -20.0 {
            z.exp() / self.beta
        } else {
            z.exp().ln_1p() / self.beta
        }
    }

    pub fn first(&self, a: f64) -> f64 {
        sigmoid(self.beta * a)
    }

    pub fn second(&self, a: f64) -> f64 {
        let s = sigmoid(self.beta * a);
        self.beta * s * (1.0 - s)
    }

    pub(crate) fn value_f32(&self, a: f32) -> f32 {
        let beta = self.beta as f32;
        let z = beta * a;
        if z > 20.0 {
            a
        } else if z < -20.0 {
            z.exp() / beta
        } else {
            z.exp().ln_1p() / beta
        }
    }

    pub(crate) fn first_f32(&self, a: f32) -> f32 {
        sigmoid_f32(self.beta as f32 * a)
    }

    pub(crate) fn second_f32(&self, a: f32) -> f32 {
        let s = sigmoid_f32(self.beta as f32 * a);
        self.beta as f32 * s * (1.0 - s)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sigmoid_f32(z: f32) -> f32 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// One value-and-gradient evaluation of the field.
#[derive(Debug, Clone, Copy)]
pub struct FieldEval {
    pub value: f64,
    pub grad: Vec3,
    /// `grad / ‖grad‖`, or the fallback direction when degenerate.
    pub unit_normal: Vec3,
    pub degenerate: bool,
}

/// The implicit network; immutable during evaluation.
#[derive(Debug, Clone)]
pub struct FieldNetwork {
    pub config: NetConfig,
    pub(crate) weights: Vec<Array2<f32>>,
    pub(crate) biases: Vec<Array1<f32>>,
}

impl FieldNetwork {
    /// Geometric initialization: the fresh network approximates the signed
    /// distance of a sphere of radius `config.radius`, with the configured
    /// inside sign.
    pub fn init_geometric(config: &NetConfig, rng_seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut r = rng::stream(rng_seed, "net-init", 0);
        let h = config.hidden_layers;
        let mut weights = Vec::with_capacity(h + 1);
        let mut biases = Vec::with_capacity(h + 1);
        for l in 0..h {
            let (din, dout) = (config.in_dim(l), config.out_dim(l));
            let std = (2.0 / dout as f64).sqrt();
            let w = Array2::from_shape_fn((dout, din), |_| {
                (rng::standard_normal(&mut r) * std) as f32
            });
            weights.push(w);
            biases.push(Array1::zeros(dout));
        }
        let din = config.in_dim(h);
        let sign = if config.sign_inside_positive { -1.0 } else { 1.0 };
        let mean = sign * (std::f64::consts::PI.sqrt() / (din as f64).sqrt());
        let w = Array2::from_shape_fn((1, din), |_| {
            (mean + rng::standard_normal(&mut r) * 1e-5) as f32
        });
        weights.push(w);
        biases.push(Array1::from_elem(1, (-sign * config.radius) as f32));
        Ok(Self { config: config.clone(), weights, biases })
    }

    pub fn activation(&self) -> Activation {
        Activation { beta: self.config.beta }
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Parameters flattened in layer order, weights row-major then bias.
    pub fn params_flat(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in 0..self.weights.len() {
            out.extend(self.weights[l].iter().copied());
            out.extend(self.biases[l].iter().copied());
        }
        out
    }

    /// Overwrites parameters from a flat vector (inverse of `params_flat`).
    pub fn set_params_flat(&mut self, flat: &[f32]) {
        assert_eq!(flat.len(), self.param_count(), "parameter length mismatch");
        let mut ofs = 0;
        for l in 0..self.weights.len() {
            for w in self.weights[l].iter_mut() {
                *w = flat[ofs];
                ofs += 1;
            }
            for b in self.biases[l].iter_mut() {
                *b = flat[ofs];
                ofs += 1;
            }
        }
    }

    /// Value, gradient, and unit normal at one point.
    pub fn eval(&self, x: &Vec3) -> FieldEval {
        let (values, grads) = self.eval_batch(std::slice::from_ref(x));
        let (unit_normal, degenerate) = unit_or_fallback(&grads[0]);
        FieldEval { value: values[0], grad: grads[0], unit_normal, degenerate }
    }
}

impl SignedField for FieldNetwork {
    fn value(&self, x: &Vec3) -> f64 {
        let mut out = [0.0];
        self.value_batch(std::slice::from_ref(x), &mut out);
        out[0]
    }

    fn value_grad(&self, x: &Vec3) -> (f64, Vec3) {
        let (values, grads) = self.eval_batch(std::slice::from_ref(x));
        (values[0], grads[0])
    }

    fn value_batch(&self, xs: &[Vec3], out: &mut [f64]) {
        let values = self.forward_values(xs);
        out.copy_from_slice(&values);
    }

    fn value_grad_batch(&self, xs: &[Vec3], values: &mut [f64], grads: &mut [Vec3]) {
        let (v, g) = self.eval_batch(xs);
        values.copy_from_slice(&v);
        grads.copy_from_slice(&g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    #[test]
    fn default_param_count_matches_documented_total() {
        let config = NetConfig::default();
        assert_eq!(config.param_count(), 461_054);
        let net = FieldNetwork::init_geometric(&config, 0).unwrap();
        assert_eq!(net.params_flat().len(), 461_054);
    }

    #[test]
    fn param_count_tracks_width_and_depth() {
        let mut config = NetConfig { hidden_width: 16, hidden_layers: 3, skip_at: 1, ..NetConfig::default() };
        config.validate().unwrap();
        // l0: 3*13+13, l1: 16*16+16, l2: 16*16+16, l3: 16*1+1
        assert_eq!(config.param_count(), 52 + 272 + 272 + 17);
    }

    #[test]
    fn config_validation_rejects_bad_skip() {
        let config = NetConfig { skip_at: 8, ..NetConfig::default() };
        assert!(config.validate().is_err());
        let config = NetConfig { skip_at: 0, ..NetConfig::default() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn geometric_init_signs_and_sphere_fit() {
        let config = NetConfig::default();
        let net = FieldNetwork::init_geometric(&config, 42).unwrap();
        assert!(net.value(&Vec3::zeros()) > 0.0, "origin must be inside");
        assert!(net.value(&Vec3::new(2.0, 0.0, 0.0)) < 0.0, "far point must be outside");

        // Mean |f| on the init sphere of radius r0.
        let mut r = stream(1, "sphere-pts", 0);
        let mut total = 0.0;
        let n = 1000;
        for _ in 0..n {
            let g = Vec3::new(standard_normal(&mut r), standard_normal(&mut r), standard_normal(&mut r));
            let p = g / g.norm() * config.radius;
            total += net.value(&p).abs();
        }
        let mean = total / n as f64;
        assert!(mean < 0.05, "mean |f| on init sphere = {mean}");
    }

    #[test]
    fn init_gradient_points_inward() {
        let net = FieldNetwork::init_geometric(&NetConfig::default(), 7).unwrap();
        let x = Vec3::new(0.9, 0.0, 0.0);
        let e = net.eval(&x);
        assert!(e.grad.dot(&x) < 0.0, "gradient must point toward the center");
        assert!(!e.degenerate);
        assert!((e.unit_normal - Vec3::new(-1.0, 0.0, 0.0)).amax() < 0.1);
    }

    #[test]
    fn eval_is_pure() {
        let net = FieldNetwork::init_geometric(&NetConfig::default(), 3).unwrap();
        let x = Vec3::new(0.3, -0.2, 0.7);
        let a = net.eval(&x);
        let b = net.eval(&x);
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for c in 0..3 {
            assert_eq!(a.grad[c].to_bits(), b.grad[c].to_bits());
        }
    }

    #[test]
    fn activation_second_derivative_matches_finite_differences() {
        for beta in [1.0, 10.0, 100.0] {
            let act = Activation { beta };
            let h = 1e-4;
            let mut x = -5.0;
            while x <= 5.0 {
                let fd = (act.value(x + h) - 2.0 * act.value(x) + act.value(x - h)) / (h * h);
                let an = act.second(x);
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-4 * an.abs().max(fd.abs()) + 1e-6,
                    "beta {beta} x {x}: fd {fd} vs analytic {an}"
                );
                x += 0.0173;
            }
        }
    }

    #[test]
    fn params_flat_round_trip() {
        let config = NetConfig { hidden_width: 16, hidden_layers: 3, skip_at: 1, ..NetConfig::default() };
        let net = FieldNetwork::init_geometric(&config, 5).unwrap();
        let flat = net.params_flat();
        let mut other = FieldNetwork::init_geometric(&config, 6).unwrap();
        other.set_params_flat(&flat);
        assert_eq!(other.params_flat(), flat);
    }
}
