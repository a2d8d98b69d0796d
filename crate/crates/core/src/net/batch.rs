//! Batched network evaluation with input-Jacobian carry, plus the reverse
//! pass that differentiates both the value and the input gradient with
//! respect to the parameters.
//!
//! Points are columns. Alongside the activations `z` we propagate the
//! 3-column input Jacobian `J = dz/dx` through every affine map, so the
//! final row of the carried Jacobian is the spatial gradient. The reverse
//! pass consumes adjoints for both outputs (`value_bar`, `grad_bar`) and
//! yields parameter gradients and input adjoints; the second derivative of
//! the activation enters where the forward pass scaled `J` by `s'(a)`.

use super::{FieldNetwork, NetConfig};
use crate::geom::Vec3;
use ndarray::{concatenate, Array1, Array2, Axis, Zip};

/// Batched values and spatial gradients.
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub values: Vec<f64>,
    pub grads: Vec<Vec3>,
}

/// Forward record for one batch: inputs, pre-activations, and pre-scale
/// Jacobians per affine map. Everything the reverse pass needs.
#[derive(Debug)]
pub struct BatchCache {
    x: Array2<f32>,
    a: Vec<Array2<f32>>,
    jhat: Vec<[Array2<f32>; 3]>,
}

impl BatchCache {
    pub fn batch_len(&self) -> usize {
        self.x.ncols()
    }
}

/// Per-layer parameter gradients, same shapes as the network parameters.
#[derive(Debug, Clone)]
pub struct ParamGrad {
    pub ws: Vec<Array2<f32>>,
    pub bs: Vec<Array1<f32>>,
}

impl ParamGrad {
    pub fn zeros_like(net: &FieldNetwork) -> Self {
        Self {
            ws: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            bs: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGrad) {
        for (a, b) in self.ws.iter_mut().zip(other.ws.iter()) {
            *a += b;
        }
        for (a, b) in self.bs.iter_mut().zip(other.bs.iter()) {
            *a += b;
        }
    }

    /// Flattened in the same order as `FieldNetwork::params_flat`.
    pub fn flat(&self) -> Vec<f32> {
        let mut out = Vec::new();
        for l in 0..self.ws.len() {
            out.extend(self.ws[l].iter().copied());
            out.extend(self.bs[l].iter().copied());
        }
        out
    }

    /// Euclidean norm with 64-bit accumulation.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for w in &self.ws {
            for v in w.iter() {
                acc += (*v as f64) * (*v as f64);
            }
        }
        for b in &self.bs {
            for v in b.iter() {
                acc += (*v as f64) * (*v as f64);
            }
        }
        acc.sqrt()
    }

    pub fn scale(&mut self, factor: f32) {
        for w in &mut self.ws {
            w.mapv_inplace(|v| v * factor);
        }
        for b in &mut self.bs {
            b.mapv_inplace(|v| v * factor);
        }
    }
}

fn pack_points(xs: &[Vec3]) -> Array2<f32> {
    let mut x = Array2::zeros((3, xs.len()));
    for (i, p) in xs.iter().enumerate() {
        for c in 0..3 {
            x[(c, i)] = p[c] as f32;
        }
    }
    x
}

fn indicator_rows(b: usize, c: usize) -> Array2<f32> {
    Array2::from_shape_fn((3, b), |(r, _)| if r == c { 1.0 } else { 0.0 })
}

impl FieldNetwork {
    /// Value-only batched forward (no Jacobian carry).
    pub fn forward_values(&self, xs: &[Vec3]) -> Vec<f64> {
        let act = self.activation();
        let x = pack_points(xs);
        let h = self.config.hidden_layers;
        let mut z = x.clone();
        for l in 0..=h {
            let input = if l == self.config.skip_at {
                concatenate(Axis(0), &[z.view(), x.view()]).expect("skip concat")
            } else {
                z
            };
            let mut a = self.weights[l].dot(&input);
            a += &self.biases[l].view().insert_axis(Axis(1));
            if l < h {
                a.mapv_inplace(|v| act.value_f32(v));
            }
            z = a;
        }
        z.row(0).iter().map(|v| *v as f64).collect()
    }

    /// Batched forward with gradients; no cache retained.
    pub fn eval_batch(&self, xs: &[Vec3]) -> (Vec<f64>, Vec<Vec3>) {
        let (eval, _) = self.forward_full(xs, false);
        (eval.values, eval.grads)
    }

    /// Batched forward with gradients, retaining the reverse-pass record.
    pub fn eval_batch_cached(&self, xs: &[Vec3]) -> (BatchEval, BatchCache) {
        let (eval, cache) = self.forward_full(xs, true);
        (eval, cache.expect("cache requested"))
    }

    fn forward_full(&self, xs: &[Vec3], keep: bool) -> (BatchEval, Option<BatchCache>) {
        let act = self.activation();
        let b = xs.len();
        let x = pack_points(xs);
        let h = self.config.hidden_layers;

        let mut z = x.clone();
        let mut j: [Array2<f32>; 3] =
            [indicator_rows(b, 0), indicator_rows(b, 1), indicator_rows(b, 2)];
        let mut a_cache: Vec<Array2<f32>> = Vec::new();
        let mut jhat_cache: Vec<[Array2<f32>; 3]> = Vec::new();

        let mut values = Vec::new();
        let mut grads = vec![Vec3::zeros(); b];

        for l in 0..=h {
            let (input, jin) = if l == self.config.skip_at {
                let input = concatenate(Axis(0), &[z.view(), x.view()]).expect("skip concat");
                let jin = [
                    concatenate(Axis(0), &[j[0].view(), indicator_rows(b, 0).view()]).unwrap(),
                    concatenate(Axis(0), &[j[1].view(), indicator_rows(b, 1).view()]).unwrap(),
                    concatenate(Axis(0), &[j[2].view(), indicator_rows(b, 2).view()]).unwrap(),
                ];
                (input, jin)
            } else {
                (z, j)
            };

            let mut a = self.weights[l].dot(&input);
            a += &self.biases[l].view().insert_axis(Axis(1));
            let jhat = [
                self.weights[l].dot(&jin[0]),
                self.weights[l].dot(&jin[1]),
                self.weights[l].dot(&jin[2]),
            ];

            if l < h {
                let sp = a.mapv(|v| act.first_f32(v));
                z = a.mapv(|v| act.value_f32(v));
                j = [&sp * &jhat[0], &sp * &jhat[1], &sp * &jhat[2]];
            } else {
                values = a.row(0).iter().map(|v| *v as f64).collect();
                for (i, g) in grads.iter_mut().enumerate() {
                    *g = Vec3::new(
                        jhat[0][(0, i)] as f64,
                        jhat[1][(0, i)] as f64,
                        jhat[2][(0, i)] as f64,
                    );
                }
                z = Array2::zeros((0, 0));
                j = [Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0))];
            }

            if keep {
                a_cache.push(a);
                jhat_cache.push(jhat);
            }
        }

        let cache = if keep { Some(BatchCache { x, a: a_cache, jhat: jhat_cache }) } else { None };
        (BatchEval { values, grads }, cache)
    }

    /// Reverse pass over one cached batch. `value_bar[i]` and `grad_bar[i]`
    /// are the loss adjoints of `f(x_i)` and of `∇f(x_i)`. Parameter
    /// gradients accumulate into `acc`; the returned vectors are the loss
    /// adjoints of the input positions.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        value_bar: &[f64],
        grad_bar: &[Vec3],
        acc: &mut ParamGrad,
    ) -> Vec<Vec3> {
        let act = self.activation();
        let b = cache.batch_len();
        assert_eq!(value_bar.len(), b);
        assert_eq!(grad_bar.len(), b);
        let h = self.config.hidden_layers;
        let skip = self.config.skip_at;

        let mut abar = Array2::from_shape_fn((1, b), |(_, i)| value_bar[i] as f32);
        let mut jhatbar: [Array2<f32>; 3] = [
            Array2::from_shape_fn((1, b), |(_, i)| grad_bar[i][0] as f32),
            Array2::from_shape_fn((1, b), |(_, i)| grad_bar[i][1] as f32),
            Array2::from_shape_fn((1, b), |(_, i)| grad_bar[i][2] as f32),
        ];
        let mut xbar: Array2<f32> = Array2::zeros((3, b));

        for l in (0..=h).rev() {
            // Rebuild this map's input and input-Jacobian from the cache.
            let (sp_prev, input, jin): (Option<Array2<f32>>, Array2<f32>, [Array2<f32>; 3]) =
                if l == 0 {
                    (
                        None,
                        cache.x.clone(),
                        [indicator_rows(b, 0), indicator_rows(b, 1), indicator_rows(b, 2)],
                    )
                } else {
                    let a_prev = &cache.a[l - 1];
                    let sp = a_prev.mapv(|v| act.first_f32(v));
                    let z_prev = a_prev.mapv(|v| act.value_f32(v));
                    let j_prev = [
                        &sp * &cache.jhat[l - 1][0],
                        &sp * &cache.jhat[l - 1][1],
                        &sp * &cache.jhat[l - 1][2],
                    ];
                    if l == skip {
                        let input =
                            concatenate(Axis(0), &[z_prev.view(), cache.x.view()]).unwrap();
                        let jin = [
                            concatenate(Axis(0), &[j_prev[0].view(), indicator_rows(b, 0).view()])
                                .unwrap(),
                            concatenate(Axis(0), &[j_prev[1].view(), indicator_rows(b, 1).view()])
                                .unwrap(),
                            concatenate(Axis(0), &[j_prev[2].view(), indicator_rows(b, 2).view()])
                                .unwrap(),
                        ];
                        (Some(sp), input, jin)
                    } else {
                        (Some(sp), z_prev, j_prev)
                    }
                };

            // Parameter gradients for this map.
            let mut wbar = abar.dot(&input.t());
            for c in 0..3 {
                wbar += &jhatbar[c].dot(&jin[c].t());
            }
            acc.ws[l] += &wbar;
            acc.bs[l] += &abar.sum_axis(Axis(1));

            // Propagate to this map's inputs.
            let inbar = self.weights[l].t().dot(&abar);
            let jinbar = [
                self.weights[l].t().dot(&jhatbar[0]),
                self.weights[l].t().dot(&jhatbar[1]),
                self.weights[l].t().dot(&jhatbar[2]),
            ];

            if l == 0 {
                xbar += &inbar;
                break;
            }

            let w_prev = self.config.out_dim(l - 1);
            let (zbar, jbar): (Array2<f32>, [Array2<f32>; 3]) = if l == skip {
                xbar += &inbar.slice(ndarray::s![w_prev.., ..]);
                (
                    inbar.slice(ndarray::s![..w_prev, ..]).to_owned(),
                    [
                        jinbar[0].slice(ndarray::s![..w_prev, ..]).to_owned(),
                        jinbar[1].slice(ndarray::s![..w_prev, ..]).to_owned(),
                        jinbar[2].slice(ndarray::s![..w_prev, ..]).to_owned(),
                    ],
                )
            } else {
                (inbar, jinbar)
            };

            // Through the previous activation: z = s(a), J = s'(a) ⊙ Jhat.
            let a_prev = &cache.a[l - 1];
            let sp = sp_prev.expect("sp computed for l > 0");
            let spp = a_prev.mapv(|v| act.second_f32(v));
            let mut second = Array2::<f32>::zeros(a_prev.raw_dim());
            for c in 0..3 {
                Zip::from(&mut second)
                    .and(&cache.jhat[l - 1][c])
                    .and(&jbar[c])
                    .for_each(|s, &jh, &jb| *s += jh * jb);
            }
            let abar_prev = &sp * &zbar + &spp * &second;
            let jhatbar_prev = [&sp * &jbar[0], &sp * &jbar[1], &sp * &jbar[2]];
            abar = abar_prev;
            jhatbar = jhatbar_prev;
        }

        (0..b)
            .map(|i| {
                Vec3::new(xbar[(0, i)] as f64, xbar[(1, i)] as f64, xbar[(2, i)] as f64)
            })
            .collect()
    }
}

/// Validates a config and reports the parameter count; used by checkpoint
/// loading before allocating.
pub(crate) fn shapes_of(config: &NetConfig) -> Vec<(usize, usize)> {
    (0..=config.hidden_layers).map(|l| (config.out_dim(l), config.in_dim(l))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{standard_normal, stream};

    fn small_net(seed: u64) -> FieldNetwork {
        let config = NetConfig {
            hidden_width: 16,
            hidden_layers: 3,
            skip_at: 1,
            beta: 100.0,
            ..NetConfig::default()
        };
        FieldNetwork::init_geometric(&config, seed).unwrap()
    }

    fn rand_points(n: usize, seed: u64) -> Vec<Vec3> {
        let mut r = stream(seed, "pts", 0);
        (0..n)
            .map(|_| {
                Vec3::new(
                    standard_normal(&mut r) * 0.5,
                    standard_normal(&mut r) * 0.5,
                    standard_normal(&mut r) * 0.5,
                )
            })
            .collect()
    }

    #[test]
    fn batch_matches_single_eval() {
        let net = small_net(3);
        let pts = rand_points(17, 5);
        let (values, grads) = net.eval_batch(&pts);
        for (i, p) in pts.iter().enumerate() {
            let e = net.eval(p);
            assert_eq!(values[i].to_bits(), e.value.to_bits());
            for c in 0..3 {
                assert_eq!(grads[i][c].to_bits(), e.grad[c].to_bits());
            }
        }
        let vals_only = net.forward_values(&pts);
        for (a, b) in vals_only.iter().zip(values.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let net = FieldNetwork::init_geometric(&NetConfig::default(), 11).unwrap();
        let pts = rand_points(100, 13);
        let (_, grads) = net.eval_batch(&pts);
        let hstep = 1e-3;
        let mut worst = 0.0f64;
        for (i, p) in pts.iter().enumerate() {
            let mut fd = Vec3::zeros();
            for c in 0..3 {
                let mut hi = *p;
                let mut lo = *p;
                hi[c] += hstep;
                lo[c] -= hstep;
                fd[c] = (net.value(&hi) - net.value(&lo)) / (2.0 * hstep);
            }
            let rel = (fd - grads[i]).norm() / grads[i].norm().max(1e-3);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-2, "max relative gradient error {worst}");
    }

    #[test]
    fn no_nan_under_parameter_noise() {
        let mut net = small_net(17);
        let mut r = stream(23, "perturb", 0);
        for trial in 0..100 {
            let mut flat = net.params_flat();
            for p in flat.iter_mut() {
                *p += (standard_normal(&mut r) * 0.1) as f32;
            }
            net.set_params_flat(&flat);
            let pts = rand_points(100, 1000 + trial);
            let (values, grads) = net.eval_batch(&pts);
            let (eval, cache) = net.eval_batch_cached(&pts);
            let mut acc = ParamGrad::zeros_like(&net);
            let vbar = vec![1.0; pts.len()];
            let gbar = vec![Vec3::new(0.3, -0.2, 0.1); pts.len()];
            let xbar = net.backward_batch(&cache, &vbar, &gbar, &mut acc);
            for v in values.iter().chain(eval.values.iter()) {
                assert!(v.is_finite());
            }
            for g in grads.iter().chain(xbar.iter()) {
                assert!(g.iter().all(|c| c.is_finite()));
            }
            for w in &acc.ws {
                assert!(w.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn translation_equivariance_with_compensating_bias() {
        let net = small_net(29);
        let t = Vec3::new(0.13, -0.07, 0.21);
        let mut shifted = net.clone();
        // First map: W (x + t) + b == W x + (b + W t); compensate by
        // subtracting W t. The skip concat re-introduces x, so the skip
        // map's bias needs the same correction on its last 3 input columns.
        let tf = [t[0] as f32, t[1] as f32, t[2] as f32];
        for (l, fix) in [(0usize, 0usize), (net.config.skip_at, net.config.in_dim(net.config.skip_at) - 3)] {
            let w = shifted.weights[l].clone();
            let mut b = shifted.biases[l].clone();
            for row in 0..w.nrows() {
                let mut dot = 0.0f32;
                for c in 0..3 {
                    dot += w[(row, fix + c)] * tf[c];
                }
                b[row] -= dot;
            }
            shifted.biases[l] = b;
        }
        for p in rand_points(20, 31) {
            let a = net.eval(&p);
            let b = shifted.eval(&(p + t));
            assert!((a.value - b.value).abs() < 1e-4, "{} vs {}", a.value, b.value);
            assert!((a.grad - b.grad).norm() < 1e-3);
        }
    }
}
