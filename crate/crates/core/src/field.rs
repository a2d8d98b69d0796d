//! The scalar-field abstraction shared by the learned network and the
//! analytic mock fields used in tests and the evaluation harness.

use crate::geom::Vec3;

/// A differentiable scalar field over R^3 with the inside-positive sign
/// convention: `value > 0` inside the shape, `< 0` outside, and the zero
/// level set is the surface. Gradients point toward the positive side.
pub trait SignedField {
    /// Field value at `x`.
    fn value(&self, x: &Vec3) -> f64;

    /// Field value and spatial gradient at `x`.
    fn value_grad(&self, x: &Vec3) -> (f64, Vec3);

    /// Batched values; implementations with a cheaper batched path
    /// (e.g. the network) override this.
    fn value_batch(&self, xs: &[Vec3], out: &mut [f64]) {
        assert_eq!(xs.len(), out.len());
        for (x, o) in xs.iter().zip(out.iter_mut()) {
            *o = self.value(x);
        }
    }

    /// Batched values and gradients.
    fn value_grad_batch(&self, xs: &[Vec3], values: &mut [f64], grads: &mut [Vec3]) {
        assert_eq!(xs.len(), values.len());
        assert_eq!(xs.len(), grads.len());
        for i in 0..xs.len() {
            let (v, g) = self.value_grad(&xs[i]);
            values[i] = v;
            grads[i] = g;
        }
    }
}

/// Gradient norm below which a field direction is considered degenerate.
pub const EPS_GRAD: f64 = 1e-12;

/// Fallback direction reported when the gradient is degenerate.
pub const FALLBACK_NORMAL: [f64; 3] = [0.0, 0.0, 1.0];

/// Unit direction of `g`, or the fallback direction when `‖g‖ < EPS_GRAD`.
/// Returns the direction and whether the fallback was used.
pub fn unit_or_fallback(g: &Vec3) -> (Vec3, bool) {
    let n = g.norm();
    if n < EPS_GRAD {
        (Vec3::from(FALLBACK_NORMAL), true)
    } else {
        (g / n, false)
    }
}
