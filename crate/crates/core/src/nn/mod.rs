//! Minimal dense/conv network primitives with hand-written backward passes.
//!
//! Everything runs in `f64` so analytic gradients can be checked against
//! central finite differences at tight tolerances. Layers own their gradient
//! accumulators; an optimizer walks them through [`Parameterized`].

mod adam;
mod conv;
mod linear;
mod norm;
mod pool;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, BnCache};
pub use pool::{MaxPool2, PoolCache};

use ndarray::Array4;

/// Walk every learnable parameter together with its gradient accumulator.
///
/// Visit order must be stable across calls: the optimizer and the checkpoint
/// writer both rely on it.
pub trait Parameterized {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64]));

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, g| g.fill(0.0));
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |v, _| n += v.len());
        n
    }

    /// Add `delta` to the flat parameter at `index` (visit order).
    fn nudge_param(&mut self, index: usize, delta: f64) {
        let mut offset = 0;
        self.visit_params(&mut |v, _| {
            if index >= offset && index < offset + v.len() {
                v[index - offset] += delta;
            }
            offset += v.len();
        });
    }

    /// Read the flat gradient at `index` (visit order).
    fn grad_at(&mut self, index: usize) -> f64 {
        let mut offset = 0;
        let mut out = 0.0;
        self.visit_params(&mut |v, g| {
            if index >= offset && index < offset + v.len() {
                out = g[index - offset];
            }
            offset += v.len();
        });
        out
    }
}

/// Rectifier, returning a new array.
pub fn relu(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward through the rectifier given its *output* and upstream gradient.
pub fn relu_backward(y: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &o| {
        if o <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}
