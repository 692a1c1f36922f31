//! Fully connected layer.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Parameterized;

/// `y = x W^T + b`, weight stored `[out_features, in_features]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

/// Equality over the learned values only; gradient buffers are scratch.
impl PartialEq for Linear {
    fn eq(&self, other: &Self) -> bool {
        self.in_features == other.in_features
            && self.out_features == other.out_features
            && self.w == other.w
            && self.b == other.b
    }
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        Linear {
            in_features,
            out_features,
            w: Array2::from_shape_fn((out_features, in_features), |_| normal.sample(rng)),
            b: Array1::zeros(out_features),
            gw: Array2::zeros((out_features, in_features)),
            gb: Array1::zeros(out_features),
        }
    }

    /// All-zero layer; with a sigmoid on top it outputs exactly 0.5.
    pub fn zeroed(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            w: Array2::zeros((out_features, in_features)),
            b: Array1::zeros(out_features),
            gw: Array2::zeros((out_features, in_features)),
            gb: Array1::zeros(out_features),
        }
    }

    /// `x`: [batch, in] -> [batch, out]
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        for (mut row, _) in y.axis_iter_mut(Axis(0)).zip(0..) {
            row += &self.b;
        }
        y
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        self.gw += &dy.t().dot(x);
        self.gb += &dy.sum_axis(Axis(0));
        dy.dot(&self.w)
    }
}

impl Parameterized for Linear {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.w.as_slice_mut().unwrap(),
            self.gw.as_slice_mut().unwrap(),
        );
        f(
            self.b.as_slice_mut().unwrap(),
            self.gb.as_slice_mut().unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut lin = Linear::new(4, 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random::<f64>() - 0.5);
        let loss = |l: &Linear, x: &Array2<f64>| l.forward(x).mapv(|v| v * v).sum();

        lin.zero_grads();
        let y = lin.forward(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = lin.backward(&x, &dy);

        let h = 1e-6;
        for idx in [0usize, 7, lin.param_count() - 1] {
            let mut p = lin.clone();
            p.nudge_param(idx, h);
            let mut m = lin.clone();
            m.nudge_param(idx, -h);
            let num = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            let ana = lin.grad_at(idx);
            assert!((num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-6);
        }
        for pos in [[0, 0], [4, 3]] {
            let mut xp = x.clone();
            xp[pos] += h;
            let mut xm = x.clone();
            xm[pos] -= h;
            let num = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h);
            assert!((num - dx[pos]).abs() / (num.abs() + dx[pos].abs()).max(1e-8) < 1e-6);
        }
    }
}
