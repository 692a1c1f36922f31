//! Per-channel batch normalization for NCHW tensors.

use ndarray::{Array1, Array4};

use super::Parameterized;

/// Batch normalization over the (batch, height, width) axes.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// maintains running estimates; eval mode normalizes with the frozen running
/// estimates. The variance convention is recorded in checkpoint metadata.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub g_gamma: Array1<f64>,
    pub g_beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

/// Equality over learned values and running statistics; gradients are scratch.
impl PartialEq for BatchNorm2d {
    fn eq(&self, other: &Self) -> bool {
        self.channels == other.channels
            && self.gamma == other.gamma
            && self.beta == other.beta
            && self.running_mean == other.running_mean
            && self.running_var == other.running_var
            && self.eps == other.eps
            && self.momentum == other.momentum
    }
}

/// Saved activations needed by the training-mode backward pass.
pub struct BnCache {
    pub x_hat: Array4<f64>,
    pub inv_std: Array1<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            g_gamma: Array1::zeros(channels),
            g_beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> (Array4<f64>, BnCache) {
        let (n, c, h, w) = x.dim();
        let m = (n * h * w) as f64;
        let mut mean = Array1::<f64>::zeros(c);
        let mut var = Array1::<f64>::zeros(c);
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        s += x[[b, ch, y, xx]];
                    }
                }
            }
            let mu = s / m;
            let mut v = 0.0;
            for b in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = x[[b, ch, y, xx]] - mu;
                        v += d * d;
                    }
                }
            }
            mean[ch] = mu;
            var[ch] = v / m;
        }

        for ch in 0..c {
            self.running_mean[ch] =
                (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
            self.running_var[ch] =
                (1.0 - self.momentum) * self.running_var[ch] + self.momentum * var[ch];
        }

        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut x_hat = x.clone();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        for b in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                let inv = inv_std[ch];
                let g = self.gamma[ch];
                let be = self.beta[ch];
                for yy in 0..h {
                    for xx in 0..w {
                        let xh = (x[[b, ch, yy, xx]] - mu) * inv;
                        x_hat[[b, ch, yy, xx]] = xh;
                        y[[b, ch, yy, xx]] = g * xh + be;
                    }
                }
            }
        }
        (y, BnCache { x_hat, inv_std })
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        let mut y = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let inv = 1.0 / (self.running_var[ch] + self.eps).sqrt();
            let mu = self.running_mean[ch];
            let g = self.gamma[ch];
            let be = self.beta[ch];
            for b in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        y[[b, ch, yy, xx]] = g * (x[[b, ch, yy, xx]] - mu) * inv + be;
                    }
                }
            }
        }
        y
    }

    /// Training-mode backward through the batch statistics.
    pub fn backward(&mut self, cache: &BnCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = dy.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = self.gamma[ch];
            let inv = cache.inv_std[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for b in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = dy[[b, ch, yy, xx]];
                        sum_dy += d;
                        sum_dy_xhat += d * cache.x_hat[[b, ch, yy, xx]];
                    }
                }
            }
            self.g_beta[ch] += sum_dy;
            self.g_gamma[ch] += sum_dy_xhat;
            for b in 0..n {
                for yy in 0..h {
                    for xx in 0..w {
                        let d = dy[[b, ch, yy, xx]];
                        let xh = cache.x_hat[[b, ch, yy, xx]];
                        dx[[b, ch, yy, xx]] =
                            g * inv / m * (m * d - sum_dy - xh * sum_dy_xhat);
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for BatchNorm2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
        f(
            self.gamma.as_slice_mut().unwrap(),
            self.g_gamma.as_slice_mut().unwrap(),
        );
        f(
            self.beta.as_slice_mut().unwrap(),
            self.g_beta.as_slice_mut().unwrap(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_output_is_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut bn = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((4, 2, 3, 3), |_| rng.random::<f64>() * 3.0 + 1.0);
        let (y, _) = bn.forward_train(&x);
        for ch in 0..2 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let m = 4.0 * 9.0;
            for b in 0..4 {
                for yy in 0..3 {
                    for xx in 0..3 {
                        s += y[[b, ch, yy, xx]];
                        s2 += y[[b, ch, yy, xx]].powi(2);
                    }
                }
            }
            assert!((s / m).abs() < 1e-10);
            assert!((s2 / m - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bn0 = BatchNorm2d::new(2);
        let x = Array4::from_shape_fn((3, 2, 2, 2), |_| rng.random::<f64>() - 0.5);
        let loss = |bn: &BatchNorm2d, x: &Array4<f64>| {
            let mut b = bn.clone();
            let (y, _) = b.forward_train(x);
            y.mapv(|v| v * v).sum()
        };

        let mut bn = bn0.clone();
        let (y, cache) = bn.forward_train(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = bn.backward(&cache, &dy);

        let h = 1e-6;
        for pos in [[0, 0, 0, 0], [2, 1, 1, 1], [1, 0, 1, 0]] {
            let mut xp = x.clone();
            xp[pos] += h;
            let mut xm = x.clone();
            xm[pos] -= h;
            let num = (loss(&bn0, &xp) - loss(&bn0, &xm)) / (2.0 * h);
            let ana = dx[pos];
            assert!(
                (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-5,
                "pos {pos:?}: numeric {num} analytic {ana}"
            );
        }

        // gamma/beta grads
        for (i, idx) in [(0usize, 0usize), (1, 3)] {
            let _ = i;
            let mut p = bn0.clone();
            p.nudge_param(idx, h);
            let mut mn = bn0.clone();
            mn.nudge_param(idx, -h);
            let num = (loss(&p, &x) - loss(&mn, &x)) / (2.0 * h);
            let ana = bn.grad_at(idx);
            assert!((num - ana).abs() / (num.abs() + ana.abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn eval_uses_running_stats() {
        let mut bn = BatchNorm2d::new(1);
        bn.running_mean[0] = 2.0;
        bn.running_var[0] = 4.0;
        let x = Array4::from_elem((1, 1, 1, 1), 4.0);
        let y = bn.forward_eval(&x);
        // (4 - 2) / sqrt(4 + eps) ~ 1.0
        assert!((y[[0, 0, 0, 0]] - 1.0).abs() < 1e-5);
    }
}
