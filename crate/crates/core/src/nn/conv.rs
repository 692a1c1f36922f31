//! 3x3 convolution, stride 1, zero padding 1 (spatial size preserved).

use ndarray::{Array1, Array2, Array4, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Parameterized;

/// A 3x3 same-padding convolution. The kernel is stored flattened as
/// `[out_channels, in_channels * 9]`; column `c * 9 + ky * 3 + kx` holds the
/// tap for input channel `c` at kernel offset `(ky, kx)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub gw: Array2<f64>,
    pub gb: Array1<f64>,
}

/// Equality over the learned values only; gradient buffers are scratch.
impl PartialEq for Conv2d {
    fn eq(&self, other: &Self) -> bool {
        self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.w == other.w
            && self.b == other.b
    }
}

impl Conv2d {
    /// He-initialized weights, zero biases.
    pub fn new(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let k = in_channels * 9;
        let std = (2.0 / k as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let w = Array2::from_shape_fn((out_channels, k), |_| normal.sample(rng));
        Conv2d {
            in_channels,
            out_channels,
            w,
            b: Array1::zeros(out_channels),
            gw: Array2::zeros((out_channels, k)),
            gb: Array1::zeros(out_channels),
        }
    }

    /// Patch matrix for the whole batch: `[in_channels * 9, n * h * w]`.
    fn im2col(&self, x: &Array4<f64>) -> Array2<f64> {
        let (n, cin, h, w) = x.dim();
        let hw = h * w;
        let mut cols = Array2::<f64>::zeros((cin * 9, n * hw));
        for b in 0..n {
            for c in 0..cin {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let row = c * 9 + ky * 3 + kx;
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let col_base = b * hw + oy * w;
                            for ox in 0..w {
                                let ix = ox as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cols[[row, col_base + ox]] = x[[b, c, iy as usize, ix as usize]];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, _, h, w) = x.dim();
        let hw = h * w;
        let cols = self.im2col(x);
        let mut y2 = self.w.dot(&cols); // [out, n*hw]
        for (mut row, &bias) in y2.axis_iter_mut(Axis(0)).zip(self.b.iter()) {
            row += bias;
        }
        let mut y = Array4::<f64>::zeros((n, self.out_channels, h, w));
        for b in 0..n {
            for oc in 0..self.out_channels {
                for oy in 0..h {
                    for ox in 0..w {
                        y[[b, oc, oy, ox]] = y2[[oc, b * hw + oy * w + ox]];
                    }
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    /// `x` must be the same input that produced `dy`.
    pub fn backward(&mut self, x: &Array4<f64>, dy: &Array4<f64>) -> Array4<f64> {
        let (n, cin, h, w) = x.dim();
        let hw = h * w;
        let mut dy2 = Array2::<f64>::zeros((self.out_channels, n * hw));
        for b in 0..n {
            for oc in 0..self.out_channels {
                for oy in 0..h {
                    for ox in 0..w {
                        dy2[[oc, b * hw + oy * w + ox]] = dy[[b, oc, oy, ox]];
                    }
                }
            }
        }
        let cols = self.im2col(x);
        self.gw += &dy2.dot(&cols.t());
        self.gb += &dy2.sum_axis(Axis(1));

        // col2im: scatter-add patch gradients back to input positions.
        let dcols = self.w.t().dot(&dy2); // [cin*9, n*hw]
        let mut dx = Array4::<f64>::zeros((n, cin, h, w));
        for b in 0..n {
            for c in 0..cin {
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let row = c * 9 + ky * 3 + kx;
                        for oy in 0..h {
                            let iy = oy as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let col_base = b * hw + oy * w;
                            for ox in 0..w {
                                let ix = ox as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                dx[[b, c, iy as usize, ix as usize]] += dcols[[row, col_base + ox]];
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for Conv2d {
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
