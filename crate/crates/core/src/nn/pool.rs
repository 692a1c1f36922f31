//! 2x2 max pooling, stride 2. Odd trailing rows/columns are dropped.

use ndarray::Array4;

pub struct MaxPool2;

/// Flat index (into the input h*w plane) of each window's maximum.
pub struct PoolCache {
    pub argmax: Vec<u32>,
    pub in_h: usize,
    pub in_w: usize,
}

impl MaxPool2 {
    pub fn forward(x: &Array4<f64>) -> (Array4<f64>, PoolCache) {
        let (n, c, h, w) = x.dim();
        let oh = h / 2;
        let ow = w / 2;
        let mut y = Array4::<f64>::zeros((n, c, oh, ow));
        let mut argmax = vec![0u32; n * c * oh * ow];
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0u32;
                        for dy in 0..2usize {
                            for dx in 0..2usize {
                                let iy = oy * 2 + dy;
                                let ix = ox * 2 + dx;
                                let v = x[[b, ch, iy, ix]];
                                // strict > keeps the first maximum on ties
                                if v > best {
                                    best = v;
                                    best_idx = (iy * w + ix) as u32;
                                }
                            }
                        }
                        y[[b, ch, oy, ox]] = best;
                        argmax[k] = best_idx;
                        k += 1;
                    }
                }
            }
        }
        (
            y,
            PoolCache {
                argmax,
                in_h: h,
                in_w: w,
            },
        )
    }

    pub fn backward(cache: &PoolCache, dy: &Array4<f64>) -> Array4<f64> {
        let (n, c, oh, ow) = dy.dim();
        let (h, w) = (cache.in_h, cache.in_w);
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let mut k = 0;
        for b in 0..n {
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let flat = cache.argmax[k] as usize;
                        dx[[b, ch, flat / w, flat % w]] += dy[[b, ch, oy, ox]];
                        k += 1;
                    }
                }
            }
        }
        dx
    }
}
