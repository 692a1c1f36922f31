//! Adam optimizer over a [`Parameterized`] model.

use super::Parameterized;

pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    // first/second moment buffers, one pair per visited parameter block
    state: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: Vec::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn Parameterized) {
        self.t += 1;
        let t = self.t;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.eps);
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let state = &mut self.state;
        let mut block = 0usize;
        model.visit_params(&mut |v, g| {
            if state.len() <= block {
                state.push((vec![0.0; v.len()], vec![0.0; v.len()]));
            }
            let (m, s) = &mut state[block];
            assert_eq!(m.len(), v.len(), "parameter layout changed between steps");
            for i in 0..v.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                s[i] = b2 * s[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let s_hat = s[i] / bc2;
                v[i] -= lr * m_hat / (s_hat.sqrt() + eps);
            }
            block += 1;
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        x: Vec<f64>,
        g: Vec<f64>,
    }

    impl Parameterized for Quadratic {
        fn visit_params(&mut self, f: &mut dyn FnMut(&mut [f64], &mut [f64])) {
            f(&mut self.x, &mut self.g);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quadratic {
            x: vec![3.0, -2.0],
            g: vec![0.0, 0.0],
        };
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            for i in 0..2 {
                q.g[i] = 2.0 * q.x[i];
            }
            opt.step(&mut q);
        }
        assert!(q.x.iter().all(|v| v.abs() < 1e-3), "{:?}", q.x);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut q = Quadratic {
            x: vec![1.0, 2.0],
            g: vec![5.0, -5.0],
        };
        let mut opt = Adam::new(0.0);
        opt.step(&mut q);
        assert_eq!(q.x, vec![1.0, 2.0]);
    }
}
