//! Distance metrics between embeddings and prototypes.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Euclidean is the default; the squared variant is kept as a selectable
/// alternative and the choice is recorded in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistanceKind {
    Euclidean,
    SquaredEuclidean,
}

impl DistanceKind {
    pub fn eval(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
        let sq: f64 = a
            .iter()
            .zip(b.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        match self {
            DistanceKind::Euclidean => sq.sqrt(),
            DistanceKind::SquaredEuclidean => sq,
        }
    }

    /// Gradient of `d(a, b)` with respect to `a`. For the Euclidean metric at
    /// `a == b` the distance is not differentiable; the subgradient 0 is used.
    pub fn grad_wrt_a(&self, a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
        let diff = &a.to_owned() - &b;
        match self {
            DistanceKind::Euclidean => {
                let d = self.eval(a, b);
                if d < 1e-12 {
                    Array1::zeros(a.len())
                } else {
                    diff / d
                }
            }
            DistanceKind::SquaredEuclidean => diff * 2.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DistanceKind::Euclidean => "euclidean",
            DistanceKind::SquaredEuclidean => "squared_euclidean",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "euclidean" => Ok(DistanceKind::Euclidean),
            "squared_euclidean" => Ok(DistanceKind::SquaredEuclidean),
            other => Err(Error::Config(format!("unknown distance '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn euclidean_matches_hand_values() {
        let a = array![3.0, 4.0];
        let b = array![0.0, 0.0];
        assert!((DistanceKind::Euclidean.eval(a.view(), b.view()) - 5.0).abs() < 1e-12);
        assert!((DistanceKind::SquaredEuclidean.eval(a.view(), b.view()) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let a = array![1.0, -2.0, 0.5];
        let b = array![0.3, 0.7, -0.2];
        for kind in [DistanceKind::Euclidean, DistanceKind::SquaredEuclidean] {
            let g = kind.grad_wrt_a(a.view(), b.view());
            let h = 1e-6;
            for i in 0..3 {
                let mut ap = a.clone();
                ap[i] += h;
                let mut am = a.clone();
                am[i] -= h;
                let num = (kind.eval(ap.view(), b.view()) - kind.eval(am.view(), b.view()))
                    / (2.0 * h);
                assert!((num - g[i]).abs() < 1e-6, "{kind:?} index {i}");
            }
        }
    }
}
