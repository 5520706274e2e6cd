//! Small dense layers used by the decoder.
//!
//! Everything here evaluates rows with a fixed summation order so that the
//! forward pass is bit-reproducible for a given parameter seed.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Deterministic parameter source.
///
/// Every tensor is drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` in
/// construction order from a single ChaCha8 stream seeded with `seed`.
pub struct ParamInit {
    rng: ChaCha8Rng,
}

impl ParamInit {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn linear(&mut self, in_features: usize, out_features: usize) -> Linear {
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let weight = Array2::from_shape_fn((out_features, in_features), |_| self.rng.gen_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_features, |_| self.rng.gen_range(-bound..bound));
        Linear { weight, bias }
    }

    pub fn mlp(&mut self, in_features: usize, hidden: usize, out_features: usize) -> Mlp {
        Mlp {
            hidden: self.linear(in_features, hidden),
            out: self.linear(hidden, out_features),
        }
    }
}

/// Affine map `y = W x + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Array2::zeros((out_features, in_features)),
            bias: Array1::zeros(out_features),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_features(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_features());
        self.weight
            .outer_iter()
            .zip(self.bias.iter())
            .map(|(w, &b)| {
                let mut acc = b;
                for (wi, xi) in w.iter().zip(x) {
                    acc += wi * xi;
                }
                acc
            })
            .collect()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out_features()));
        let w = self.weight.as_standard_layout();
        let w = w.as_slice().expect("standard layout");
        let n_in = self.in_features();
        for (xr, mut or) in x.outer_iter().zip(out.outer_iter_mut()) {
            let xr = xr.to_vec();
            // same summation order as forward_row
            for (r, (o, &b)) in or.iter_mut().zip(self.bias.iter()).enumerate() {
                let wr = &w[r * n_in..(r + 1) * n_in];
                let mut acc = b;
                for (wi, xi) in wr.iter().zip(&xr) {
                    acc += wi * xi;
                }
                *o = acc;
            }
        }
        out
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn zeros(in_features: usize, hidden: usize, out_features: usize) -> Self {
        Self {
            hidden: Linear::zeros(in_features, hidden),
            out: Linear::zeros(hidden, out_features),
        }
    }

    pub fn forward_row(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.hidden.forward_row(x).into_iter().map(|v| v.max(0.0)).collect();
        self.out.forward_row(&h)
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut out = Array2::zeros((x.nrows(), self.out.out_features()));
        for (r, row) in x.outer_iter().enumerate() {
            for (c, v) in self.forward_row(&row.to_vec()).into_iter().enumerate() {
                out[[r, c]] = v;
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in values.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in values.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn has_nan(x: ArrayView2<'_, f64>) -> bool {
    x.iter().any(|v| v.is_nan())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn linear_matches_hand_arithmetic() {
        let lin = Linear {
            weight: array![[1.0, 2.0], [0.0, -1.0]],
            bias: array![0.5, 1.0],
        };
        assert_eq!(lin.forward_row(&[3.0, 4.0]), vec![11.5, -3.0]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = ParamInit::new(7).linear(16, 4);
        let b = ParamInit::new(7).linear(16, 4);
        assert_eq!(a, b);
        assert!(a.weight.iter().all(|w| w.abs() < 0.25));
        assert_ne!(a, ParamInit::new(8).linear(16, 4));
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [1.0, 2.0, 3.0, -1e9];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(v[3], 0.0);
    }
}
