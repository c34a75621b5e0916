//! Random networks for tests and benchmarks.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::model::{DecoderModel, Layer, Linear};

/// ReLU network with the given hidden widths and Glorot-scaled uniform weights.
pub fn random_model<R: Rng>(
    rng: &mut R,
    x_dim: usize,
    z_dim: usize,
    hidden: &[usize],
    out_dim: usize,
) -> DecoderModel {
    let mut widths = vec![x_dim + z_dim];
    widths.extend_from_slice(hidden);
    widths.push(out_dim);
    let mut layers = Vec::new();
    for (i, pair) in widths.windows(2).enumerate() {
        if i > 0 {
            layers.push(Layer::Relu);
        }
        let scale = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
        let weight = Array2::from_shape_fn((pair[1], pair[0]), |_| rng.random_range(-scale..scale));
        let bias = Array1::from_shape_fn(pair[1], |_| rng.random_range(-0.5..0.5));
        layers.push(Layer::Linear(Linear::new(weight, bias)));
    }
    DecoderModel::new(x_dim, z_dim, layers).expect("random model is well formed")
}
