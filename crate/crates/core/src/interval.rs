//! Interval bounds on every Linear layer's output, valid for all free
//! variables in the free box and all latents in `[α, β]`.
//!
//! Linear layers use center–radius arithmetic (center through `W`, radius
//! through `|W|`), widened outward by a floating-point error bound; ReLU maps
//! interval endpoints elementwise. The reverse pass
//! [`IntervalBounds::pullback_latent`] differentiates the bounds with respect
//! to `α` and `β` so the optimizer can move the latent box.

use ndarray::{s, Array1, Zip};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, Layer};
use crate::spec::{InputBox, VerificationProblem};

/// Latent conditioning box `[α, β]` with `β = α + η²`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBox {
    pub alpha: Array1<f64>,
    pub eta: Array1<f64>,
}

impl LatentBox {
    pub fn new(alpha: Array1<f64>, eta: Array1<f64>) -> Self {
        assert_eq!(alpha.len(), eta.len(), "alpha and eta lengths differ");
        Self { alpha, eta }
    }

    /// Box from explicit endpoints; `beta < alpha` is clamped to an empty-interior box.
    pub fn from_bounds(alpha: Array1<f64>, beta: &Array1<f64>) -> Self {
        let eta = Zip::from(&alpha)
            .and(beta)
            .map_collect(|a, b| (b - a).max(0.0).sqrt());
        Self { alpha, eta }
    }

    /// Same scalar interval in every latent coordinate.
    pub fn uniform(dim: usize, alpha: f64, beta: f64) -> Self {
        Self::from_bounds(Array1::from_elem(dim, alpha), &Array1::from_elem(dim, beta))
    }

    pub fn beta(&self) -> Array1<f64> {
        &self.alpha + &self.eta.mapv(|e| e * e)
    }

    pub fn dim(&self) -> usize {
        self.alpha.len()
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        let beta = self.beta();
        z.len() == self.dim()
            && z
                .iter()
                .zip(self.alpha.iter().zip(beta.iter()))
                .all(|(v, (a, b))| a <= v && v <= b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Interval {
    pub lower: Array1<f64>,
    pub upper: Array1<f64>,
}

impl Interval {
    fn relu(&self) -> Interval {
        Interval {
            lower: self.lower.mapv(|v| v.max(0.0)),
            upper: self.upper.mapv(|v| v.max(0.0)),
        }
    }
}

/// Boxes for the input and for the output of each Linear layer.
///
/// `layers[k]` bounds `x_{k+1}`, the output of the `k`-th Linear layer
/// (before its ReLU); the last entry bounds the network output.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalBounds {
    pub input: Interval,
    pub latent: Interval,
    pub layers: Vec<Interval>,
}

impl IntervalBounds {
    pub fn output(&self) -> &Interval {
        self.layers.last().expect("at least one linear layer")
    }
}

pub fn propagate(problem: &VerificationProblem, latent: &LatentBox) -> Result<IntervalBounds> {
    propagate_network(&problem.network, &problem.free_box, latent)
}

pub fn propagate_network(
    network: &DecoderModel,
    free_box: &InputBox,
    latent: &LatentBox,
) -> Result<IntervalBounds> {
    if free_box.dim() != network.x_dim || latent.dim() != network.z_dim {
        return Err(Error::Dimension {
            what: "interval propagation input",
            expected: network.x_dim + network.z_dim,
            got: free_box.dim() + latent.dim(),
        });
    }
    let input = Interval {
        lower: Array1::from(free_box.lower.clone()),
        upper: Array1::from(free_box.upper.clone()),
    };
    let latent_iv = Interval {
        lower: latent.alpha.clone(),
        upper: latent.beta(),
    };
    let mut current = Interval {
        lower: ndarray::concatenate![ndarray::Axis(0), input.lower, latent_iv.lower],
        upper: ndarray::concatenate![ndarray::Axis(0), input.upper, latent_iv.upper],
    };
    let mut layers = Vec::new();
    for layer in &network.layers {
        match layer {
            Layer::Linear(lin) => {
                let center = (&current.lower + &current.upper) * 0.5;
                let radius = (&current.upper - &current.lower) * 0.5;
                let abs_w = lin.weight.mapv(f64::abs);
                let mid = lin.weight.dot(&center) + &lin.bias;
                let spread = abs_w.dot(&radius);
                // Outward rounding: covers the floating-point error of the dot products.
                let gamma = (lin.in_dim() + 2) as f64 * f64::EPSILON;
                let slack = (abs_w.dot(&center.mapv(f64::abs)) + lin.bias.mapv(f64::abs) + &spread) * gamma;
                let out = Interval {
                    lower: &mid - &spread - &slack,
                    upper: &mid + &spread + &slack,
                };
                if out.lower.iter().chain(out.upper.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::Overflow {
                        layer: layers.len(),
                    });
                }
                layers.push(out.clone());
                current = out;
            }
            Layer::Relu => current = current.relu(),
        }
    }
    Ok(IntervalBounds {
        input,
        latent: latent_iv,
        layers,
    })
}

impl IntervalBounds {
    /// Reverse-mode pass: given `∂J/∂lower_k` and `∂J/∂upper_k` for every
    /// layer box, returns `(∂J/∂α, ∂J/∂β)`.
    ///
    /// ReLU endpoints use the subgradient `1[v > 0]`.
    pub fn pullback_latent(
        &self,
        network: &DecoderModel,
        grad_lower: &[Array1<f64>],
        grad_upper: &[Array1<f64>],
    ) -> (Array1<f64>, Array1<f64>) {
        let linears = network.linears();
        debug_assert_eq!(grad_lower.len(), linears.len());
        let mut gl = grad_lower.last().expect("non-empty").clone();
        let mut gu = grad_upper.last().expect("non-empty").clone();
        for k in (0..linears.len()).rev() {
            let w = &linears[k].weight;
            let g_center = &gl + &gu;
            let g_radius = &gu - &gl;
            let gm = w.t().dot(&g_center);
            let gr = w.mapv(f64::abs).t().dot(&g_radius);
            let g_in_lo = (&gm - &gr) * 0.5;
            let g_in_hi = (&gm + &gr) * 0.5;
            if k == 0 {
                let xd = network.x_dim;
                return (
                    g_in_lo.slice(s![xd..]).to_owned(),
                    g_in_hi.slice(s![xd..]).to_owned(),
                );
            }
            let prev = &self.layers[k - 1];
            gl = &grad_lower[k - 1]
                + &Zip::from(&g_in_lo)
                    .and(&prev.lower)
                    .map_collect(|g, l| if *l > 0.0 { *g } else { 0.0 });
            gu = &grad_upper[k - 1]
                + &Zip::from(&g_in_hi)
                    .and(&prev.upper)
                    .map_collect(|g, u| if *u > 0.0 { *g } else { 0.0 });
        }
        unreachable!("loop returns at the first layer")
    }
}
