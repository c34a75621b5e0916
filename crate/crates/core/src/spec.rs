//! Encoding output properties as linear specifications over a stacked network.
//!
//! A [`VerificationProblem`] asks whether `P(cᵀ f(u, z) + d ≥ 0) ≤ ε` for every
//! `u` in a box of free variables. Properties that compare several inputs
//! (monotonicity, midpoint convexity) replicate the decoder with a shared
//! latent and fold an affine map `x = T·u + t` from free variables to the
//! stacked conditioning input into the first layer.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{DecoderModel, Layer, Linear};

/// Axis-aligned box `{lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl InputBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = Self { lower, upper };
        b.check()?;
        Ok(b)
    }

    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo], vec![hi])
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }

    fn check(&self) -> Result<()> {
        if self.lower.len() != self.upper.len() {
            return Err(Error::InvalidSpec(format!(
                "box bounds have lengths {} and {}",
                self.lower.len(),
                self.upper.len()
            )));
        }
        if self.lower.is_empty() {
            return Err(Error::InvalidSpec("box is zero-dimensional".into()));
        }
        for (i, (lo, hi)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidSpec(format!("box bound {i} is not finite")));
            }
            if lo > hi {
                return Err(Error::InvalidSpec(format!(
                    "box lower bound {lo} exceeds upper bound {hi} in coordinate {i}"
                )));
            }
        }
        Ok(())
    }

    fn product(&self, other: &InputBox) -> InputBox {
        InputBox {
            lower: self.lower.iter().chain(&other.lower).copied().collect(),
            upper: self.upper.iter().chain(&other.upper).copied().collect(),
        }
    }
}

/// Stacked input `x = matrix · u + offset`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineInputMap {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
}

impl AffineInputMap {
    pub fn identity(dim: usize) -> Self {
        Self {
            matrix: Array2::eye(dim),
            offset: Array1::zeros(dim),
        }
    }

    pub fn apply(&self, u: &[f64]) -> Array1<f64> {
        self.matrix.dot(&Array1::from(u.to_vec())) + &self.offset
    }
}

/// A property as it appears in a spec file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "property", rename_all = "snake_case")]
pub enum PropertySpec {
    BoundedAbove {
        a: f64,
        x_box: InputBox,
        epsilon: f64,
    },
    BoundedBelow {
        b: f64,
        x_box: InputBox,
        epsilon: f64,
    },
    Monotonicity {
        x_box: InputBox,
        gap_max: f64,
        epsilon: f64,
    },
    MidpointConvexity {
        x_box: InputBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        x2_box: Option<InputBox>,
        epsilon: f64,
    },
}

impl PropertySpec {
    pub fn epsilon(&self) -> f64 {
        match self {
            PropertySpec::BoundedAbove { epsilon, .. }
            | PropertySpec::BoundedBelow { epsilon, .. }
            | PropertySpec::Monotonicity { epsilon, .. }
            | PropertySpec::MidpointConvexity { epsilon, .. } => *epsilon,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn spec_from_json(text: &str) -> Result<PropertySpec> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "spec file",
        message: e.to_string(),
    })
}

pub fn load_spec_file(path: impl AsRef<std::path::Path>) -> Result<PropertySpec> {
    let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    spec_from_json(&text)
}

/// One instance of the probabilistic verification problem.
#[derive(Debug, Clone)]
pub struct VerificationProblem {
    /// Stacked, affine-folded network over free variables `u` and latent `z`.
    pub network: DecoderModel,
    pub c: Array1<f64>,
    pub d: f64,
    pub free_box: InputBox,
    pub epsilon: f64,
    pub copies: usize,
    pub model_digest: String,
    pub spec_digest: String,
}

impl VerificationProblem {
    /// `cᵀ f(u, z) + d`; the property is violated where this is `≥ 0`.
    pub fn spec_value(&self, u: &[f64], z: &[f64]) -> Result<f64> {
        Ok(self.c.dot(&self.network.forward(u, z)?) + self.d)
    }

    /// [`spec_value`](Self::spec_value) for one latent sample per row of `z`.
    pub fn spec_values(&self, u: &[f64], z: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.network.forward_batch(u, z)?.dot(&self.c) + self.d)
    }

    pub fn z_dim(&self) -> usize {
        self.network.z_dim
    }

    /// Same problem with `d` replaced; used by threshold searches.
    pub fn with_offset(&self, d: f64) -> Self {
        Self { d, ..self.clone() }
    }

    pub fn check(&self) -> Result<()> {
        self.free_box.check()?;
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "epsilon must lie in (0, 1), got {}",
                self.epsilon
            )));
        }
        if self.c.len() != self.network.out_dim() {
            return Err(Error::InvalidSpec(format!(
                "c has length {} but the network has {} outputs",
                self.c.len(),
                self.network.out_dim()
            )));
        }
        if self.free_box.dim() != self.network.x_dim {
            return Err(Error::InvalidSpec(format!(
                "free box has dimension {} but the network takes {} inputs",
                self.free_box.dim(),
                self.network.x_dim
            )));
        }
        if !self.d.is_finite() || self.c.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidSpec("c and d must be finite".into()));
        }
        Ok(())
    }
}

/// Replicates the decoder `copies` times over a shared latent input.
///
/// Stacked inputs are `[x⁽¹⁾; …; x⁽ᵏ⁾; z]` and outputs `[f(x⁽¹⁾, z); …]`.
pub fn stack_network(model: &DecoderModel, copies: usize) -> Result<DecoderModel> {
    if copies == 0 {
        return Err(Error::InvalidSpec("copies must be at least 1".into()));
    }
    if copies == 1 {
        return Ok(model.clone());
    }
    let (xd, zd) = (model.x_dim, model.z_dim);
    let mut layers = Vec::with_capacity(model.layers.len());
    let mut first = true;
    for layer in &model.layers {
        match layer {
            Layer::Relu => layers.push(Layer::Relu),
            Layer::Linear(lin) => {
                let rows = lin.out_dim();
                let (weight, bias) = if first {
                    first = false;
                    let mut w = Array2::zeros((rows * copies, xd * copies + zd));
                    for i in 0..copies {
                        let r = i * rows..(i + 1) * rows;
                        w.slice_mut(s![r.clone(), i * xd..(i + 1) * xd])
                            .assign(&lin.weight.slice(s![.., ..xd]));
                        w.slice_mut(s![r, xd * copies..])
                            .assign(&lin.weight.slice(s![.., xd..]));
                    }
                    (w, tile(&lin.bias, copies))
                } else {
                    let cols = lin.in_dim();
                    let mut w = Array2::zeros((rows * copies, cols * copies));
                    for i in 0..copies {
                        w.slice_mut(s![i * rows..(i + 1) * rows, i * cols..(i + 1) * cols])
                            .assign(&lin.weight);
                    }
                    (w, tile(&lin.bias, copies))
                };
                layers.push(Layer::Linear(Linear::new(weight, bias)));
            }
        }
    }
    DecoderModel::new(xd * copies, zd, layers)
}

fn tile(v: &Array1<f64>, copies: usize) -> Array1<f64> {
    (0..copies).flat_map(|_| v.iter().copied()).collect()
}

/// Rewrites the model over free variables: `f'(u, z) = f(T·u + t, z)`.
pub fn fold_affine_input(model: &DecoderModel, map: &AffineInputMap) -> Result<DecoderModel> {
    if map.matrix.nrows() != model.x_dim || map.offset.len() != model.x_dim {
        return Err(Error::Shape {
            layer: 0,
            detail: format!(
                "input map produces {} (offset {}) values, model expects {}",
                map.matrix.nrows(),
                map.offset.len(),
                model.x_dim
            ),
        });
    }
    let lin = model.first_linear();
    let w0 = model.conditioning_block();
    let free = map.matrix.ncols();
    let mut weight = Array2::zeros((lin.out_dim(), free + model.z_dim));
    weight.slice_mut(s![.., ..free]).assign(&w0.dot(&map.matrix));
    weight
        .slice_mut(s![.., free..])
        .assign(&model.latent_block());
    let bias = &lin.bias + &w0.dot(&map.offset);
    let mut layers = model.layers.clone();
    layers[0] = Layer::Linear(Linear::new(weight, bias));
    DecoderModel::new(free, model.z_dim, layers)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "epsilon must lie in (0, 1), got {epsilon}"
        )))
    }
}

fn require_scalar_output(model: &DecoderModel) -> Result<()> {
    if model.out_dim() == 1 {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "property needs a scalar-output model, got out_dim {}",
            model.out_dim()
        )))
    }
}

fn require_box_dim(b: &InputBox, dim: usize, name: &str) -> Result<()> {
    b.check()?;
    if b.dim() == dim {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!(
            "{name} has dimension {}, model x_dim is {dim}",
            b.dim()
        )))
    }
}

/// Builds the problem encoded by a spec file.
pub fn build(model: &DecoderModel, spec: &PropertySpec) -> Result<VerificationProblem> {
    check_epsilon(spec.epsilon())?;
    require_scalar_output(model)?;
    let (network, c, d, free_box, copies) = match spec {
        PropertySpec::BoundedAbove { a, x_box, .. } => {
            require_box_dim(x_box, model.x_dim, "x_box")?;
            (model.clone(), vec![1.0], -a, x_box.clone(), 1)
        }
        PropertySpec::BoundedBelow { b, x_box, .. } => {
            require_box_dim(x_box, model.x_dim, "x_box")?;
            (model.clone(), vec![-1.0], *b, x_box.clone(), 1)
        }
        PropertySpec::Monotonicity { x_box, gap_max, .. } => {
            if model.x_dim != 1 {
                return Err(Error::InvalidSpec(
                    "monotonicity supports scalar conditioning inputs only".into(),
                ));
            }
            if !(gap_max.is_finite() && *gap_max >= 0.0) {
                return Err(Error::InvalidSpec(format!(
                    "gap_max must be a finite non-negative number, got {gap_max}"
                )));
            }
            require_box_dim(x_box, 1, "x_box")?;
            // u = (x₁, s), x₂ = x₁ + s with s ∈ [0, gap_max].
            let map = AffineInputMap {
                matrix: ndarray::array![[1.0, 0.0], [1.0, 1.0]],
                offset: Array1::zeros(2),
            };
            let stacked = stack_network(model, 2)?;
            let free_box = x_box.product(&InputBox::interval(0.0, *gap_max)?);
            (fold_affine_input(&stacked, &map)?, vec![1.0, -1.0], 0.0, free_box, 2)
        }
        PropertySpec::MidpointConvexity { x_box, x2_box, .. } => {
            let n = model.x_dim;
            require_box_dim(x_box, n, "x_box")?;
            let x2_box = x2_box.as_ref().unwrap_or(x_box);
            require_box_dim(x2_box, n, "x2_box")?;
            // u = (x₁, x₂), third copy sees (x₁ + x₂) / 2.
            let mut matrix = Array2::zeros((3 * n, 2 * n));
            for i in 0..n {
                matrix[[i, i]] = 1.0;
                matrix[[n + i, n + i]] = 1.0;
                matrix[[2 * n + i, i]] = 0.5;
                matrix[[2 * n + i, n + i]] = 0.5;
            }
            let map = AffineInputMap {
                matrix,
                offset: Array1::zeros(3 * n),
            };
            let stacked = stack_network(model, 3)?;
            (
                fold_affine_input(&stacked, &map)?,
                vec![0.5, 0.5, -1.0],
                0.0,
                x_box.product(x2_box),
                3,
            )
        }
    };
    let problem = VerificationProblem {
        network,
        c: Array1::from(c),
        d,
        free_box,
        epsilon: spec.epsilon(),
        copies,
        model_digest: model.digest(),
        spec_digest: spec.digest(),
    };
    problem.check()?;
    Ok(problem)
}

/// `P(f(x, z) − a ≥ 0) ≤ ε` for all `x` in the box.
pub fn build_bounded_above(
    model: &DecoderModel,
    a: f64,
    x_box: &InputBox,
    epsilon: f64,
) -> Result<VerificationProblem> {
    build(
        model,
        &PropertySpec::BoundedAbove {
            a,
            x_box: x_box.clone(),
            epsilon,
        },
    )
}

/// `P(b − f(x, z) ≥ 0) ≤ ε` for all `x` in the box.
pub fn build_bounded_below(
    model: &DecoderModel,
    b: f64,
    x_box: &InputBox,
    epsilon: f64,
) -> Result<VerificationProblem> {
    build(
        model,
        &PropertySpec::BoundedBelow {
            b,
            x_box: x_box.clone(),
            epsilon,
        },
    )
}

/// `P(f(x₁, z) − f(x₂, z) ≥ 0) ≤ ε` for `x₁` in the box and `x₁ ≤ x₂ ≤ x₁ + gap_max`.
pub fn build_monotonicity(
    model: &DecoderModel,
    x1_box: &InputBox,
    gap_max: f64,
    epsilon: f64,
) -> Result<VerificationProblem> {
    build(
        model,
        &PropertySpec::Monotonicity {
            x_box: x1_box.clone(),
            gap_max,
            epsilon,
        },
    )
}

/// `P((f(x₁, z) + f(x₂, z))/2 − f((x₁ + x₂)/2, z) ≥ 0) ≤ ε` over `x1_box × x2_box`.
pub fn build_midpoint_convexity(
    model: &DecoderModel,
    x1_box: &InputBox,
    x2_box: Option<&InputBox>,
    epsilon: f64,
) -> Result<VerificationProblem> {
    build(
        model,
        &PropertySpec::MidpointConvexity {
            x_box: x1_box.clone(),
            x2_box: x2_box.cloned(),
            epsilon,
        },
    )
}
