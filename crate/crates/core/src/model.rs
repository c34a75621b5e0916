//! Feedforward decoder networks `f(x, z)`.
//!
//! The first Linear layer acts on the concatenation `[x; z]`: its leading
//! `x_dim` columns form the conditioning block and the trailing `z_dim`
//! columns the latent block. Layers alternate Linear / ReLU and both begin
//! and end with a Linear layer.

use std::fmt;
use std::io::Read;

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Self {
        Self { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderModel {
    pub x_dim: usize,
    pub z_dim: usize,
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FindingKind {
    Shape,
    NonFinite,
    Ordering,
    Dimension,
}

/// One invariant violation reported by [`DecoderModel::validate`].
#[derive(Debug, Clone, PartialEq)]
pub struct Finding {
    pub layer: Option<usize>,
    pub kind: FindingKind,
    pub message: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.layer {
            Some(i) => write!(f, "layer {}: {}", i, self.message),
            None => write!(f, "model: {}", self.message),
        }
    }
}

impl Finding {
    fn into_error(self) -> Error {
        let layer = self.layer.unwrap_or(0);
        match self.kind {
            FindingKind::Shape | FindingKind::Dimension => Error::Shape {
                layer,
                detail: self.message,
            },
            FindingKind::NonFinite => Error::NonFinite {
                layer,
                field: if self.message.contains("bias") {
                    "b"
                } else {
                    "W"
                },
            },
            FindingKind::Ordering => Error::Structure {
                layer,
                detail: self.message,
            },
        }
    }
}

impl DecoderModel {
    /// Builds a model and checks every invariant.
    pub fn new(x_dim: usize, z_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let model = Self {
            x_dim,
            z_dim,
            layers,
        };
        match model.validate().into_iter().next() {
            Some(finding) => Err(finding.into_error()),
            None => Ok(model),
        }
    }

    /// Lists every invariant violation; empty iff the model is valid.
    pub fn validate(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        let mut push = |layer: Option<usize>, kind, message: String| {
            findings.push(Finding {
                layer,
                kind,
                message,
            })
        };

        if self.x_dim == 0 {
            push(None, FindingKind::Dimension, "x_dim must be positive".into());
        }
        if self.z_dim == 0 {
            push(None, FindingKind::Dimension, "z_dim must be positive".into());
        }
        if self.layers.is_empty() {
            push(None, FindingKind::Ordering, "model has no layers".into());
            return findings;
        }
        if !matches!(self.layers.first(), Some(Layer::Linear(_))) {
            push(
                Some(0),
                FindingKind::Ordering,
                "first layer must be linear".into(),
            );
        }
        if !matches!(self.layers.last(), Some(Layer::Linear(_))) {
            push(
                Some(self.layers.len() - 1),
                FindingKind::Ordering,
                "last layer must be linear".into(),
            );
        }

        let mut width: Option<usize> = Some(self.x_dim + self.z_dim);
        let mut previous_linear: Option<bool> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Linear(lin) => {
                    if previous_linear == Some(true) {
                        push(
                            Some(i),
                            FindingKind::Ordering,
                            "linear layer follows linear layer".into(),
                        );
                    }
                    previous_linear = Some(true);
                    if lin.weight.nrows() != lin.bias.len() {
                        push(
                            Some(i),
                            FindingKind::Shape,
                            format!(
                                "W has {} rows but b has length {}",
                                lin.weight.nrows(),
                                lin.bias.len()
                            ),
                        );
                    }
                    if let Some(w) = width {
                        if lin.in_dim() != w {
                            push(
                                Some(i),
                                FindingKind::Shape,
                                format!("W has {} columns, expected {}", lin.in_dim(), w),
                            );
                        }
                    }
                    if lin.weight.iter().any(|v| !v.is_finite()) {
                        push(Some(i), FindingKind::NonFinite, "non-finite weight".into());
                    }
                    if lin.bias.iter().any(|v| !v.is_finite()) {
                        push(Some(i), FindingKind::NonFinite, "non-finite bias".into());
                    }
                    width = Some(lin.out_dim());
                }
                Layer::Relu => {
                    if previous_linear == Some(false) {
                        push(
                            Some(i),
                            FindingKind::Ordering,
                            "activation follows activation".into(),
                        );
                    }
                    previous_linear = Some(false);
                }
            }
        }
        if width == Some(0) {
            push(
                Some(self.layers.len() - 1),
                FindingKind::Dimension,
                "output dimension must be positive".into(),
            );
        }
        findings
    }

    pub fn out_dim(&self) -> usize {
        self.linears().last().map_or(0, |l| l.out_dim())
    }

    /// Linear layers in order; `K` in the dual bookkeeping is their count.
    pub fn linears(&self) -> Vec<&Linear> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Linear(lin) => Some(lin),
                Layer::Relu => None,
            })
            .collect()
    }

    pub(crate) fn first_linear(&self) -> &Linear {
        match self.layers.first() {
            Some(Layer::Linear(lin)) => lin,
            _ => unreachable!("validated model starts with a linear layer"),
        }
    }

    /// Conditioning block `W_0` of the first layer.
    pub fn conditioning_block(&self) -> ArrayView2<'_, f64> {
        self.first_linear().weight.slice(s![.., ..self.x_dim])
    }

    /// Latent block of the first layer.
    pub fn latent_block(&self) -> ArrayView2<'_, f64> {
        self.first_linear().weight.slice(s![.., self.x_dim..])
    }

    fn check_inputs(&self, x: &[f64], z: &[f64]) -> Result<()> {
        if x.len() != self.x_dim {
            return Err(Error::Dimension {
                what: "conditioning input x",
                expected: self.x_dim,
                got: x.len(),
            });
        }
        if z.len() != self.z_dim {
            return Err(Error::Dimension {
                what: "latent input z",
                expected: self.z_dim,
                got: z.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64], z: &[f64]) -> Result<Array1<f64>> {
        let mut trace = self.trace(x, z)?;
        Ok(trace.pop().expect("at least one linear layer"))
    }

    /// Outputs of every Linear layer (pre-activations `x_1, …, x_K`).
    pub fn trace(&self, x: &[f64], z: &[f64]) -> Result<Vec<Array1<f64>>> {
        self.check_inputs(x, z)?;
        let input: Array1<f64> = x.iter().chain(z.iter()).copied().collect();
        let mut current = input;
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => {
                    current = lin.weight.dot(&current) + &lin.bias;
                    out.push(current.clone());
                }
                Layer::Relu => current.mapv_inplace(|v| v.max(0.0)),
            }
        }
        Ok(out)
    }

    /// Outputs for a fixed `x` and one latent sample per row of `z`.
    pub fn forward_batch(&self, x: &[f64], z: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.len() != self.x_dim {
            return Err(Error::Dimension {
                what: "conditioning input x",
                expected: self.x_dim,
                got: x.len(),
            });
        }
        if z.ncols() != self.z_dim {
            return Err(Error::Dimension {
                what: "latent input z",
                expected: self.z_dim,
                got: z.ncols(),
            });
        }
        let n = z.nrows();
        let mut current = Array2::zeros((n, self.x_dim + self.z_dim));
        for (i, v) in x.iter().enumerate() {
            current.column_mut(i).fill(*v);
        }
        current.slice_mut(s![.., self.x_dim..]).assign(&z);
        for layer in &self.layers {
            match layer {
                Layer::Linear(lin) => current = current.dot(&lin.weight.t()) + &lin.bias,
                Layer::Relu => current.mapv_inplace(|v| v.max(0.0)),
            }
        }
        Ok(current)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile::from(self)).expect("model serializes")
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    x_dim: usize,
    z_dim: usize,
    layers: Vec<serde_json::Value>,
}

impl From<&DecoderModel> for ModelFile {
    fn from(model: &DecoderModel) -> Self {
        let layers = model
            .layers
            .iter()
            .map(|layer| match layer {
                Layer::Linear(lin) => {
                    let rows: Vec<Vec<f64>> = lin.weight.rows().into_iter().map(|r| r.to_vec()).collect();
                    serde_json::json!({"type": "linear", "W": rows, "b": lin.bias.to_vec()})
                }
                Layer::Relu => serde_json::json!({"type": "relu"}),
            })
            .collect();
        Self {
            x_dim: model.x_dim,
            z_dim: model.z_dim,
            layers,
        }
    }
}

fn parse_layer(index: usize, value: serde_json::Value) -> Result<Layer> {
    let kind = value
        .get("type")
        .and_then(|t| t.as_str())
        .ok_or_else(|| Error::Parse {
            what: "model file",
            message: format!("layer {index}: missing string field `type`"),
        })?
        .to_owned();
    match kind.as_str() {
        "linear" => {
            #[derive(Deserialize)]
            struct RawLinear {
                #[serde(rename = "W")]
                w: Vec<Vec<f64>>,
                b: Vec<f64>,
            }
            let raw: RawLinear = serde_json::from_value(value).map_err(|e| Error::Parse {
                what: "model file",
                message: format!("layer {index}: {e}"),
            })?;
            let cols = raw.w.first().map_or(0, Vec::len);
            if let Some(bad) = raw.w.iter().position(|r| r.len() != cols) {
                return Err(Error::Shape {
                    layer: index,
                    detail: format!("row {bad} of W has {} entries, expected {cols}", raw.w[bad].len()),
                });
            }
            let rows = raw.w.len();
            let weight = Array2::from_shape_vec((rows, cols), raw.w.into_iter().flatten().collect())
                .expect("rectangular rows");
            Ok(Layer::Linear(Linear::new(weight, Array1::from(raw.b))))
        }
        "relu" => Ok(Layer::Relu),
        _ => Err(Error::UnsupportedActivation { layer: index, kind }),
    }
}

/// Parses and validates a model file.
pub fn load_model(mut source: impl Read) -> Result<DecoderModel> {
    let mut text = String::new();
    source.read_to_string(&mut text).map_err(|e| Error::Parse {
        what: "model file",
        message: e.to_string(),
    })?;
    model_from_json(&text)
}

pub fn model_from_json(text: &str) -> Result<DecoderModel> {
    let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "model file",
        message: e.to_string(),
    })?;
    let layers = file
        .layers
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_layer(i, v))
        .collect::<Result<Vec<_>>>()?;
    DecoderModel::new(file.x_dim, file.z_dim, layers)
}

pub fn load_model_file(path: impl AsRef<std::path::Path>) -> Result<DecoderModel> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    load_model(std::io::BufReader::new(file))
}
