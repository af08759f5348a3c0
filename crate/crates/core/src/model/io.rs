//! JSON model files.
//!
//! Top level: `{ "version": 1, "kind": "network" | "ensemble", ... }`.
//! A network holds `"input_shape"` and a `"layers"` array of tagged objects;
//! an ensemble holds `"members"` (network objects) and `"shares"`. All weight
//! arrays are flat, in the layouts fixed by the tensor module (dense weights
//! row-major out×in, conv kernels `[out_ch][in_ch][kh][kw]`). Numbers are
//! 64-bit floats and round-trip bit-exactly.

use super::{
    ActivationKind, ConvKernels, Ensemble, LayerSpec, Model, ModelError, Network,
};
use crate::tensor::{DenseMatrix, Shape};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct FileWire {
    version: u32,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    input_shape: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    layers: Option<Vec<LayerWire>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    members: Option<Vec<NetworkWire>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    shares: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct NetworkWire {
    input_shape: Vec<usize>,
    layers: Vec<LayerWire>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum LayerWire {
    Dense {
        out: usize,
        #[serde(rename = "in")]
        input: usize,
        weight: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    Conv2d {
        out_channels: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weight: Vec<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
    },
    Maxpool2d {
        k: usize,
        stride: usize,
    },
    Avgpool2d {
        k: usize,
        stride: usize,
    },
    Batchnorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mu: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    Activation {
        kind: String,
        #[serde(skip_serializing_if = "Option::is_none")]
        alpha: Option<f64>,
    },
    Flatten {},
    Residual {
        layers: Vec<LayerWire>,
    },
}

fn parse_err(detail: impl Into<String>) -> ModelError {
    ModelError::Parse { detail: detail.into() }
}

fn activation_to_wire(kind: ActivationKind) -> (String, Option<f64>) {
    match kind {
        ActivationKind::Relu => ("relu".into(), None),
        ActivationKind::LeakyRelu { alpha } => ("leaky_relu".into(), Some(alpha)),
        ActivationKind::Elu { alpha } => ("elu".into(), Some(alpha)),
        ActivationKind::Selu => ("selu".into(), None),
        ActivationKind::Gelu => ("gelu".into(), None),
    }
}

fn activation_from_wire(kind: &str, alpha: Option<f64>) -> Result<ActivationKind, ModelError> {
    match kind {
        "relu" => Ok(ActivationKind::Relu),
        "leaky_relu" => Ok(ActivationKind::LeakyRelu { alpha: alpha.unwrap_or(0.01) }),
        "elu" => Ok(ActivationKind::Elu { alpha: alpha.unwrap_or(1.0) }),
        "selu" => Ok(ActivationKind::Selu),
        "gelu" => Ok(ActivationKind::Gelu),
        other => Err(parse_err(format!("unknown activation kind \"{other}\""))),
    }
}

fn layer_to_wire(layer: &LayerSpec) -> LayerWire {
    match layer {
        LayerSpec::Dense { weight, bias } => LayerWire::Dense {
            out: weight.rows(),
            input: weight.cols(),
            weight: weight.values().to_vec(),
            bias: bias.clone(),
        },
        LayerSpec::Conv2D { kernels, bias, stride, padding } => LayerWire::Conv2d {
            out_channels: kernels.out_channels,
            in_channels: kernels.in_channels,
            kh: kernels.kh,
            kw: kernels.kw,
            stride: *stride,
            padding: *padding,
            weight: kernels.values.clone(),
            bias: bias.clone(),
        },
        LayerSpec::MaxPool2D { k, stride } => LayerWire::Maxpool2d { k: *k, stride: *stride },
        LayerSpec::AvgPool2D { k, stride } => LayerWire::Avgpool2d { k: *k, stride: *stride },
        LayerSpec::BatchNorm { gamma, beta, mu, var, eps } => LayerWire::Batchnorm {
            gamma: gamma.clone(),
            beta: beta.clone(),
            mu: mu.clone(),
            var: var.clone(),
            eps: *eps,
        },
        LayerSpec::Activation { kind } => {
            let (kind, alpha) = activation_to_wire(*kind);
            LayerWire::Activation { kind, alpha }
        }
        LayerSpec::Flatten => LayerWire::Flatten {},
        LayerSpec::Residual { inner } => {
            LayerWire::Residual { layers: inner.iter().map(layer_to_wire).collect() }
        }
    }
}

fn layer_from_wire(wire: LayerWire) -> Result<LayerSpec, ModelError> {
    Ok(match wire {
        LayerWire::Dense { out, input, weight, bias } => {
            if weight.len() != out * input {
                return Err(ModelError::Validation {
                    layer: None,
                    detail: format!(
                        "dense weight array length {} != {out}x{input}",
                        weight.len()
                    ),
                });
            }
            LayerSpec::Dense { weight: DenseMatrix::from_vec(out, input, weight)?, bias }
        }
        LayerWire::Conv2d { out_channels, in_channels, kh, kw, stride, padding, weight, bias } => {
            if weight.len() != out_channels * in_channels * kh * kw {
                return Err(ModelError::Validation {
                    layer: None,
                    detail: format!(
                        "conv2d weight array length {} != {out_channels}x{in_channels}x{kh}x{kw}",
                        weight.len()
                    ),
                });
            }
            LayerSpec::Conv2D {
                kernels: ConvKernels { out_channels, in_channels, kh, kw, values: weight },
                bias,
                stride,
                padding,
            }
        }
        LayerWire::Maxpool2d { k, stride } => LayerSpec::MaxPool2D { k, stride },
        LayerWire::Avgpool2d { k, stride } => LayerSpec::AvgPool2D { k, stride },
        LayerWire::Batchnorm { gamma, beta, mu, var, eps } => {
            LayerSpec::BatchNorm { gamma, beta, mu, var, eps }
        }
        LayerWire::Activation { kind, alpha } => {
            LayerSpec::Activation { kind: activation_from_wire(&kind, alpha)? }
        }
        LayerWire::Flatten {} => LayerSpec::Flatten,
        LayerWire::Residual { layers } => LayerSpec::Residual {
            inner: layers.into_iter().map(layer_from_wire).collect::<Result<_, _>>()?,
        },
    })
}

fn network_to_wire(net: &Network) -> NetworkWire {
    NetworkWire {
        input_shape: net.input_shape.dims().to_vec(),
        layers: net.layers.iter().map(layer_to_wire).collect(),
    }
}

fn network_from_wire(wire: NetworkWire) -> Result<Network, ModelError> {
    let input_shape = Shape::new(wire.input_shape)?;
    let layers = wire.layers.into_iter().map(layer_from_wire).collect::<Result<_, _>>()?;
    Ok(Network { input_shape, layers })
}

/// Serialize a model to its JSON file representation.
pub fn model_to_json(model: &Model) -> Result<String, ModelError> {
    let wire = match model {
        Model::Network(net) => {
            let w = network_to_wire(net);
            FileWire {
                version: FORMAT_VERSION,
                kind: "network".into(),
                input_shape: Some(w.input_shape),
                layers: Some(w.layers),
                members: None,
                shares: None,
            }
        }
        Model::Ensemble(ens) => FileWire {
            version: FORMAT_VERSION,
            kind: "ensemble".into(),
            input_shape: None,
            layers: None,
            members: Some(ens.members.iter().map(network_to_wire).collect()),
            shares: Some(ens.shares.clone()),
        },
    };
    serde_json::to_string(&wire).map_err(|e| parse_err(e.to_string()))
}

/// Parse and validate a model from its JSON file representation.
pub fn model_from_json(text: &str) -> Result<Model, ModelError> {
    let wire: FileWire =
        serde_json::from_str(text).map_err(|e| parse_err(e.to_string()))?;
    if wire.version != FORMAT_VERSION {
        return Err(parse_err(format!(
            "unsupported version {} (expected {FORMAT_VERSION})",
            wire.version
        )));
    }
    let model = match wire.kind.as_str() {
        "network" => {
            let (Some(input_shape), Some(layers)) = (wire.input_shape, wire.layers) else {
                return Err(parse_err("network file needs input_shape and layers"));
            };
            Model::Network(network_from_wire(NetworkWire { input_shape, layers })?)
        }
        "ensemble" => {
            let (Some(members), Some(shares)) = (wire.members, wire.shares) else {
                return Err(parse_err("ensemble file needs members and shares"));
            };
            let members =
                members.into_iter().map(network_from_wire).collect::<Result<_, _>>()?;
            Model::Ensemble(Ensemble { members, shares })
        }
        other => return Err(parse_err(format!("unknown kind \"{other}\""))),
    };
    model.validate()?;
    Ok(model)
}

/// Write a model file atomically (temp file in the same directory, then rename).
pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelError> {
    let json = model_to_json(model)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, json)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and validate a model file.
pub fn load_model(path: &Path) -> Result<Model, ModelError> {
    let text = fs::read_to_string(path)?;
    model_from_json(&text)
}
