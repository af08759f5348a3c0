//! Serializable network description, shape inference, and reference forward
//! inference.
//!
//! `forward` evaluates layers directly (convolution by sliding window, pooling
//! by scanning windows) and records the activation trace — pre-activation
//! vectors and max-pool selections — that the linearizer consumes. The direct
//! path is deliberately independent of the matrix rewrites so the two can be
//! checked against each other.

use crate::tensor::{flat_index, DenseMatrix, Shape, TensorError};
use std::fmt;
use std::path::Path;

mod io;

pub use io::{load_model, model_from_json, model_to_json, save_model};

/// Standard published SELU constants.
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;

/// Standard normal CDF, the exact (error-function) form.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / std::f64::consts::SQRT_2))
}

/// Standard normal density.
pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[derive(Debug)]
pub enum ModelError {
    Tensor(TensorError),
    /// Structural problem; `layer` is the offending top-level layer index.
    Validation { layer: Option<usize>, detail: String },
    /// Non-finite intermediate during evaluation.
    Numeric { layer: usize, detail: String },
    /// Malformed model file.
    Parse { detail: String },
    Io(std::io::Error),
}

impl fmt::Display for ModelError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelError::Tensor(e) => write!(f, "{e}"),
            ModelError::Validation { layer: Some(i), detail } => {
                write!(f, "layer {i}: {detail}")
            }
            ModelError::Validation { layer: None, detail } => write!(f, "{detail}"),
            ModelError::Numeric { layer, detail } => write!(f, "layer {layer}: {detail}"),
            ModelError::Parse { detail } => write!(f, "parse error: {detail}"),
            ModelError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<TensorError> for ModelError {
    fn from(e: TensorError) -> Self {
        ModelError::Tensor(e)
    }
}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        ModelError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ActivationKind {
    Relu,
    LeakyRelu { alpha: f64 },
    Elu { alpha: f64 },
    Selu,
    Gelu,
}

impl ActivationKind {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * z
                }
            }
            ActivationKind::Elu { alpha } => {
                if z > 0.0 {
                    z
                } else {
                    alpha * (z.exp() - 1.0)
                }
            }
            ActivationKind::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0)
                }
            }
            ActivationKind::Gelu => z * std_normal_cdf(z),
        }
    }

    /// dσ/dz, with the subgradient at z = 0 fixed to the z ≤ 0 branch.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            ActivationKind::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::LeakyRelu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            ActivationKind::Elu { alpha } => {
                if z > 0.0 {
                    1.0
                } else {
                    alpha * z.exp()
                }
            }
            ActivationKind::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp()
                }
            }
            ActivationKind::Gelu => std_normal_cdf(z) + z * std_normal_pdf(z),
        }
    }

    /// True for the activations whose exact linear form is also the gradient.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::LeakyRelu { .. })
    }
}

/// Convolution kernel bank, values flattened as `[out_ch][in_ch][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernels {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub values: Vec<f64>,
}

impl ConvKernels {
    pub fn at(&self, oc: usize, ic: usize, a: usize, b: usize) -> f64 {
        self.values[((oc * self.in_channels + ic) * self.kh + a) * self.kw + b]
    }

    pub fn at_mut(&mut self, oc: usize, ic: usize, a: usize, b: usize) -> &mut f64 {
        &mut self.values[((oc * self.in_channels + ic) * self.kh + a) * self.kw + b]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { weight: DenseMatrix, bias: Option<Vec<f64>> },
    Conv2D { kernels: ConvKernels, bias: Option<Vec<f64>>, stride: usize, padding: usize },
    MaxPool2D { k: usize, stride: usize },
    AvgPool2D { k: usize, stride: usize },
    BatchNorm { gamma: Vec<f64>, beta: Vec<f64>, mu: Vec<f64>, var: Vec<f64>, eps: f64 },
    Activation { kind: ActivationKind },
    Flatten,
    Residual { inner: Vec<LayerSpec> },
}

/// Per-layer record of what the forward pass did at one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceRecord {
    None,
    /// Pre-activation vector seen by an activation layer.
    Activation { z: Vec<f64> },
    /// Selected flat input index per output element of a max pool.
    MaxPool { selected: Vec<usize> },
    Residual { inner: Vec<TraceRecord> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub records: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub input_shape: Shape,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub members: Vec<Network>,
    pub shares: Vec<f64>,
}

/// A loadable model: a single network or a share-weighted ensemble.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Network(Network),
    Ensemble(Ensemble),
}

fn validation(layer: Option<usize>, detail: impl Into<String>) -> ModelError {
    ModelError::Validation { layer, detail: detail.into() }
}

/// Output spatial side for a windowed op: floor((in + 2p − k)/s) + 1.
fn windowed_out(side: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = side + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Output shape of one layer, or a message naming the problem.
pub(crate) fn layer_output_shape(layer: &LayerSpec, in_shape: &Shape) -> Result<Shape, String> {
    match layer {
        LayerSpec::Dense { weight, bias } => {
            if in_shape.len() != weight.cols() {
                return Err(format!(
                    "dense expects {} inputs, got shape {in_shape}",
                    weight.cols()
                ));
            }
            if let Some(b) = bias {
                if b.len() != weight.rows() {
                    return Err(format!(
                        "dense bias length {} != {} rows",
                        b.len(),
                        weight.rows()
                    ));
                }
            }
            Shape::new(vec![weight.rows()]).map_err(|e| e.to_string())
        }
        LayerSpec::Conv2D { kernels, bias, stride, padding } => {
            let dims = in_shape.dims();
            if dims.len() != 3 {
                return Err(format!("conv2d needs a [C,H,W] input, got {in_shape}"));
            }
            let (c, h, w) = (dims[0], dims[1], dims[2]);
            if c != kernels.in_channels {
                return Err(format!(
                    "conv2d expects {} input channels, got {c}",
                    kernels.in_channels
                ));
            }
            if kernels.values.len()
                != kernels.out_channels * kernels.in_channels * kernels.kh * kernels.kw
            {
                return Err("conv2d kernel value count does not match its dimensions".into());
            }
            if let Some(b) = bias {
                if b.len() != kernels.out_channels {
                    return Err(format!(
                        "conv2d bias length {} != {} output channels",
                        b.len(),
                        kernels.out_channels
                    ));
                }
            }
            let oh = windowed_out(h, kernels.kh, *stride, *padding);
            let ow = windowed_out(w, kernels.kw, *stride, *padding);
            match (oh, ow) {
                (Some(oh), Some(ow)) => {
                    Shape::new(vec![kernels.out_channels, oh, ow]).map_err(|e| e.to_string())
                }
                _ => Err(format!(
                    "conv2d window {}x{} stride {stride} does not fit input {in_shape}",
                    kernels.kh, kernels.kw
                )),
            }
        }
        LayerSpec::MaxPool2D { k, stride } | LayerSpec::AvgPool2D { k, stride } => {
            let dims = in_shape.dims();
            if dims.len() != 3 {
                return Err(format!("pool needs a [C,H,W] input, got {in_shape}"));
            }
            let (c, h, w) = (dims[0], dims[1], dims[2]);
            match (windowed_out(h, *k, *stride, 0), windowed_out(w, *k, *stride, 0)) {
                (Some(oh), Some(ow)) => Shape::new(vec![c, oh, ow]).map_err(|e| e.to_string()),
                _ => Err(format!("pool window {k} stride {stride} does not fit input {in_shape}")),
            }
        }
        LayerSpec::BatchNorm { gamma, beta, mu, var, eps } => {
            let channels = in_shape.dims()[0];
            for (name, v) in [("gamma", gamma), ("beta", beta), ("mu", mu), ("var", var)] {
                if v.len() != channels {
                    return Err(format!(
                        "batchnorm {name} length {} != {channels} channels",
                        v.len()
                    ));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(format!("batchnorm {name} has a non-finite value"));
                }
            }
            if var.iter().any(|&v| v < 0.0) {
                return Err("batchnorm variance must be >= 0".into());
            }
            if !(*eps > 0.0) {
                return Err("batchnorm eps must be positive".into());
            }
            Ok(in_shape.clone())
        }
        LayerSpec::Activation { .. } => Ok(in_shape.clone()),
        LayerSpec::Flatten => Shape::new(vec![in_shape.len()]).map_err(|e| e.to_string()),
        LayerSpec::Residual { inner } => {
            let mut shape = in_shape.clone();
            for (j, l) in inner.iter().enumerate() {
                shape =
                    layer_output_shape(l, &shape).map_err(|e| format!("inner layer {j}: {e}"))?;
            }
            if shape.len() != in_shape.len() {
                return Err(format!(
                    "residual inner output {shape} does not match input {in_shape}"
                ));
            }
            Ok(in_shape.clone())
        }
    }
}

/// Per-layer output shapes of the whole network.
pub fn infer_shapes(net: &Network) -> Result<Vec<Shape>, ModelError> {
    let mut shapes = Vec::with_capacity(net.layers.len());
    let mut cur = net.input_shape.clone();
    for (i, layer) in net.layers.iter().enumerate() {
        cur = layer_output_shape(layer, &cur).map_err(|detail| validation(Some(i), detail))?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}

fn check_finite(y: &[f64]) -> Result<(), String> {
    if y.iter().any(|v| !v.is_finite()) {
        Err("non-finite intermediate value".into())
    } else {
        Ok(())
    }
}

/// Direct evaluation of one layer: returns the output and its trace record.
pub(crate) fn eval_layer(
    layer: &LayerSpec,
    in_shape: &Shape,
    x: &[f64],
) -> Result<(Vec<f64>, TraceRecord), String> {
    match layer {
        LayerSpec::Dense { weight, bias } => {
            let mut y = weight.matvec(x).map_err(|e| e.to_string())?;
            if let Some(b) = bias {
                for (yi, bi) in y.iter_mut().zip(b) {
                    *yi += bi;
                }
            }
            Ok((y, TraceRecord::None))
        }
        LayerSpec::Conv2D { kernels, bias, stride, padding } => {
            let out_shape = layer_output_shape(layer, in_shape)?;
            let (_, h, w) = in_shape.chw().map_err(|e| e.to_string())?;
            let od = out_shape.dims();
            let (oc_n, oh, ow) = (od[0], od[1], od[2]);
            let s = *stride as isize;
            let p = *padding as isize;
            let mut y = vec![0.0; oc_n * oh * ow];
            let mut idx = 0;
            for oc in 0..oc_n {
                let b = bias.as_ref().map_or(0.0, |b| b[oc]);
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = b;
                        for ic in 0..kernels.in_channels {
                            for a in 0..kernels.kh {
                                let ih = i as isize * s - p + a as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for bk in 0..kernels.kw {
                                    let iw = j as isize * s - p + bk as isize;
                                    if iw < 0 || iw >= w as isize {
                                        continue;
                                    }
                                    let xi = flat_index(ic, ih as usize, iw as usize, in_shape)
                                        .map_err(|e| e.to_string())?;
                                    acc += kernels.at(oc, ic, a, bk) * x[xi];
                                }
                            }
                        }
                        y[idx] = acc;
                        idx += 1;
                    }
                }
            }
            Ok((y, TraceRecord::None))
        }
        LayerSpec::MaxPool2D { k, stride } => {
            let out_shape = layer_output_shape(layer, in_shape)?;
            let od = out_shape.dims();
            let (c_n, oh, ow) = (od[0], od[1], od[2]);
            let mut y = Vec::with_capacity(c_n * oh * ow);
            let mut selected = Vec::with_capacity(c_n * oh * ow);
            for c in 0..c_n {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        // scan in ascending flat order so ties keep the smallest index
                        for a in 0..*k {
                            for b in 0..*k {
                                let xi = flat_index(c, i * stride + a, j * stride + b, in_shape)
                                    .map_err(|e| e.to_string())?;
                                if x[xi] > best {
                                    best = x[xi];
                                    best_idx = xi;
                                }
                            }
                        }
                        y.push(best);
                        selected.push(best_idx);
                    }
                }
            }
            Ok((y, TraceRecord::MaxPool { selected }))
        }
        LayerSpec::AvgPool2D { k, stride } => {
            let out_shape = layer_output_shape(layer, in_shape)?;
            let od = out_shape.dims();
            let (c_n, oh, ow) = (od[0], od[1], od[2]);
            let norm = 1.0 / ((*k * *k) as f64);
            let mut y = Vec::with_capacity(c_n * oh * ow);
            for c in 0..c_n {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..*k {
                            for b in 0..*k {
                                let xi = flat_index(c, i * stride + a, j * stride + b, in_shape)
                                    .map_err(|e| e.to_string())?;
                                acc += x[xi];
                            }
                        }
                        y.push(acc * norm);
                    }
                }
            }
            Ok((y, TraceRecord::None))
        }
        LayerSpec::BatchNorm { gamma, beta, mu, var, eps } => {
            let channels = in_shape.dims()[0];
            let spatial = in_shape.len() / channels;
            let mut y = Vec::with_capacity(x.len());
            for c in 0..channels {
                let denom = (var[c] + eps).sqrt();
                if !(denom > 0.0) {
                    return Err(format!("batchnorm channel {c}: var + eps not positive"));
                }
                for s in 0..spatial {
                    let v = x[c * spatial + s];
                    y.push((v - mu[c]) / denom * gamma[c] + beta[c]);
                }
            }
            Ok((y, TraceRecord::None))
        }
        LayerSpec::Activation { kind } => {
            let y = x.iter().map(|&z| kind.apply(z)).collect();
            Ok((y, TraceRecord::Activation { z: x.to_vec() }))
        }
        LayerSpec::Flatten => Ok((x.to_vec(), TraceRecord::None)),
        LayerSpec::Residual { inner } => {
            let mut cur = x.to_vec();
            let mut shape = in_shape.clone();
            let mut inner_records = Vec::with_capacity(inner.len());
            for l in inner {
                let (next, rec) = eval_layer(l, &shape, &cur)?;
                shape = layer_output_shape(l, &shape)?;
                inner_records.push(rec);
                cur = next;
            }
            for (yi, xi) in cur.iter_mut().zip(x) {
                *yi += xi;
            }
            Ok((cur, TraceRecord::Residual { inner: inner_records }))
        }
    }
}

fn layers_piecewise_linear(layers: &[LayerSpec]) -> bool {
    layers.iter().all(|l| match l {
        LayerSpec::Activation { kind } => kind.is_piecewise_linear(),
        LayerSpec::Residual { inner } => layers_piecewise_linear(inner),
        _ => true,
    })
}

impl Network {
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>) -> Self {
        Network { input_shape, layers }
    }

    /// True when every activation is piecewise linear (ReLU or leaky ReLU).
    pub fn is_piecewise_linear(&self) -> bool {
        layers_piecewise_linear(&self.layers)
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.len()
    }

    pub fn output_dim(&self) -> Result<usize, ModelError> {
        Ok(infer_shapes(self)?.last().map_or(self.input_dim(), |s| s.len()))
    }

    /// Structural validation; returns the per-layer output shapes.
    pub fn validate(&self) -> Result<Vec<Shape>, ModelError> {
        infer_shapes(self)
    }

    /// Evaluate the network on `x`, recording the activation trace.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ActivationTrace), ModelError> {
        if x.len() != self.input_dim() {
            return Err(validation(
                None,
                format!("input length {} != {}", x.len(), self.input_dim()),
            ));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Numeric { layer: 0, detail: "non-finite input".into() });
        }
        let mut cur = x.to_vec();
        let mut shape = self.input_shape.clone();
        let mut records = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (next, rec) =
                eval_layer(layer, &shape, &cur).map_err(|detail| validation(Some(i), detail))?;
            check_finite(&next).map_err(|detail| ModelError::Numeric { layer: i, detail })?;
            shape = layer_output_shape(layer, &shape)
                .map_err(|detail| validation(Some(i), detail))?;
            records.push(rec);
            cur = next;
        }
        Ok((cur, ActivationTrace { records }))
    }
}

impl Ensemble {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.members.is_empty() {
            return Err(validation(None, "ensemble has no members"));
        }
        if self.shares.len() != self.members.len() {
            return Err(validation(
                None,
                format!("{} shares for {} members", self.shares.len(), self.members.len()),
            ));
        }
        if self.shares.iter().any(|s| !s.is_finite()) {
            return Err(validation(None, "ensemble shares must be finite"));
        }
        let in_shape = self.members[0].input_shape.clone();
        let out_dim = self.members[0].output_dim()?;
        for (i, m) in self.members.iter().enumerate() {
            m.validate().map_err(|e| validation(None, format!("member {i}: {e}")))?;
            if m.input_shape != in_shape || m.output_dim()? != out_dim {
                return Err(validation(None, format!("member {i}: shape differs from member 0")));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].input_dim()
    }

    pub fn output_dim(&self) -> Result<usize, ModelError> {
        self.members[0].output_dim()
    }

    /// Share-weighted sum of member outputs.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut out = vec![0.0; self.output_dim()?];
        for (m, &a) in self.members.iter().zip(&self.shares) {
            let (y, _) = m.forward(x)?;
            for (o, yi) in out.iter_mut().zip(&y) {
                *o += a * yi;
            }
        }
        Ok(out)
    }
}

impl Model {
    pub fn input_dim(&self) -> usize {
        match self {
            Model::Network(n) => n.input_dim(),
            Model::Ensemble(e) => e.input_dim(),
        }
    }

    pub fn input_shape(&self) -> &Shape {
        match self {
            Model::Network(n) => &n.input_shape,
            Model::Ensemble(e) => &e.members[0].input_shape,
        }
    }

    pub fn output_dim(&self) -> Result<usize, ModelError> {
        match self {
            Model::Network(n) => n.output_dim(),
            Model::Ensemble(e) => e.output_dim(),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Model::Network(n) => n.validate().map(|_| ()),
            Model::Ensemble(e) => e.validate(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        match self {
            Model::Network(n) => n.forward(x).map(|(y, _)| y),
            Model::Ensemble(e) => e.forward(x),
        }
    }

    /// True when every activation in the model is piecewise linear, so the
    /// exact linear form is also the input-output Jacobian.
    pub fn is_piecewise_linear(&self) -> bool {
        match self {
            Model::Network(n) => n.is_piecewise_linear(),
            Model::Ensemble(e) => e.members.iter().all(Network::is_piecewise_linear),
        }
    }
}

/// Weighted combination of member outputs, `Σ aᵢ·Fᵢ(x)`.
pub fn forward_ensemble(ens: &Ensemble, x: &[f64]) -> Result<Vec<f64>, ModelError> {
    ens.forward(x)
}

/// Convenience: load, validate, and unwrap a plain network (not an ensemble).
pub fn load_network(path: &Path) -> Result<Network, ModelError> {
    match load_model(path)? {
        Model::Network(n) => Ok(n),
        Model::Ensemble(_) => Err(validation(None, "expected a network, found an ensemble")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(dims: &[usize]) -> Shape {
        Shape::new(dims.to_vec()).unwrap()
    }

    fn dense(values: Vec<f64>, rows: usize, cols: usize, bias: Option<Vec<f64>>) -> LayerSpec {
        LayerSpec::Dense { weight: DenseMatrix::from_vec(rows, cols, values).unwrap(), bias }
    }

    #[test]
    fn infer_shapes_conv_and_pool() {
        let conv = Network::new(
            shape(&[1, 4, 4]),
            vec![LayerSpec::Conv2D {
                kernels: ConvKernels {
                    out_channels: 1,
                    in_channels: 1,
                    kh: 2,
                    kw: 2,
                    values: vec![1.0; 4],
                },
                bias: None,
                stride: 2,
                padding: 0,
            }],
        );
        assert_eq!(infer_shapes(&conv).unwrap(), vec![shape(&[1, 2, 2])]);

        let pool =
            Network::new(shape(&[1, 4, 4]), vec![LayerSpec::MaxPool2D { k: 2, stride: 2 }]);
        assert_eq!(infer_shapes(&pool).unwrap(), vec![shape(&[1, 2, 2])]);
    }

    #[test]
    fn infer_shapes_rejects_oversized_window() {
        let net = Network::new(
            shape(&[1, 3, 3]),
            vec![LayerSpec::Conv2D {
                kernels: ConvKernels {
                    out_channels: 1,
                    in_channels: 1,
                    kh: 5,
                    kw: 5,
                    values: vec![0.0; 25],
                },
                bias: None,
                stride: 1,
                padding: 0,
            }],
        );
        let err = infer_shapes(&net).unwrap_err();
        assert!(matches!(err, ModelError::Validation { layer: Some(0), .. }), "{err}");
    }

    #[test]
    fn forward_relu_records_preactivation() {
        let net = Network::new(
            shape(&[2]),
            vec![
                dense(vec![1.0, 0.0, 0.0, 1.0], 2, 2, Some(vec![0.0, 0.0])),
                LayerSpec::Activation { kind: ActivationKind::Relu },
            ],
        );
        let (y, trace) = net.forward(&[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
        assert_eq!(trace.records[1], TraceRecord::Activation { z: vec![1.0, -1.0] });
    }

    #[test]
    fn forward_residual_zero_inner_is_identity() {
        let net = Network::new(
            shape(&[1]),
            vec![LayerSpec::Residual { inner: vec![dense(vec![0.0], 1, 1, None)] }],
        );
        let (y, _) = net.forward(&[5.0]).unwrap();
        assert_eq!(y, vec![5.0]);
    }

    #[test]
    fn forward_batchnorm_matches_hand_arithmetic() {
        let net = Network::new(
            shape(&[1]),
            vec![LayerSpec::BatchNorm {
                gamma: vec![2.0],
                beta: vec![1.0],
                mu: vec![3.0],
                var: vec![4.0],
                eps: 1e-300, // effectively zero but still positive
            }],
        );
        let (y, _) = net.forward(&[3.0]).unwrap();
        assert!((y[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_tie_break_keeps_smallest_flat_index() {
        let net = Network::new(shape(&[1, 2, 2]), vec![LayerSpec::MaxPool2D { k: 2, stride: 2 }]);
        let (_, trace) = net.forward(&[7.0, 7.0, 7.0, 7.0]).unwrap();
        assert_eq!(trace.records[0], TraceRecord::MaxPool { selected: vec![0] });
    }

    #[test]
    fn forward_ensemble_examples() {
        let member = Network::new(shape(&[1]), vec![dense(vec![2.0], 1, 1, Some(vec![1.0]))]);
        let ens =
            Ensemble { members: vec![member.clone(), member.clone()], shares: vec![0.5, 0.5] };
        assert_eq!(ens.forward(&[3.0]).unwrap(), vec![7.0]);

        let double = Ensemble { members: vec![member.clone()], shares: vec![2.0] };
        assert_eq!(double.forward(&[3.0]).unwrap(), vec![14.0]);

        let a = Network::new(shape(&[1]), vec![dense(vec![0.0, 0.0], 2, 1, Some(vec![1.0, 0.0]))]);
        let b = Network::new(shape(&[1]), vec![dense(vec![0.0, 0.0], 2, 1, Some(vec![0.0, 1.0]))]);
        let sum = Ensemble { members: vec![a, b], shares: vec![1.0, 1.0] };
        assert_eq!(sum.forward(&[0.0]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = Network::new(
            shape(&[1, 4, 4]),
            vec![
                LayerSpec::MaxPool2D { k: 2, stride: 2 },
                LayerSpec::Flatten,
                dense((0..8).map(|i| i as f64 * 0.37 - 1.0).collect(), 2, 4, None),
                LayerSpec::Activation { kind: ActivationKind::Gelu },
            ],
        );
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).sin()).collect();
        let (y1, t1) = net.forward(&x).unwrap();
        let (y2, t2) = net.forward(&x).unwrap();
        assert_eq!(y1, y2);
        assert_eq!(t1, t2);
    }

    #[test]
    fn affine_network_is_linear_affine() {
        // Dense/Flatten/BatchNorm/AvgPool only: F(αx + (1−α)y) = αF(x) + (1−α)F(y)
        let net = Network::new(
            shape(&[1, 4, 4]),
            vec![
                LayerSpec::AvgPool2D { k: 2, stride: 2 },
                LayerSpec::BatchNorm {
                    gamma: vec![1.5],
                    beta: vec![-0.25],
                    mu: vec![0.1],
                    var: vec![0.9],
                    eps: 1e-5,
                },
                LayerSpec::Flatten,
                dense((0..8).map(|i| (i as f64).cos()).collect(), 2, 4, Some(vec![0.3, -0.7])),
            ],
        );
        let x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let alpha = 0.37;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
        let (fx, _) = net.forward(&x).unwrap();
        let (fy, _) = net.forward(&y).unwrap();
        let (fmix, _) = net.forward(&mix).unwrap();
        for i in 0..fx.len() {
            assert!((fmix[i] - (alpha * fx[i] + (1.0 - alpha) * fy[i])).abs() <= 1e-9);
        }
    }
}
