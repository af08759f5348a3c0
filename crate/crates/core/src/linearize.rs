//! Per-instance layer rewrites and their aggregation into one exact affine map.
//!
//! For a fixed input, every supported layer acts as `W'·x + b'`: dense layers
//! trivially, convolutions as sparse banded matrices, max pools as 0/1
//! selector matrices frozen to the instance's argmax choices, activations as
//! diagonal rescalings λ = σ(z)/z of their pre-activations, batch norm as a
//! per-channel diagonal affine map, and residual blocks as `W_inner + I`.
//! A streaming left fold multiplies the factors into a single dense `(W, b)`
//! with `F(x) = W·x + b` reproduced to floating-point accuracy.

use crate::model::{
    eval_layer, layer_output_shape, ActivationKind, Ensemble, LayerSpec, Model, ModelError,
    Network, TraceRecord,
};
use crate::tensor::{
    flat_index, DenseMatrix, Matrix, Shape, SparseBuilder, SparseRowMatrix, TensorError,
};
use std::fmt;

/// Below this magnitude λ = σ(z)/z switches to its analytic limit.
const LAMBDA_LIMIT_EPS: f64 = 1e-12;

/// Default probe range and resolution for [`region_probe`].
const PROBE_T_MAX: f64 = 1e3;
const PROBE_RESOLUTION: f64 = 1e-9;
const PROBE_MAX_ITERS: usize = 60;

#[derive(Debug)]
pub enum LinearizeError {
    Model(ModelError),
    Tensor(TensorError),
    /// Trace data does not fit the layer it is claimed to describe.
    Trace { detail: String },
    /// A direction or probe argument is unusable.
    Probe { detail: String },
}

impl fmt::Display for LinearizeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinearizeError::Model(e) => write!(f, "{e}"),
            LinearizeError::Tensor(e) => write!(f, "{e}"),
            LinearizeError::Trace { detail } => write!(f, "trace error: {detail}"),
            LinearizeError::Probe { detail } => write!(f, "probe error: {detail}"),
        }
    }
}

impl std::error::Error for LinearizeError {}

impl From<ModelError> for LinearizeError {
    fn from(e: ModelError) -> Self {
        LinearizeError::Model(e)
    }
}

impl From<TensorError> for LinearizeError {
    fn from(e: TensorError) -> Self {
        LinearizeError::Tensor(e)
    }
}

fn trace_err(detail: impl Into<String>) -> LinearizeError {
    LinearizeError::Trace { detail: detail.into() }
}

/// One layer rewritten as `w·x + b` for the current instance.
#[derive(Debug, Clone)]
pub struct LayerLinear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Which branch each activation unit took: +1 for z > 0, -1 for z < 0,
/// 0 for the |z| < 1e-12 band where λ takes its limit value.
pub type BranchVec = Vec<i8>;

#[derive(Debug, Clone, PartialEq)]
pub enum PatternRecord {
    None,
    Activation { lambda: Vec<f64>, branch: BranchVec },
    MaxPool { selected: Vec<usize> },
    Residual { inner: Vec<PatternRecord> },
}

impl PatternRecord {
    /// Discrete-part equality: branch bits and pool selections. λ values are
    /// derived data for piecewise-linear activations and are ignored here.
    fn same_region(&self, other: &PatternRecord) -> bool {
        match (self, other) {
            (PatternRecord::None, PatternRecord::None) => true,
            (
                PatternRecord::Activation { branch: a, .. },
                PatternRecord::Activation { branch: b, .. },
            ) => a == b,
            (
                PatternRecord::MaxPool { selected: a },
                PatternRecord::MaxPool { selected: b },
            ) => a == b,
            (PatternRecord::Residual { inner: a }, PatternRecord::Residual { inner: b }) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.same_region(y))
            }
            _ => false,
        }
    }
}

/// Per-layer activation pattern of one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationPattern {
    pub records: Vec<PatternRecord>,
}

impl ActivationPattern {
    /// True when both instances lie in the same linear region.
    pub fn same_region(&self, other: &ActivationPattern) -> bool {
        self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_region(b))
    }

    /// Index of the first layer whose record differs, if any.
    pub fn first_difference(&self, other: &ActivationPattern) -> Option<usize> {
        self.records
            .iter()
            .zip(&other.records)
            .position(|(a, b)| !a.same_region(b))
            .or_else(|| {
                if self.records.len() != other.records.len() {
                    Some(self.records.len().min(other.records.len()))
                } else {
                    None
                }
            })
    }
}

/// The exact affine form of one prediction: `F(x) = w·x + b`.
#[derive(Debug, Clone)]
pub struct InstanceLinearization {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub pattern: ActivationPattern,
}

impl InstanceLinearization {
    /// `w·x + b`.
    pub fn reconstruct(&self, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut y = self.w.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.b) {
            *yi += bi;
        }
        Ok(y)
    }
}

/// Result of walking along a ray until the activation pattern changes.
#[derive(Debug, Clone)]
pub struct RegionProbe {
    pub x: Vec<f64>,
    /// Unit direction the probe walked along.
    pub direction: Vec<f64>,
    /// Largest step with the same pattern as `x` (resolution 1e-9).
    pub delta: f64,
    /// First layer whose pattern differs just beyond `delta`.
    pub boundary_layer: Option<usize>,
    /// Pattern never changed up to the probe range.
    pub unbounded: bool,
}

/// `‖f − r‖∞ / (1 + ‖f‖∞)`: the relative reconstruction residual used by
/// every exactness check in this crate.
pub fn reconstruction_residual(f: &[f64], r: &[f64]) -> f64 {
    let diff = f.iter().zip(r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let scale = f.iter().map(|a| a.abs()).fold(0.0, f64::max);
    diff / (1.0 + scale)
}

/// Per-unit rescale factor λ = σ(z)/z in closed form, with analytic limits
/// inside the |z| < 1e-12 band.
pub fn activation_lambda(kind: ActivationKind, z: &[f64]) -> Vec<f64> {
    z.iter().map(|&zi| lambda_scalar(kind, zi)).collect()
}

fn lambda_scalar(kind: ActivationKind, z: f64) -> f64 {
    use crate::model::{SELU_ALPHA, SELU_LAMBDA};
    if z.abs() < LAMBDA_LIMIT_EPS {
        return match kind {
            ActivationKind::Relu => 0.0,
            ActivationKind::LeakyRelu { alpha } => alpha,
            ActivationKind::Elu { alpha } => alpha,
            ActivationKind::Selu => SELU_LAMBDA * SELU_ALPHA,
            ActivationKind::Gelu => 0.5,
        };
    }
    match kind {
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
                alpha * (z.exp() - 1.0) / z
            }
        }
        ActivationKind::Selu => {
            if z > 0.0 {
                crate::model::SELU_LAMBDA
            } else {
                SELU_LAMBDA * SELU_ALPHA * (z.exp() - 1.0) / z
            }
        }
        ActivationKind::Gelu => crate::model::std_normal_cdf(z),
    }
}

fn branch_of(z: f64) -> i8 {
    if z.abs() < LAMBDA_LIMIT_EPS {
        0
    } else if z > 0.0 {
        1
    } else {
        -1
    }
}

/// Dense layer: the weights are the factor, instance-independent.
pub fn linearize_dense(weight: &DenseMatrix, bias: Option<&[f64]>) -> LayerLinear {
    let b = bias.map_or_else(|| vec![0.0; weight.rows()], <[f64]>::to_vec);
    LayerLinear { w: Matrix::Dense(weight.clone()), b }
}

/// Convolution as a sparse banded matrix over the flat input layout.
/// Row `(oc, i, j)` carries the kernel entries at the window positions that
/// fall inside the input; zero padding contributes no entry.
pub fn linearize_conv(
    kernels: &crate::model::ConvKernels,
    bias: Option<&[f64]>,
    stride: usize,
    padding: usize,
    in_shape: &Shape,
) -> Result<LayerLinear, LinearizeError> {
    let layer = LayerSpec::Conv2D {
        kernels: kernels.clone(),
        bias: bias.map(<[f64]>::to_vec),
        stride,
        padding,
    };
    let out_shape = layer_output_shape(&layer, in_shape)
        .map_err(|detail| ModelError::Validation { layer: None, detail })?;
    let od = out_shape.dims();
    let (oc_n, oh, ow) = (od[0], od[1], od[2]);
    let (_, h, w) = in_shape.chw()?;
    let mut builder = SparseBuilder::new(in_shape.len());
    let mut b = Vec::with_capacity(oc_n * oh * ow);
    let s = stride as isize;
    let p = padding as isize;
    for oc in 0..oc_n {
        let bias_oc = bias.map_or(0.0, |b| b[oc]);
        for i in 0..oh {
            for j in 0..ow {
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
                            let col = flat_index(ic, ih as usize, iw as usize, in_shape)?;
                            builder.push_entry(col, kernels.at(oc, ic, a, bk));
                        }
                    }
                }
                builder.finish_row();
                b.push(bias_oc);
            }
        }
    }
    Ok(LayerLinear { w: Matrix::Sparse(builder.build()?), b })
}

/// Max pool as a 0/1 selector matrix: one entry per row at the flat index the
/// instance's forward pass selected. Instance-dependent.
pub fn linearize_maxpool(
    k: usize,
    stride: usize,
    in_shape: &Shape,
    trace_indices: &[usize],
) -> Result<LayerLinear, LinearizeError> {
    let layer = LayerSpec::MaxPool2D { k, stride };
    let out_shape = layer_output_shape(&layer, in_shape)
        .map_err(|detail| ModelError::Validation { layer: None, detail })?;
    if trace_indices.len() != out_shape.len() {
        return Err(trace_err(format!(
            "{} selections for {} pool outputs",
            trace_indices.len(),
            out_shape.len()
        )));
    }
    let in_len = in_shape.len();
    let mut builder = SparseBuilder::new(in_len);
    for &sel in trace_indices {
        if sel >= in_len {
            return Err(trace_err(format!("selected index {sel} out of range {in_len}")));
        }
        builder.push_entry(sel, 1.0);
        builder.finish_row();
    }
    Ok(LayerLinear { w: Matrix::Sparse(builder.build()?), b: vec![0.0; trace_indices.len()] })
}

/// Average pool as a sparse matrix with 1/k² over each window.
pub fn linearize_avgpool(
    k: usize,
    stride: usize,
    in_shape: &Shape,
) -> Result<LayerLinear, LinearizeError> {
    let layer = LayerSpec::AvgPool2D { k, stride };
    let out_shape = layer_output_shape(&layer, in_shape)
        .map_err(|detail| ModelError::Validation { layer: None, detail })?;
    let od = out_shape.dims();
    let (c_n, oh, ow) = (od[0], od[1], od[2]);
    let norm = 1.0 / ((k * k) as f64);
    let mut builder = SparseBuilder::new(in_shape.len());
    for c in 0..c_n {
        for i in 0..oh {
            for j in 0..ow {
                for a in 0..k {
                    for bk in 0..k {
                        let col = flat_index(c, i * stride + a, j * stride + bk, in_shape)?;
                        builder.push_entry(col, norm);
                    }
                }
                builder.finish_row();
            }
        }
    }
    Ok(LayerLinear { w: Matrix::Sparse(builder.build()?), b: vec![0.0; out_shape.len()] })
}

/// Batch norm folded to a diagonal affine map: w = γ/√(σ²+ε) per channel,
/// b = −μγ/√(σ²+ε) + β, replicated over the channel's spatial positions.
pub fn linearize_batchnorm(
    gamma: &[f64],
    beta: &[f64],
    mu: &[f64],
    var: &[f64],
    eps: f64,
    in_shape: &Shape,
) -> Result<LayerLinear, LinearizeError> {
    let channels = in_shape.dims()[0];
    let spatial = in_shape.len() / channels;
    let mut diag = Vec::with_capacity(in_shape.len());
    let mut b = Vec::with_capacity(in_shape.len());
    for c in 0..channels {
        let denom2 = var[c] + eps;
        if !(denom2 > 0.0) {
            return Err(LinearizeError::Model(ModelError::Numeric {
                layer: 0,
                detail: format!("batchnorm channel {c}: var + eps not positive"),
            }));
        }
        let denom = denom2.sqrt();
        let w_norm = gamma[c] / denom;
        let b_norm = -mu[c] * gamma[c] / denom + beta[c];
        for _ in 0..spatial {
            diag.push(w_norm);
            b.push(b_norm);
        }
    }
    Ok(LayerLinear { w: Matrix::Sparse(SparseRowMatrix::diagonal(&diag)?), b })
}

/// Activation at its recorded pre-activations: w = diag(λ), b = 0.
pub fn linearize_activation(kind: ActivationKind, z: &[f64]) -> Result<LayerLinear, LinearizeError> {
    let lambda = activation_lambda(kind, z);
    Ok(LayerLinear {
        w: Matrix::Sparse(SparseRowMatrix::diagonal(&lambda)?),
        b: vec![0.0; z.len()],
    })
}

/// Residual block: aggregate the inner layers at this instance to
/// `(W_inner, b_inner)` and merge the skip path, giving `(W_inner + I, b_inner)`.
pub fn linearize_residual(
    inner: &[LayerSpec],
    in_shape: &Shape,
    x_in: &[f64],
) -> Result<(LayerLinear, PatternRecord), LinearizeError> {
    let (mut w, b, records, _) = linearize_seq(inner, in_shape, x_in)?;
    for i in 0..w.rows() {
        let v = w.get(i, i) + 1.0;
        w.set(i, i, v);
    }
    Ok((LayerLinear { w: Matrix::Dense(w), b }, PatternRecord::Residual { inner: records }))
}

/// Rewrite one layer as an affine factor, given the layer's actual input.
/// Returns the factor (`None` for flatten, whose factor is the identity
/// permutation of the flat layout and needs no multiply), the pattern record,
/// and the layer's forward output.
fn layer_factor(
    layer: &LayerSpec,
    in_shape: &Shape,
    x: &[f64],
) -> Result<(Option<LayerLinear>, PatternRecord, Vec<f64>), LinearizeError> {
    let (y, trace) = eval_layer(layer, in_shape, x)
        .map_err(|detail| ModelError::Validation { layer: None, detail })?;
    let (factor, record) = match layer {
        LayerSpec::Dense { weight, bias } => {
            (Some(linearize_dense(weight, bias.as_deref())), PatternRecord::None)
        }
        LayerSpec::Conv2D { kernels, bias, stride, padding } => (
            Some(linearize_conv(kernels, bias.as_deref(), *stride, *padding, in_shape)?),
            PatternRecord::None,
        ),
        LayerSpec::MaxPool2D { k, stride } => {
            let TraceRecord::MaxPool { selected } = &trace else {
                return Err(trace_err("max pool produced no selection trace"));
            };
            (
                Some(linearize_maxpool(*k, *stride, in_shape, selected)?),
                PatternRecord::MaxPool { selected: selected.clone() },
            )
        }
        LayerSpec::AvgPool2D { k, stride } => {
            (Some(linearize_avgpool(*k, *stride, in_shape)?), PatternRecord::None)
        }
        LayerSpec::BatchNorm { gamma, beta, mu, var, eps } => (
            Some(linearize_batchnorm(gamma, beta, mu, var, *eps, in_shape)?),
            PatternRecord::None,
        ),
        LayerSpec::Activation { kind } => {
            let lambda = activation_lambda(*kind, x);
            let branch = x.iter().map(|&z| branch_of(z)).collect();
            (
                Some(linearize_activation(*kind, x)?),
                PatternRecord::Activation { lambda, branch },
            )
        }
        LayerSpec::Flatten => (None, PatternRecord::None),
        LayerSpec::Residual { inner } => {
            let (factor, record) = linearize_residual(inner, in_shape, x)?;
            (Some(factor), record)
        }
    };
    Ok((factor, record, y))
}

/// Aggregate of a layer sequence at one instance: the folded `(W, b)`, the
/// per-layer pattern records, and the sequence's forward output.
type SeqLinearization = (DenseMatrix, Vec<f64>, Vec<PatternRecord>, Vec<f64>);

/// Left fold over a layer sequence: maintains the running `(W, b)` with
/// `W ← W'·W`, `b ← W'·b + b'`, never materializing more than one factor.
fn linearize_seq(
    layers: &[LayerSpec],
    in_shape: &Shape,
    x: &[f64],
) -> Result<SeqLinearization, LinearizeError> {
    let mut acc: Option<(DenseMatrix, Vec<f64>)> = None;
    let mut records = Vec::with_capacity(layers.len());
    let mut shape = in_shape.clone();
    let mut cur = x.to_vec();
    for layer in layers {
        let (factor, record, y) = layer_factor(layer, &shape, &cur)?;
        if let Some(factor) = factor {
            acc = Some(match acc {
                None => (factor.w.to_dense(), factor.b),
                Some((w, b)) => {
                    let new_w = factor.w.mul_dense(&w)?;
                    let mut new_b = factor.w.matvec(&b)?;
                    for (nb, fb) in new_b.iter_mut().zip(&factor.b) {
                        *nb += fb;
                    }
                    (new_w, new_b)
                }
            });
        }
        shape = layer_output_shape(layer, &shape)
            .map_err(|detail| ModelError::Validation { layer: None, detail })?;
        records.push(record);
        cur = y;
    }
    let (w, b) = acc.unwrap_or_else(|| {
        (DenseMatrix::identity(in_shape.len()), vec![0.0; in_shape.len()])
    });
    Ok((w, b, records, cur))
}

/// The exact affine form of `net` at instance `x`.
pub fn linearize_instance(
    net: &Network,
    x: &[f64],
) -> Result<InstanceLinearization, LinearizeError> {
    if x.len() != net.input_dim() {
        return Err(LinearizeError::Model(ModelError::Validation {
            layer: None,
            detail: format!("input length {} != {}", x.len(), net.input_dim()),
        }));
    }
    let (w, b, records, _) = linearize_seq(&net.layers, &net.input_shape, x)?;
    Ok(InstanceLinearization { w, b, pattern: ActivationPattern { records } })
}

/// Prefix/suffix variant: linearize `layers` starting from `in_shape` on the
/// given input slice. Used for per-neuron attribution.
pub(crate) fn linearize_layer_range(
    layers: &[LayerSpec],
    in_shape: &Shape,
    x: &[f64],
) -> Result<(DenseMatrix, Vec<f64>, Vec<f64>), LinearizeError> {
    let (w, b, _, out) = linearize_seq(layers, in_shape, x)?;
    Ok((w, b, out))
}

/// Share-weighted combination of member linearizations:
/// `W = Σ aᵢ·Wᵢ`, `b = Σ aᵢ·bᵢ`; the pattern concatenates member patterns.
pub fn linearize_ensemble(
    ens: &Ensemble,
    x: &[f64],
) -> Result<InstanceLinearization, LinearizeError> {
    ens.validate()?;
    let out_dim = ens.output_dim()?;
    let mut w = DenseMatrix::zeros(out_dim, ens.input_dim());
    let mut b = vec![0.0; out_dim];
    let mut records = Vec::new();
    for (member, &share) in ens.members.iter().zip(&ens.shares) {
        let lin = linearize_instance(member, x)?;
        for (acc, v) in w.values_mut().iter_mut().zip(lin.w.values()) {
            *acc += share * v;
        }
        for (acc, v) in b.iter_mut().zip(&lin.b) {
            *acc += share * v;
        }
        records.extend(lin.pattern.records);
    }
    Ok(InstanceLinearization { w, b, pattern: ActivationPattern { records } })
}

/// Linearize either kind of model.
pub fn linearize_model(model: &Model, x: &[f64]) -> Result<InstanceLinearization, LinearizeError> {
    match model {
        Model::Network(n) => linearize_instance(n, x),
        Model::Ensemble(e) => linearize_ensemble(e, x),
    }
}

/// Central-difference Jacobian: J[i][j] = (F(x+h·eⱼ)[i] − F(x−h·eⱼ)[i]) / 2h.
pub fn jacobian_fd(net: &Network, x: &[f64], h: f64) -> Result<DenseMatrix, LinearizeError> {
    let out_dim = net.output_dim()?;
    let mut j = DenseMatrix::zeros(out_dim, x.len());
    let mut probe = x.to_vec();
    for col in 0..x.len() {
        probe[col] = x[col] + h;
        let (plus, _) = net.forward(&probe)?;
        probe[col] = x[col] - h;
        let (minus, _) = net.forward(&probe)?;
        probe[col] = x[col];
        for row in 0..out_dim {
            j.set(row, col, (plus[row] - minus[row]) / (2.0 * h));
        }
    }
    Ok(j)
}

/// The activation pattern of `net` at `x`, without building any matrices.
pub fn pattern_of(net: &Network, x: &[f64]) -> Result<ActivationPattern, LinearizeError> {
    let (_, trace) = net.forward(x)?;
    fn convert(records: &[TraceRecord], layers: &[LayerSpec]) -> Vec<PatternRecord> {
        records
            .iter()
            .zip(layers)
            .map(|(rec, layer)| match (rec, layer) {
                (TraceRecord::Activation { z }, LayerSpec::Activation { kind }) => {
                    PatternRecord::Activation {
                        lambda: activation_lambda(*kind, z),
                        branch: z.iter().map(|&v| branch_of(v)).collect(),
                    }
                }
                (TraceRecord::MaxPool { selected }, _) => {
                    PatternRecord::MaxPool { selected: selected.clone() }
                }
                (TraceRecord::Residual { inner }, LayerSpec::Residual { inner: inner_layers }) => {
                    PatternRecord::Residual { inner: convert(inner, inner_layers) }
                }
                _ => PatternRecord::None,
            })
            .collect()
    }
    Ok(ActivationPattern { records: convert(&trace.records, &net.layers) })
}

/// Walk along `theta` from `x` and bisect for the largest step that keeps the
/// activation pattern of `x`. Patterns are compared by their discrete part,
/// so the probe is meaningful for piecewise-linear networks, whose regions
/// are convex along any ray.
pub fn region_probe(
    net: &Network,
    x: &[f64],
    theta: &[f64],
) -> Result<RegionProbe, LinearizeError> {
    if theta.len() != x.len() {
        return Err(LinearizeError::Probe {
            detail: format!("direction length {} != {}", theta.len(), x.len()),
        });
    }
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(LinearizeError::Probe { detail: "direction must be nonzero".into() });
    }
    let direction: Vec<f64> = theta.iter().map(|v| v / norm).collect();
    let base = pattern_of(net, x)?;

    let at = |t: f64| -> Result<ActivationPattern, LinearizeError> {
        let probe: Vec<f64> =
            x.iter().zip(&direction).map(|(xi, di)| xi + t * di).collect();
        pattern_of(net, &probe)
    };

    let far = at(PROBE_T_MAX)?;
    if base.same_region(&far) {
        return Ok(RegionProbe {
            x: x.to_vec(),
            direction,
            delta: PROBE_T_MAX,
            boundary_layer: None,
            unbounded: true,
        });
    }

    let mut lo = 0.0;
    let mut hi = PROBE_T_MAX;
    for _ in 0..PROBE_MAX_ITERS {
        if hi - lo <= PROBE_RESOLUTION {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if base.same_region(&at(mid)?) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beyond = at(hi)?;
    Ok(RegionProbe {
        x: x.to_vec(),
        direction,
        delta: lo,
        boundary_layer: base.first_difference(&beyond),
        unbounded: false,
    })
}

/// Minimum distance to an activation kink at `x`: the smallest |z| over all
/// piecewise-linear activation units and the smallest max-pool margin
/// (selected value minus runner-up). Large values mean finite differences
/// will not straddle a kink.
pub fn kink_margin(net: &Network, x: &[f64]) -> Result<f64, LinearizeError> {
    fn walk(
        layers: &[LayerSpec],
        in_shape: &Shape,
        x: &[f64],
        margin: &mut f64,
    ) -> Result<Vec<f64>, LinearizeError> {
        let mut shape = in_shape.clone();
        let mut cur = x.to_vec();
        for layer in layers {
            match layer {
                LayerSpec::Activation { .. } => {
                    for &z in &cur {
                        *margin = margin.min(z.abs());
                    }
                }
                LayerSpec::MaxPool2D { k, stride } => {
                    let od = layer_output_shape(layer, &shape)
                        .map_err(|detail| ModelError::Validation { layer: None, detail })?;
                    let d = od.dims();
                    for c in 0..d[0] {
                        for i in 0..d[1] {
                            for j in 0..d[2] {
                                let mut best = f64::NEG_INFINITY;
                                let mut second = f64::NEG_INFINITY;
                                for a in 0..*k {
                                    for bk in 0..*k {
                                        let xi = flat_index(
                                            c,
                                            i * stride + a,
                                            j * stride + bk,
                                            &shape,
                                        )?;
                                        let v = cur[xi];
                                        if v > best {
                                            second = best;
                                            best = v;
                                        } else if v > second {
                                            second = v;
                                        }
                                    }
                                }
                                if second.is_finite() {
                                    *margin = margin.min(best - second);
                                }
                            }
                        }
                    }
                }
                LayerSpec::Residual { inner } => {
                    walk(inner, &shape, &cur, margin)?;
                }
                _ => {}
            }
            let (y, _) = eval_layer(layer, &shape, &cur)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            shape = layer_output_shape(layer, &shape)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            cur = y;
        }
        Ok(cur)
    }
    let mut margin = f64::INFINITY;
    walk(&net.layers, &net.input_shape, x, &mut margin)?;
    Ok(margin)
}
