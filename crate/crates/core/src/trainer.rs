//! Minimal reverse-mode training: enough SGD to produce the classifiers and
//! parametric t-SNE projection networks the rest of the crate analyzes.
//!
//! Gradients are exact reverse-mode derivatives with respect to every dense
//! weight/bias, conv kernel/bias, and batch-norm γ/β (μ, σ², ε are inference
//! statistics and stay frozen). Training is bit-deterministic: shuffling comes
//! from a seeded generator and batch gradients accumulate in sample order.

use crate::model::{
    eval_layer, infer_shapes, layer_output_shape, LayerSpec, ModelError, Network,
};
use crate::tensor::{flat_index, DenseMatrix, Shape, TensorError};
use crate::experiments::{argmax, Dataset};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt;

#[derive(Debug)]
pub enum TrainError {
    Model(ModelError),
    Tensor(TensorError),
    /// Bad configuration or arguments.
    Invalid { detail: String },
    /// Pairwise-affinity construction failed.
    Affinity { detail: String },
    /// Numerical breakdown (degenerate embeddings, non-finite loss).
    Numeric { detail: String },
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
            TrainError::Invalid { detail } => write!(f, "{detail}"),
            TrainError::Affinity { detail } => write!(f, "affinity error: {detail}"),
            TrainError::Numeric { detail } => write!(f, "numeric error: {detail}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

fn invalid(detail: impl Into<String>) -> TrainError {
    TrainError::Invalid { detail: detail.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Tsne,
}

/// Training hyperparameters. `perplexity` only matters for the t-SNE loss.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub perplexity: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            loss: LossKind::CrossEntropy,
            perplexity: 15.0,
        }
    }
}

/// Per-sample loss for [`backprop`].
#[derive(Debug, Clone)]
pub enum SampleLoss {
    /// Σ (y − t)²; the target is a vector.
    SquaredError(Vec<f64>),
    /// Softmax cross-entropy on logits; the target is a class index.
    CrossEntropy(usize),
}

/// Gradients mirroring the trainable parameters of a layer. Frozen
/// batch-norm statistics have no slot here.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrads {
    None,
    Dense { dw: Vec<f64>, db: Option<Vec<f64>> },
    Conv { dk: Vec<f64>, db: Option<Vec<f64>> },
    BatchNorm { dgamma: Vec<f64>, dbeta: Vec<f64> },
    Residual { inner: Vec<LayerGrads> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        fn layer_zeros(layer: &LayerSpec) -> LayerGrads {
            match layer {
                LayerSpec::Dense { weight, bias } => LayerGrads::Dense {
                    dw: vec![0.0; weight.rows() * weight.cols()],
                    db: bias.as_ref().map(|b| vec![0.0; b.len()]),
                },
                LayerSpec::Conv2D { kernels, bias, .. } => LayerGrads::Conv {
                    dk: vec![0.0; kernels.values.len()],
                    db: bias.as_ref().map(|b| vec![0.0; b.len()]),
                },
                LayerSpec::BatchNorm { gamma, .. } => LayerGrads::BatchNorm {
                    dgamma: vec![0.0; gamma.len()],
                    dbeta: vec![0.0; gamma.len()],
                },
                LayerSpec::Residual { inner } => {
                    LayerGrads::Residual { inner: inner.iter().map(layer_zeros).collect() }
                }
                _ => LayerGrads::None,
            }
        }
        Gradients { layers: net.layers.iter().map(layer_zeros).collect() }
    }

    /// self += k · other (same structure required).
    pub fn add_scaled(&mut self, other: &Gradients, k: f64) {
        fn add(a: &mut LayerGrads, b: &LayerGrads, k: f64) {
            match (a, b) {
                (LayerGrads::Dense { dw: aw, db: ab }, LayerGrads::Dense { dw: bw, db: bb }) => {
                    for (x, y) in aw.iter_mut().zip(bw) {
                        *x += k * y;
                    }
                    if let (Some(ab), Some(bb)) = (ab, bb) {
                        for (x, y) in ab.iter_mut().zip(bb) {
                            *x += k * y;
                        }
                    }
                }
                (LayerGrads::Conv { dk: ak, db: ab }, LayerGrads::Conv { dk: bk, db: bb }) => {
                    for (x, y) in ak.iter_mut().zip(bk) {
                        *x += k * y;
                    }
                    if let (Some(ab), Some(bb)) = (ab, bb) {
                        for (x, y) in ab.iter_mut().zip(bb) {
                            *x += k * y;
                        }
                    }
                }
                (
                    LayerGrads::BatchNorm { dgamma: ag, dbeta: ab },
                    LayerGrads::BatchNorm { dgamma: bg, dbeta: bb },
                ) => {
                    for (x, y) in ag.iter_mut().zip(bg) {
                        *x += k * y;
                    }
                    for (x, y) in ab.iter_mut().zip(bb) {
                        *x += k * y;
                    }
                }
                (LayerGrads::Residual { inner: ai }, LayerGrads::Residual { inner: bi }) => {
                    for (x, y) in ai.iter_mut().zip(bi) {
                        add(x, y, k);
                    }
                }
                _ => {}
            }
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            add(a, b, k);
        }
    }

    pub fn scale(&mut self, k: f64) {
        fn scale(g: &mut LayerGrads, k: f64) {
            match g {
                LayerGrads::Dense { dw, db } => {
                    for x in dw.iter_mut() {
                        *x *= k;
                    }
                    if let Some(db) = db {
                        for x in db.iter_mut() {
                            *x *= k;
                        }
                    }
                }
                LayerGrads::Conv { dk, db } => {
                    for x in dk.iter_mut() {
                        *x *= k;
                    }
                    if let Some(db) = db {
                        for x in db.iter_mut() {
                            *x *= k;
                        }
                    }
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    for x in dgamma.iter_mut() {
                        *x *= k;
                    }
                    for x in dbeta.iter_mut() {
                        *x *= k;
                    }
                }
                LayerGrads::Residual { inner } => {
                    for g in inner.iter_mut() {
                        scale(g, k);
                    }
                }
                LayerGrads::None => {}
            }
        }
        for g in self.layers.iter_mut() {
            scale(g, k);
        }
    }
}

struct LayerCache {
    input: Vec<f64>,
    in_shape: Shape,
    inner: Option<Vec<LayerCache>>,
}

fn forward_with_cache(
    layers: &[LayerSpec],
    in_shape: &Shape,
    x: &[f64],
) -> Result<(Vec<f64>, Vec<LayerCache>), TrainError> {
    let mut caches = Vec::with_capacity(layers.len());
    let mut shape = in_shape.clone();
    let mut cur = x.to_vec();
    for layer in layers {
        let inner = match layer {
            LayerSpec::Residual { inner } => {
                // cache inner inputs too; the residual output still comes from
                // eval_layer below so the add happens once
                let (_, inner_caches) = forward_with_cache(inner, &shape, &cur)?;
                Some(inner_caches)
            }
            _ => None,
        };
        caches.push(LayerCache { input: cur.clone(), in_shape: shape.clone(), inner });
        let (next, _) = eval_layer(layer, &shape, &cur)
            .map_err(|detail| ModelError::Validation { layer: None, detail })?;
        shape = layer_output_shape(layer, &shape)
            .map_err(|detail| ModelError::Validation { layer: None, detail })?;
        cur = next;
    }
    Ok((cur, caches))
}

/// Backward through one layer: accumulates parameter gradients into `grads`
/// and returns the gradient with respect to the layer input.
fn backward_layer(
    layer: &LayerSpec,
    cache: &LayerCache,
    grad_out: &[f64],
    grads: &mut LayerGrads,
) -> Result<Vec<f64>, TrainError> {
    let x = &cache.input;
    let in_shape = &cache.in_shape;
    match (layer, grads) {
        (LayerSpec::Dense { weight, .. }, LayerGrads::Dense { dw, db }) => {
            let (rows, cols) = (weight.rows(), weight.cols());
            let mut dx = vec![0.0; cols];
            for r in 0..rows {
                let g = grad_out[r];
                if g == 0.0 {
                    continue;
                }
                let w_row = weight.row(r);
                let dw_row = &mut dw[r * cols..(r + 1) * cols];
                for (d, xc) in dw_row.iter_mut().zip(x) {
                    *d += g * xc;
                }
                for (dxc, wc) in dx.iter_mut().zip(w_row) {
                    *dxc += wc * g;
                }
            }
            if let Some(db) = db {
                for (d, g) in db.iter_mut().zip(grad_out) {
                    *d += g;
                }
            }
            Ok(dx)
        }
        (
            LayerSpec::Conv2D { kernels, stride, padding, .. },
            LayerGrads::Conv { dk, db },
        ) => {
            let out_shape = layer_output_shape(layer, in_shape)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            let od = out_shape.dims();
            let (oc_n, oh, ow) = (od[0], od[1], od[2]);
            let (_, h, w) = in_shape.chw()?;
            let s = *stride as isize;
            let p = *padding as isize;
            let mut dx = vec![0.0; x.len()];
            let mut idx = 0;
            for oc in 0..oc_n {
                for i in 0..oh {
                    for j in 0..ow {
                        let g = grad_out[idx];
                        idx += 1;
                        if let Some(db) = db.as_mut() {
                            db[oc] += g;
                        }
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
                                    let xi =
                                        flat_index(ic, ih as usize, iw as usize, in_shape)?;
                                    let ki = ((oc * kernels.in_channels + ic) * kernels.kh + a)
                                        * kernels.kw
                                        + bk;
                                    dk[ki] += g * x[xi];
                                    dx[xi] += g * kernels.values[ki];
                                }
                            }
                        }
                    }
                }
            }
            Ok(dx)
        }
        (LayerSpec::MaxPool2D { .. }, _) => {
            let (_, trace) = eval_layer(layer, in_shape, x)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            let crate::model::TraceRecord::MaxPool { selected } = trace else {
                return Err(invalid("max pool produced no selection trace"));
            };
            let mut dx = vec![0.0; x.len()];
            for (r, &sel) in selected.iter().enumerate() {
                dx[sel] += grad_out[r];
            }
            Ok(dx)
        }
        (LayerSpec::AvgPool2D { k, stride }, _) => {
            let out_shape = layer_output_shape(layer, in_shape)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            let od = out_shape.dims();
            let norm = 1.0 / ((k * k) as f64);
            let mut dx = vec![0.0; x.len()];
            let mut idx = 0;
            for c in 0..od[0] {
                for i in 0..od[1] {
                    for j in 0..od[2] {
                        let g = grad_out[idx] * norm;
                        idx += 1;
                        for a in 0..*k {
                            for bk in 0..*k {
                                let xi =
                                    flat_index(c, i * stride + a, j * stride + bk, in_shape)?;
                                dx[xi] += g;
                            }
                        }
                    }
                }
            }
            Ok(dx)
        }
        (
            LayerSpec::BatchNorm { gamma, mu, var, eps, .. },
            LayerGrads::BatchNorm { dgamma, dbeta },
        ) => {
            let channels = in_shape.dims()[0];
            let spatial = in_shape.len() / channels;
            let mut dx = vec![0.0; x.len()];
            for c in 0..channels {
                let denom = (var[c] + eps).sqrt();
                let w_norm = gamma[c] / denom;
                for sp in 0..spatial {
                    let i = c * spatial + sp;
                    let g = grad_out[i];
                    dgamma[c] += g * (x[i] - mu[c]) / denom;
                    dbeta[c] += g;
                    dx[i] = g * w_norm;
                }
            }
            Ok(dx)
        }
        (LayerSpec::Activation { kind }, _) => {
            Ok(x.iter().zip(grad_out).map(|(&z, &g)| kind.derivative(z) * g).collect())
        }
        (LayerSpec::Flatten, _) => Ok(grad_out.to_vec()),
        (LayerSpec::Residual { inner }, LayerGrads::Residual { inner: inner_grads }) => {
            let inner_caches = cache.inner.as_ref().ok_or_else(|| invalid("missing residual cache"))?;
            let mut dx = backward_layers(inner, inner_caches, grad_out, inner_grads)?;
            // skip path
            for (d, g) in dx.iter_mut().zip(grad_out) {
                *d += g;
            }
            Ok(dx)
        }
        _ => Err(invalid("gradient structure does not match the layer")),
    }
}

fn backward_layers(
    layers: &[LayerSpec],
    caches: &[LayerCache],
    grad_out: &[f64],
    grads: &mut [LayerGrads],
) -> Result<Vec<f64>, TrainError> {
    let mut g = grad_out.to_vec();
    for i in (0..layers.len()).rev() {
        g = backward_layer(&layers[i], &caches[i], &g, &mut grads[i])?;
    }
    Ok(g)
}

/// Reverse-mode gradients of a scalar loss given its gradient at the output.
/// Accumulates into `grads`; returns the network output.
pub fn backprop_output_grad(
    net: &Network,
    x: &[f64],
    dl_dy: &[f64],
    grads: &mut Gradients,
) -> Result<Vec<f64>, TrainError> {
    let (y, caches) = forward_with_cache(&net.layers, &net.input_shape, x)?;
    if dl_dy.len() != y.len() {
        return Err(invalid(format!(
            "output gradient length {} != output length {}",
            dl_dy.len(),
            y.len()
        )));
    }
    backward_layers(&net.layers, &caches, dl_dy, &mut grads.layers)?;
    Ok(y)
}

fn softmax(y: &[f64]) -> Vec<f64> {
    let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = y.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Gradients of one sample's loss; returns them with the loss value.
pub fn backprop(
    net: &Network,
    x: &[f64],
    loss: &SampleLoss,
) -> Result<(Gradients, f64), TrainError> {
    let mut grads = Gradients::zeros_like(net);
    let loss_value = backprop_into(net, x, loss, &mut grads)?;
    Ok((grads, loss_value))
}

/// As [`backprop`], accumulating into existing gradients.
pub fn backprop_into(
    net: &Network,
    x: &[f64],
    loss: &SampleLoss,
    grads: &mut Gradients,
) -> Result<f64, TrainError> {
    let (y, caches) = forward_with_cache(&net.layers, &net.input_shape, x)?;
    let (dl_dy, loss_value) = match loss {
        SampleLoss::SquaredError(target) => {
            if target.len() != y.len() {
                return Err(invalid(format!(
                    "target length {} != output length {}",
                    target.len(),
                    y.len()
                )));
            }
            let dl: Vec<f64> = y.iter().zip(target).map(|(yi, ti)| 2.0 * (yi - ti)).collect();
            let l: f64 = y.iter().zip(target).map(|(yi, ti)| (yi - ti) * (yi - ti)).sum();
            (dl, l)
        }
        SampleLoss::CrossEntropy(class) => {
            if *class >= y.len() {
                return Err(invalid(format!("class {class} out of range {}", y.len())));
            }
            let probs = softmax(&y);
            let mut dl = probs.clone();
            dl[*class] -= 1.0;
            let l = -probs[*class].max(f64::MIN_POSITIVE).ln();
            (dl, l)
        }
    };
    backward_layers(&net.layers, &caches, &dl_dy, &mut grads.layers)?;
    if !loss_value.is_finite() {
        return Err(TrainError::Numeric { detail: "non-finite loss".into() });
    }
    Ok(loss_value)
}

/// θ ← θ − lr·g for every trainable parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, lr: f64) -> Result<(), TrainError> {
    fn step(layer: &mut LayerSpec, g: &LayerGrads, lr: f64) -> Result<(), TrainError> {
        match (layer, g) {
            (LayerSpec::Dense { weight, bias }, LayerGrads::Dense { dw, db }) => {
                if weight.values().len() != dw.len() {
                    return Err(invalid("dense gradient shape mismatch"));
                }
                for (w, d) in weight.values_mut().iter_mut().zip(dw) {
                    *w -= lr * d;
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    for (w, d) in b.iter_mut().zip(db) {
                        *w -= lr * d;
                    }
                }
                Ok(())
            }
            (LayerSpec::Conv2D { kernels, bias, .. }, LayerGrads::Conv { dk, db }) => {
                if kernels.values.len() != dk.len() {
                    return Err(invalid("conv gradient shape mismatch"));
                }
                for (w, d) in kernels.values.iter_mut().zip(dk) {
                    *w -= lr * d;
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    for (w, d) in b.iter_mut().zip(db) {
                        *w -= lr * d;
                    }
                }
                Ok(())
            }
            (
                LayerSpec::BatchNorm { gamma, beta, .. },
                LayerGrads::BatchNorm { dgamma, dbeta },
            ) => {
                for (w, d) in gamma.iter_mut().zip(dgamma) {
                    *w -= lr * d;
                }
                for (w, d) in beta.iter_mut().zip(dbeta) {
                    *w -= lr * d;
                }
                Ok(())
            }
            (LayerSpec::Residual { inner }, LayerGrads::Residual { inner: gi }) => {
                if inner.len() != gi.len() {
                    return Err(invalid("residual gradient shape mismatch"));
                }
                for (l, g) in inner.iter_mut().zip(gi) {
                    step(l, g, lr)?;
                }
                Ok(())
            }
            (_, LayerGrads::None) => Ok(()),
            _ => Err(invalid("gradient structure does not match the layer")),
        }
    }
    if grads.layers.len() != net.layers.len() {
        return Err(invalid("gradient layer count mismatch"));
    }
    for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
        step(layer, g, lr)?;
    }
    Ok(())
}

/// Symmetric uniform init, ±√(6/(fan_in+fan_out)) per weight layer; biases
/// and batch-norm parameters reset to their neutral values.
pub fn init_glorot_uniform(net: &mut Network, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    fn init_layers(layers: &mut [LayerSpec], rng: &mut ChaCha8Rng) {
        for layer in layers {
            match layer {
                LayerSpec::Dense { weight, bias } => {
                    let limit = (6.0 / (weight.cols() + weight.rows()) as f64).sqrt();
                    for w in weight.values_mut() {
                        *w = rng.random_range(-limit..limit);
                    }
                    if let Some(b) = bias {
                        b.fill(0.0);
                    }
                }
                LayerSpec::Conv2D { kernels, bias, .. } => {
                    let fan_in = kernels.in_channels * kernels.kh * kernels.kw;
                    let fan_out = kernels.out_channels * kernels.kh * kernels.kw;
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    for w in kernels.values.iter_mut() {
                        *w = rng.random_range(-limit..limit);
                    }
                    if let Some(b) = bias {
                        b.fill(0.0);
                    }
                }
                LayerSpec::BatchNorm { gamma, beta, .. } => {
                    gamma.fill(1.0);
                    beta.fill(0.0);
                }
                LayerSpec::Residual { inner } => init_layers(inner, rng),
                _ => {}
            }
        }
    }
    init_layers(&mut net.layers, &mut rng);
}

/// Set every batch-norm layer's μ and σ² from one forward pass over `inputs`
/// (population statistics per channel). γ, β, ε are left untouched.
pub fn calibrate_batchnorm(net: &mut Network, inputs: &[Vec<f64>]) -> Result<(), TrainError> {
    if inputs.is_empty() {
        return Err(invalid("batch-norm calibration needs at least one input"));
    }
    fn walk(
        layers: &mut [LayerSpec],
        in_shape: &Shape,
        mut batch: Vec<Vec<f64>>,
    ) -> Result<Vec<Vec<f64>>, TrainError> {
        let mut shape = in_shape.clone();
        for layer in layers.iter_mut() {
            if let LayerSpec::BatchNorm { mu, var, .. } = layer {
                let channels = shape.dims()[0];
                let spatial = shape.len() / channels;
                let count = (batch.len() * spatial) as f64;
                for c in 0..channels {
                    let mut sum = 0.0;
                    let mut sum_sq = 0.0;
                    for x in &batch {
                        for sp in 0..spatial {
                            let v = x[c * spatial + sp];
                            sum += v;
                            sum_sq += v * v;
                        }
                    }
                    let mean = sum / count;
                    mu[c] = mean;
                    var[c] = (sum_sq / count - mean * mean).max(0.0);
                }
            }
            if let LayerSpec::Residual { inner } = layer {
                walk(inner, &shape, batch.clone())?;
            }
            let mut next = Vec::with_capacity(batch.len());
            for x in &batch {
                let (y, _) = eval_layer(layer, &shape, x)
                    .map_err(|detail| ModelError::Validation { layer: None, detail })?;
                next.push(y);
            }
            shape = layer_output_shape(layer, &shape)
                .map_err(|detail| ModelError::Validation { layer: None, detail })?;
            batch = next;
        }
        Ok(batch)
    }
    walk(&mut net.layers, &net.input_shape.clone(), inputs.to_vec())?;
    Ok(())
}

/// One epoch's training statistics.
#[derive(Debug, Clone)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

fn check_config(cfg: &TrainConfig, dataset_len: usize) -> Result<(), TrainError> {
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(invalid("learning rate must be positive"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > dataset_len {
        return Err(invalid(format!(
            "batch size {} must be in 1..={dataset_len}",
            cfg.batch_size
        )));
    }
    Ok(())
}

pub fn accuracy(net: &Network, ds: &Dataset) -> Result<f64, TrainError> {
    let mut correct = 0;
    for (x, &label) in ds.inputs.iter().zip(&ds.labels) {
        let (y, _) = net.forward(x)?;
        if argmax(&y) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Seeded minibatch SGD with softmax cross-entropy. The per-epoch log records
/// the mean training loss and accuracy on `eval` (or on the training set when
/// no separate evaluation set is given). Reruns with the same seed are
/// bit-identical.
pub fn train_classifier(
    mut net: Network,
    ds: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Network, Vec<EpochStats>), TrainError> {
    if cfg.loss != LossKind::CrossEntropy {
        return Err(invalid("train_classifier expects the cross-entropy loss"));
    }
    if ds.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let out_dim = net.output_dim()?;
    if out_dim != ds.num_classes {
        return Err(invalid(format!(
            "model has {out_dim} outputs for {} classes",
            ds.num_classes
        )));
    }
    check_config(cfg, ds.len())?;
    infer_shapes(&net)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut grads = Gradients::zeros_like(&net);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads = Gradients::zeros_like(&net);
            for &i in batch {
                loss_sum +=
                    backprop_into(&net, &ds.inputs[i], &SampleLoss::CrossEntropy(ds.labels[i]), &mut grads)?;
            }
            grads.scale(1.0 / batch.len() as f64);
            sgd_step(&mut net, &grads, cfg.learning_rate)?;
        }
        let _ = &grads;
        let acc = accuracy(&net, eval.unwrap_or(ds))?;
        log.push(EpochStats { epoch, loss: loss_sum / ds.len() as f64, accuracy: acc });
    }
    Ok((net, log))
}

/// Symmetric pairwise affinities with per-point bandwidths tuned to a target
/// perplexity.
#[derive(Debug, Clone)]
pub struct PairwiseAffinity {
    /// Symmetric N×N joint distribution; diagonal zero, off-diagonal sums to 1.
    pub p: DenseMatrix,
    pub sigmas: Vec<f64>,
}

fn squared_distances(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d: f64 =
                data[i].iter().zip(&data[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i][j] = d;
            d2[j][i] = d;
        }
    }
    d2
}

/// Conditional distribution over neighbors of `i` at precision β = 1/(2σ²),
/// and its perplexity 2^H (H in bits).
fn conditional_row(d2_row: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let n = d2_row.len();
    let min_d2 = (0..n)
        .filter(|&j| j != i)
        .map(|j| d2_row[j])
        .fold(f64::INFINITY, f64::min);
    let mut p = vec![0.0; n];
    let mut sum = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        let v = (-(d2_row[j] - min_d2) * beta).exp();
        p[j] = v;
        sum += v;
    }
    let mut entropy_bits = 0.0;
    for j in 0..n {
        if j == i {
            continue;
        }
        p[j] /= sum;
        if p[j] > 0.0 {
            entropy_bits -= p[j] * p[j].log2();
        }
    }
    (p, entropy_bits.exp2())
}

const PERPLEXITY_TOL: f64 = 1e-5;
const PERPLEXITY_MAX_ITERS: usize = 100;

/// Gaussian-kernel affinities: conditional distributions per point, bandwidth
/// bisected so the achieved perplexity matches the target, then symmetrized
/// and normalized over all ordered pairs.
pub fn tsne_affinities(
    data: &[Vec<f64>],
    perplexity: f64,
) -> Result<PairwiseAffinity, TrainError> {
    let n = data.len();
    if n < 2 {
        return Err(TrainError::Affinity { detail: "need at least two points".into() });
    }
    if !(perplexity > 0.0) || perplexity >= n as f64 {
        return Err(TrainError::Affinity {
            detail: format!("perplexity {perplexity} must be in (0, {n})"),
        });
    }
    let d2 = squared_distances(data);
    let mut conditionals = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        if d2[i].iter().enumerate().all(|(j, &v)| j == i || v == 0.0) {
            return Err(TrainError::Affinity {
                detail: format!("point {i} is identical to every other point"),
            });
        }
        // bisection on beta = 1/(2 sigma^2); perplexity decreases in beta
        let mut beta = 1.0;
        let mut lo = 0.0_f64;
        let mut hi = f64::INFINITY;
        let mut row = Vec::new();
        for _ in 0..PERPLEXITY_MAX_ITERS {
            let (p, perp) = conditional_row(&d2[i], i, beta);
            row = p;
            if (perp - perplexity).abs() <= PERPLEXITY_TOL {
                break;
            }
            if perp > perplexity {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (lo + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (lo + hi);
            }
        }
        sigmas.push((0.5 / beta).sqrt());
        conditionals.push(row);
    }
    let mut p = DenseMatrix::zeros(n, n);
    let norm = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set(i, j, (conditionals[i][j] + conditionals[j][i]) * norm);
            }
        }
    }
    Ok(PairwiseAffinity { p, sigmas })
}

struct EmbeddingKernel {
    /// Pairwise squared distances.
    d2: DenseMatrix,
    /// Smallest off-diagonal squared distance.
    min_d2: f64,
    /// exp(−(d² − min_d2)) per ordered pair (shift cancels on normalization).
    weights: DenseMatrix,
    total: f64,
}

/// Joint Gaussian similarities of the embedding points: the kernel is
/// exp(−‖yᵢ−yⱼ‖²) (bandwidth fixed at 2σ² = 1), normalized over all ordered
/// pairs. Distances are shifted by their minimum before exponentiating so a
/// spread-out embedding cannot underflow the whole distribution.
fn embedding_kernel(embeddings: &[Vec<f64>]) -> Result<EmbeddingKernel, TrainError> {
    let n = embeddings.len();
    let mut d2 = DenseMatrix::zeros(n, n);
    let mut max_d2 = 0.0_f64;
    let mut min_d2 = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let dist: f64 = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2.set(i, j, dist);
            max_d2 = max_d2.max(dist);
            min_d2 = min_d2.min(dist);
        }
    }
    if n >= 2 && max_d2 == 0.0 {
        return Err(TrainError::Numeric {
            detail: "all embeddings identical: similarity distribution is degenerate".into(),
        });
    }
    let mut weights = DenseMatrix::zeros(n, n);
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = (-(d2.get(i, j) - min_d2)).exp();
            weights.set(i, j, v);
            total += v;
        }
    }
    Ok(EmbeddingKernel { d2, min_d2, weights, total })
}

/// KL divergence between the input affinities and the embedding similarities
/// (natural log; terms with p = 0 are skipped). Evaluated in log space:
/// ln q_ij = −(d²_ij − min) − ln Σ, so distant pairs cannot underflow q to 0.
pub fn tsne_loss(p: &PairwiseAffinity, embeddings: &[Vec<f64>]) -> Result<f64, TrainError> {
    let n = embeddings.len();
    if p.p.rows() != n {
        return Err(invalid(format!("{} affinities for {n} embeddings", p.p.rows())));
    }
    let kernel = embedding_kernel(embeddings)?;
    let ln_total = kernel.total.ln();
    let mut loss = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let pij = p.p.get(i, j);
            if pij > 0.0 {
                let ln_qij = -(kernel.d2.get(i, j) - kernel.min_d2) - ln_total;
                loss += pij * (pij.ln() - ln_qij);
            }
        }
    }
    if !loss.is_finite() {
        return Err(TrainError::Numeric { detail: "non-finite loss".into() });
    }
    Ok(loss)
}

/// Gradient of [`tsne_loss`] with respect to each embedding point:
/// dL/dyₐ = Σ_b 2·[(p_ab − q_ab) + (p_ba − q_ba)]·(yₐ − y_b).
pub fn tsne_output_grads(
    p: &PairwiseAffinity,
    embeddings: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, TrainError> {
    let n = embeddings.len();
    let kernel = embedding_kernel(embeddings)?;
    let dim = embeddings[0].len();
    let mut grads = vec![vec![0.0; dim]; n];
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let q_ab = kernel.weights.get(a, b) / kernel.total;
            let q_ba = kernel.weights.get(b, a) / kernel.total;
            let coeff = 2.0 * ((p.p.get(a, b) - q_ab) + (p.p.get(b, a) - q_ba));
            for d in 0..dim {
                grads[a][d] += coeff * (embeddings[a][d] - embeddings[b][d]);
            }
        }
    }
    Ok(grads)
}

/// Per-iteration t-SNE training statistics (loss before the update).
#[derive(Debug, Clone)]
pub struct IterStats {
    pub iter: usize,
    pub loss: f64,
}

/// Full-batch gradient descent of the embedding-similarity KL loss through
/// the network. `cfg.epochs` is the iteration count.
pub fn train_parametric_tsne(
    mut net: Network,
    data: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<(Network, Vec<IterStats>), TrainError> {
    if cfg.loss != LossKind::Tsne {
        return Err(invalid("train_parametric_tsne expects the t-SNE loss"));
    }
    if net.output_dim()? != 2 {
        return Err(invalid("projection network must have 2 outputs"));
    }
    if data.is_empty() {
        return Err(invalid("empty dataset"));
    }
    if data[0].len() != net.input_dim() {
        return Err(invalid(format!(
            "data dimension {} != network input {}",
            data[0].len(),
            net.input_dim()
        )));
    }
    if !(cfg.learning_rate > 0.0) || !cfg.learning_rate.is_finite() {
        return Err(invalid("learning rate must be positive"));
    }
    let affinity = tsne_affinities(data, cfg.perplexity)?;
    let mut log = Vec::with_capacity(cfg.epochs);
    for iter in 0..cfg.epochs {
        let mut embeddings = Vec::with_capacity(data.len());
        for x in data {
            let (y, _) = net.forward(x)?;
            embeddings.push(y);
        }
        let loss = tsne_loss(&affinity, &embeddings)?;
        log.push(IterStats { iter, loss });
        let output_grads = tsne_output_grads(&affinity, &embeddings)?;
        let mut grads = Gradients::zeros_like(&net);
        for (x, dl_dy) in data.iter().zip(&output_grads) {
            backprop_output_grad(&net, x, dl_dy, &mut grads)?;
        }
        sgd_step(&mut net, &grads, cfg.learning_rate)?;
    }
    Ok((net, log))
}

/// Flatten all trainable parameters in a fixed order (layer order; weights
/// before biases; batch-norm γ before β). The companion of [`assign_params`]
/// and [`flatten_grads`] for finite-difference checks and snapshots.
pub fn flatten_params(net: &Network) -> Vec<f64> {
    fn collect(layers: &[LayerSpec], out: &mut Vec<f64>) {
        for layer in layers {
            match layer {
                LayerSpec::Dense { weight, bias } => {
                    out.extend_from_slice(weight.values());
                    if let Some(b) = bias {
                        out.extend_from_slice(b);
                    }
                }
                LayerSpec::Conv2D { kernels, bias, .. } => {
                    out.extend_from_slice(&kernels.values);
                    if let Some(b) = bias {
                        out.extend_from_slice(b);
                    }
                }
                LayerSpec::BatchNorm { gamma, beta, .. } => {
                    out.extend_from_slice(gamma);
                    out.extend_from_slice(beta);
                }
                LayerSpec::Residual { inner } => collect(inner, out),
                _ => {}
            }
        }
    }
    let mut out = Vec::new();
    collect(&net.layers, &mut out);
    out
}

/// Write a flat parameter vector back into the network (inverse of
/// [`flatten_params`]).
pub fn assign_params(net: &mut Network, params: &[f64]) -> Result<(), TrainError> {
    fn assign(layers: &mut [LayerSpec], params: &[f64], pos: &mut usize) -> Result<(), TrainError> {
        for layer in layers {
            match layer {
                LayerSpec::Dense { weight, bias } => {
                    let n = weight.values().len();
                    weight.values_mut().copy_from_slice(&params[*pos..*pos + n]);
                    *pos += n;
                    if let Some(b) = bias {
                        let n = b.len();
                        b.copy_from_slice(&params[*pos..*pos + n]);
                        *pos += n;
                    }
                }
                LayerSpec::Conv2D { kernels, bias, .. } => {
                    let n = kernels.values.len();
                    kernels.values.copy_from_slice(&params[*pos..*pos + n]);
                    *pos += n;
                    if let Some(b) = bias {
                        let n = b.len();
                        b.copy_from_slice(&params[*pos..*pos + n]);
                        *pos += n;
                    }
                }
                LayerSpec::BatchNorm { gamma, beta, .. } => {
                    let n = gamma.len();
                    gamma.copy_from_slice(&params[*pos..*pos + n]);
                    *pos += n;
                    let n = beta.len();
                    beta.copy_from_slice(&params[*pos..*pos + n]);
                    *pos += n;
                }
                LayerSpec::Residual { inner } => assign(inner, params, pos)?,
                _ => {}
            }
        }
        Ok(())
    }
    let expected = flatten_params(net).len();
    if params.len() != expected {
        return Err(invalid(format!("{} parameters for a net with {expected}", params.len())));
    }
    let mut pos = 0;
    assign(&mut net.layers, params, &mut pos)
}

/// Flatten gradients in the same order as [`flatten_params`].
pub fn flatten_grads(grads: &Gradients) -> Vec<f64> {
    fn collect(layers: &[LayerGrads], out: &mut Vec<f64>) {
        for g in layers {
            match g {
                LayerGrads::Dense { dw, db } => {
                    out.extend_from_slice(dw);
                    if let Some(db) = db {
                        out.extend_from_slice(db);
                    }
                }
                LayerGrads::Conv { dk, db } => {
                    out.extend_from_slice(dk);
                    if let Some(db) = db {
                        out.extend_from_slice(db);
                    }
                }
                LayerGrads::BatchNorm { dgamma, dbeta } => {
                    out.extend_from_slice(dgamma);
                    out.extend_from_slice(dbeta);
                }
                LayerGrads::Residual { inner } => collect(inner, out),
                LayerGrads::None => {}
            }
        }
    }
    let mut out = Vec::new();
    collect(&grads.layers, &mut out);
    out
}
