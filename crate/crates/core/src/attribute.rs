//! Feature attribution from exact linear forms, per-neuron analyses,
//! gradient baselines, and heatmap rendering.
//!
//! Row `c` of the instance's `W` says how each input feature is weighted for
//! output `c`; `w_cj·x_j` is that feature's exact contribution and the
//! contributions plus the bias share sum to the logit — completeness holds by
//! construction rather than by approximation.

use crate::linearize::{
    jacobian_fd, linearize_instance, linearize_layer_range, InstanceLinearization,
    LinearizeError,
};
use crate::model::{infer_shapes, Network};
use crate::tensor::{DenseMatrix, Shape};
use std::fmt;
use std::io::Write;
use std::path::Path;

#[derive(Debug)]
pub enum AttributeError {
    Linearize(LinearizeError),
    Index { what: &'static str, index: usize, bound: usize },
    Shape { detail: String },
    Io(std::io::Error),
}

impl fmt::Display for AttributeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeError::Linearize(e) => write!(f, "{e}"),
            AttributeError::Index { what, index, bound } => {
                write!(f, "{what} {index} out of range (bound {bound})")
            }
            AttributeError::Shape { detail } => write!(f, "{detail}"),
            AttributeError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for AttributeError {}

impl From<LinearizeError> for AttributeError {
    fn from(e: LinearizeError) -> Self {
        AttributeError::Linearize(e)
    }
}

impl From<std::io::Error> for AttributeError {
    fn from(e: std::io::Error) -> Self {
        AttributeError::Io(e)
    }
}

/// Exact per-feature contributions to one output.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    pub output_index: usize,
    /// `w_cj · x_j` per input feature.
    pub contributions: Vec<f64>,
    /// The instance's aggregated bias for this output.
    pub bias_share: f64,
    /// Sum of contributions plus bias share.
    pub logit: f64,
}

/// One neuron's view: how the input builds its activation, and what that
/// activation contributes downstream to a chosen final output.
#[derive(Debug, Clone)]
pub struct NeuronAttribution {
    pub layer_index: usize,
    pub neuron_index: usize,
    pub map: AttributionMap,
    pub activation_value: f64,
    pub downstream_contribution: f64,
}

/// Prefix/suffix split of a network at one layer, linearized at an instance.
#[derive(Debug, Clone)]
pub struct LayerContext {
    pub layer_index: usize,
    /// Output of the prefix (the layer's activations) at this instance.
    pub activations: Vec<f64>,
    pub prefix_w: DenseMatrix,
    pub prefix_b: Vec<f64>,
    pub suffix_w: DenseMatrix,
    pub suffix_b: Vec<f64>,
}

/// Contributions of `x` to output `c` under the given linearization.
pub fn attribution(
    lin: &InstanceLinearization,
    x: &[f64],
    c: usize,
) -> Result<AttributionMap, AttributeError> {
    if c >= lin.w.rows() {
        return Err(AttributeError::Index { what: "output index", index: c, bound: lin.w.rows() });
    }
    let row = lin.w.row(c);
    let contributions: Vec<f64> = row.iter().zip(x).map(|(w, xi)| w * xi).collect();
    let bias_share = lin.b[c];
    let logit = contributions.iter().sum::<f64>() + bias_share;
    Ok(AttributionMap { output_index: c, contributions, bias_share, logit })
}

/// Linearize the prefix ending at `layer_index` and the remaining suffix,
/// both at the same instance.
pub fn layer_context(
    net: &Network,
    x: &[f64],
    layer_index: usize,
) -> Result<LayerContext, AttributeError> {
    if layer_index >= net.layers.len() {
        return Err(AttributeError::Index {
            what: "layer index",
            index: layer_index,
            bound: net.layers.len(),
        });
    }
    let shapes = infer_shapes(net).map_err(LinearizeError::Model)?;
    let (prefix_w, prefix_b, activations) =
        linearize_layer_range(&net.layers[..=layer_index], &net.input_shape, x)?;
    let (suffix_w, suffix_b, _) = linearize_layer_range(
        &net.layers[layer_index + 1..],
        &shapes[layer_index],
        &activations,
    )?;
    Ok(LayerContext { layer_index, activations, prefix_w, prefix_b, suffix_w, suffix_b })
}

impl LayerContext {
    fn neuron(&self, x: &[f64], neuron_index: usize, final_class: usize) -> NeuronAttribution {
        let row = self.prefix_w.row(neuron_index);
        let contributions: Vec<f64> = row.iter().zip(x).map(|(w, xi)| w * xi).collect();
        let bias_share = self.prefix_b[neuron_index];
        let logit = contributions.iter().sum::<f64>() + bias_share;
        let activation_value = self.activations[neuron_index];
        NeuronAttribution {
            layer_index: self.layer_index,
            neuron_index,
            map: AttributionMap { output_index: neuron_index, contributions, bias_share, logit },
            activation_value,
            downstream_contribution: self.suffix_w.get(final_class, neuron_index)
                * activation_value,
        }
    }
}

/// Attribution for one neuron of one layer: its input map plus its
/// contribution to `final_class` through the suffix of the network.
pub fn neuron_attribution(
    net: &Network,
    x: &[f64],
    layer_index: usize,
    neuron_index: usize,
    final_class: usize,
) -> Result<NeuronAttribution, AttributeError> {
    let ctx = layer_context(net, x, layer_index)?;
    if neuron_index >= ctx.activations.len() {
        return Err(AttributeError::Index {
            what: "neuron index",
            index: neuron_index,
            bound: ctx.activations.len(),
        });
    }
    if final_class >= ctx.suffix_w.rows() {
        return Err(AttributeError::Index {
            what: "class index",
            index: final_class,
            bound: ctx.suffix_w.rows(),
        });
    }
    Ok(ctx.neuron(x, neuron_index, final_class))
}

/// Neurons of a layer ranked by downstream contribution to `final_class`.
#[derive(Debug, Clone)]
pub struct TopNeurons {
    /// Contribution ≥ 0, largest first; ties broken by smaller index.
    pub positive: Vec<NeuronAttribution>,
    /// Contribution ≤ 0, most negative first; ties broken by smaller index.
    pub negative: Vec<NeuronAttribution>,
}

pub fn top_k_neurons(
    net: &Network,
    x: &[f64],
    layer_index: usize,
    k: usize,
    final_class: usize,
) -> Result<TopNeurons, AttributeError> {
    let ctx = layer_context(net, x, layer_index)?;
    if final_class >= ctx.suffix_w.rows() {
        return Err(AttributeError::Index {
            what: "class index",
            index: final_class,
            bound: ctx.suffix_w.rows(),
        });
    }
    let contribs: Vec<f64> = (0..ctx.activations.len())
        .map(|n| ctx.suffix_w.get(final_class, n) * ctx.activations[n])
        .collect();

    let mut pos: Vec<usize> = (0..contribs.len()).filter(|&n| contribs[n] >= 0.0).collect();
    pos.sort_by(|&a, &b| {
        contribs[b].partial_cmp(&contribs[a]).unwrap().then(a.cmp(&b))
    });
    let mut neg: Vec<usize> = (0..contribs.len()).filter(|&n| contribs[n] <= 0.0).collect();
    neg.sort_by(|&a, &b| {
        contribs[a].partial_cmp(&contribs[b]).unwrap().then(a.cmp(&b))
    });

    let take = |idx: &[usize]| -> Vec<NeuronAttribution> {
        idx.iter().take(k).map(|&n| ctx.neuron(x, n, final_class)).collect()
    };
    Ok(TopNeurons { positive: take(&pos), negative: take(&neg) })
}

/// Gradient of output `c` with respect to the input. For piecewise-linear
/// networks this is row `c` of the exact `W`; otherwise the λ form is not the
/// gradient and central differences are used instead.
pub fn vanilla_gradient(net: &Network, x: &[f64], c: usize) -> Result<Vec<f64>, AttributeError> {
    if net.is_piecewise_linear() {
        let lin = linearize_instance(net, x)?;
        if c >= lin.w.rows() {
            return Err(AttributeError::Index {
                what: "output index",
                index: c,
                bound: lin.w.rows(),
            });
        }
        Ok(lin.w.row(c).to_vec())
    } else {
        let j = jacobian_fd(net, x, 1e-5)?;
        if c >= j.rows() {
            return Err(AttributeError::Index { what: "output index", index: c, bound: j.rows() });
        }
        Ok(j.row(c).to_vec())
    }
}

/// Midpoint-rule integrated gradients along the straight path from
/// `baseline` to `x`:
/// `IG[j] = (x[j]−baseline[j]) · mean_m grad_c(baseline + (m−½)/steps · (x−baseline))[j]`.
pub fn integrated_gradients(
    net: &Network,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    c: usize,
) -> Result<Vec<f64>, AttributeError> {
    if baseline.len() != x.len() {
        return Err(AttributeError::Shape {
            detail: format!("baseline length {} != input length {}", baseline.len(), x.len()),
        });
    }
    if steps == 0 {
        return Err(AttributeError::Shape { detail: "steps must be >= 1".into() });
    }
    let mut acc = vec![0.0; x.len()];
    for m in 1..=steps {
        let t = (m as f64 - 0.5) / steps as f64;
        let point: Vec<f64> =
            baseline.iter().zip(x).map(|(b, xi)| b + t * (xi - b)).collect();
        let g = vanilla_gradient(net, &point, c)?;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += gi;
        }
    }
    let inv = 1.0 / steps as f64;
    Ok(acc
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(a, (xi, bi))| (xi - bi) * a * inv)
        .collect())
}

/// Sum contributions across channels so a `[C,H,W]` map renders as `[H,W]`.
pub fn collapse_channels(values: &[f64], shape: &Shape) -> Result<Vec<f64>, AttributeError> {
    let dims = shape.dims();
    let (c, spatial) = match dims {
        [c, h, w] => (*c, h * w),
        [n] => (1, *n),
        _ => {
            return Err(AttributeError::Shape {
                detail: format!("cannot collapse shape {shape}"),
            })
        }
    };
    if values.len() != c * spatial {
        return Err(AttributeError::Shape {
            detail: format!("{} values for shape {shape}", values.len()),
        });
    }
    let mut out = vec![0.0; spatial];
    for ch in 0..c {
        for s in 0..spatial {
            out[s] += values[ch * spatial + s];
        }
    }
    Ok(out)
}

/// Binary PPM (P6) heatmap bytes: positive values fade white→red, negative
/// white→blue, scaled by the largest magnitude. An all-zero map is all white.
pub fn heatmap_bytes(values: &[f64], height: usize, width: usize) -> Result<Vec<u8>, AttributeError> {
    if values.len() != height * width {
        return Err(AttributeError::Shape {
            detail: format!("{} values for a {height}x{width} image", values.len()),
        });
    }
    let m = values.iter().map(|v| v.abs()).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(15 + 3 * values.len());
    write!(out, "P6\n{width} {height}\n255\n")?;
    for &v in values {
        if m == 0.0 || v == 0.0 {
            out.extend_from_slice(&[255, 255, 255]);
            continue;
        }
        let s = (255.0 * v.abs() / m).round() as u8;
        if v > 0.0 {
            out.extend_from_slice(&[255, 255 - s, 255 - s]);
        } else {
            out.extend_from_slice(&[255 - s, 255 - s, 255]);
        }
    }
    Ok(out)
}

/// Write a P6 heatmap to disk (temp file, then rename).
pub fn render_heatmap(
    values: &[f64],
    height: usize,
    width: usize,
    path: &Path,
) -> Result<(), AttributeError> {
    let bytes = heatmap_bytes(values, height, width)?;
    let tmp = path.with_extension("ppm.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Contribution dump: header `index,contribution`, one row per feature,
/// 17 significant digits.
pub fn contributions_csv(values: &[f64]) -> String {
    let mut out = String::from("index,contribution\n");
    for (i, v) in values.iter().enumerate() {
        out.push_str(&format!("{i},{v:.16e}\n"));
    }
    out
}

pub fn write_contributions_csv(values: &[f64], path: &Path) -> Result<(), AttributeError> {
    let tmp = path.with_extension("csv.tmp");
    std::fs::write(&tmp, contributions_csv(values))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
