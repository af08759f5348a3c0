//! Implementations behind the CLI subcommands: load inputs, call into
//! linnet-core, write outputs atomically.

use crate::AppError;
use linnet_core::attribute::{
    attribution, collapse_channels, contributions_csv, integrated_gradients, render_heatmap,
    top_k_neurons, vanilla_gradient, AttributeError,
};
use linnet_core::experiments::{decompose_eval, load_csv, load_idx, report_table, Dataset};
use linnet_core::linearize::{
    jacobian_fd, kink_margin, linearize_model, reconstruction_residual, region_probe,
};
use linnet_core::model::{load_model, save_model, ActivationKind, LayerSpec, Model, Network};
use linnet_core::tensor::{DenseMatrix, Shape};
use linnet_core::trainer::{
    init_glorot_uniform, train_classifier, train_parametric_tsne, LossKind, TrainConfig,
    TrainError,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

type Result<T> = std::result::Result<T, AppError>;

const RESIDUAL_THRESHOLD: f64 = 1e-9;
const JACOBIAN_THRESHOLD: f64 = 1e-4;
const KINK_SAFE_MARGIN: f64 = 1e-6;

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).map_err(AppError::runtime)?;
    std::fs::rename(&tmp, path).map_err(AppError::runtime)?;
    Ok(())
}

fn load_model_file(path: &Path) -> Result<Model> {
    load_model(path).map_err(AppError::runtime)
}

fn load_network_file(path: &Path) -> Result<Network> {
    match load_model_file(path)? {
        Model::Network(n) => Ok(n),
        Model::Ensemble(_) => {
            Err(AppError::usage("this command needs a plain network, not an ensemble"))
        }
    }
}

/// Instance files: plain CSV, one instance per row, features in the flat
/// input layout, no header.
fn load_instances(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(AppError::runtime)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|cell| cell.trim().parse::<f64>()).collect();
        match row {
            Ok(r) => rows.push(r),
            Err(_) => {
                return Err(AppError::runtime(format!(
                    "{}: line {}: not a numeric row",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    if rows.is_empty() {
        return Err(AppError::runtime(format!("{}: no instances", path.display())));
    }
    Ok(rows)
}

fn pick_instance(rows: &[Vec<f64>], index: usize) -> Result<Vec<f64>> {
    rows.get(index)
        .cloned()
        .ok_or_else(|| AppError::usage(format!("--index {index} out of range ({} rows)", rows.len())))
}

fn load_dataset(images: &Path, labels: &Path) -> Result<Dataset> {
    load_idx(images, labels).map_err(AppError::runtime)
}

fn map_train_err(e: TrainError) -> AppError {
    match e {
        TrainError::Invalid { detail } => AppError::Usage(detail),
        other => AppError::runtime(other),
    }
}

fn map_attr_err(e: AttributeError) -> AppError {
    match e {
        AttributeError::Index { .. } => AppError::Usage(e.to_string()),
        other => AppError::runtime(other),
    }
}

fn spatial_dims(shape: &Shape) -> (usize, usize) {
    match shape.dims() {
        [_, h, w] => (*h, *w),
        [n] => (1, *n),
        _ => (1, shape.len()),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train(
    model: &Path,
    images: &Path,
    labels: &Path,
    out: &Path,
    epochs: usize,
    lr: f64,
    batch: usize,
    seed: u64,
    log: Option<&Path>,
) -> Result<()> {
    let net = load_network_file(model)?;
    let ds = load_dataset(images, labels)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs,
        batch_size: batch,
        seed,
        loss: LossKind::CrossEntropy,
        perplexity: 15.0,
    };
    let (trained, stats) = train_classifier(net, &ds, None, &cfg).map_err(map_train_err)?;
    for s in &stats {
        eprintln!("epoch {}: loss {:.6} accuracy {:.4}", s.epoch, s.loss, s.accuracy);
    }
    save_model(&Model::Network(trained), out).map_err(AppError::runtime)?;
    if let Some(log_path) = log {
        let mut text = String::from("epoch,loss,accuracy\n");
        for s in &stats {
            let _ = writeln!(text, "{},{},{}", s.epoch, s.loss, s.accuracy);
        }
        write_atomic(log_path, text.as_bytes())?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn tsne(
    csv: &Path,
    label_column: &str,
    model_template: &Path,
    out: &Path,
    perplexity: f64,
    iters: usize,
    lr: f64,
    seed: u64,
    proj: &Path,
    attrib_dir: Option<&Path>,
    log: Option<&Path>,
) -> Result<()> {
    let ds = load_csv(csv, label_column).map_err(AppError::runtime)?;
    let net = load_network_file(model_template)?;
    let cfg = TrainConfig {
        learning_rate: lr,
        epochs: iters,
        batch_size: 1,
        seed,
        loss: LossKind::Tsne,
        perplexity,
    };
    let (trained, stats) =
        train_parametric_tsne(net, &ds.inputs, &cfg).map_err(map_train_err)?;
    if let (Some(first), Some(last)) = (stats.first(), stats.last()) {
        eprintln!("loss: {:.6} -> {:.6} over {} iterations", first.loss, last.loss, stats.len());
    }
    save_model(&Model::Network(trained.clone()), out).map_err(AppError::runtime)?;

    let mut proj_text = String::from("index,y0,y1,label\n");
    for (i, x) in ds.inputs.iter().enumerate() {
        let (y, _) = trained.forward(x).map_err(AppError::runtime)?;
        let _ = writeln!(proj_text, "{i},{},{},{}", y[0], y[1], ds.labels[i]);
    }
    write_atomic(proj, proj_text.as_bytes())?;

    if let Some(dir) = attrib_dir {
        std::fs::create_dir_all(dir).map_err(AppError::runtime)?;
        for (i, x) in ds.inputs.iter().enumerate() {
            let lin = linearize_model(&Model::Network(trained.clone()), x)
                .map_err(AppError::runtime)?;
            for dim in 0..2 {
                let map = attribution(&lin, x, dim).map_err(map_attr_err)?;
                let path = dir.join(format!("sample{i}_y{dim}.csv"));
                write_atomic(&path, contributions_csv(&map.contributions).as_bytes())?;
            }
        }
    }
    if let Some(log_path) = log {
        let mut text = String::from("iter,loss\n");
        for s in &stats {
            let _ = writeln!(text, "{},{}", s.iter, s.loss);
        }
        write_atomic(log_path, text.as_bytes())?;
    }
    Ok(())
}

pub(crate) fn linearize(model: &Path, input: &Path, index: usize, out: &Path) -> Result<()> {
    let model = load_model_file(model)?;
    let rows = load_instances(input)?;
    let x = pick_instance(&rows, index)?;
    let lin = linearize_model(&model, &x).map_err(AppError::runtime)?;
    let f = model.forward(&x).map_err(AppError::runtime)?;
    let r = lin.reconstruct(&x).map_err(AppError::runtime)?;
    let residual =
        f.iter().zip(&r).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let w_rows: Vec<Vec<f64>> = (0..lin.w.rows()).map(|i| lin.w.row(i).to_vec()).collect();
    let doc = serde_json::json!({ "W": w_rows, "b": lin.b, "residual": residual });
    write_atomic(out, serde_json::to_string(&doc).map_err(AppError::runtime)?.as_bytes())?;
    println!("residual={residual:e}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attribute(
    model_path: &Path,
    input: &Path,
    index: usize,
    class: usize,
    heatmap: Option<&Path>,
    csv: Option<&Path>,
    method: &str,
    ig_steps: usize,
    baseline: &str,
) -> Result<()> {
    if heatmap.is_none() && csv.is_none() {
        return Err(AppError::usage("nothing to write: pass --heatmap and/or --csv"));
    }
    let model = load_model_file(model_path)?;
    let rows = load_instances(input)?;
    let x = pick_instance(&rows, index)?;
    let out_dim = model.output_dim().map_err(AppError::runtime)?;
    if class >= out_dim {
        return Err(AppError::usage(format!("--class {class} out of range ({out_dim} outputs)")));
    }

    let values: Vec<f64> = match method {
        "linear" => {
            let lin = linearize_model(&model, &x).map_err(AppError::runtime)?;
            let map = attribution(&lin, &x, class).map_err(map_attr_err)?;
            let logit = model.forward(&x).map_err(AppError::runtime)?[class];
            let sum: f64 = map.contributions.iter().sum();
            println!("logit={logit} sum={sum} bias={}", map.bias_share);
            map.contributions
        }
        "vg" => {
            let net = expect_network(&model)?;
            vanilla_gradient(net, &x, class).map_err(map_attr_err)?
        }
        "ig" => {
            if ig_steps == 0 {
                return Err(AppError::usage("--ig-steps must be at least 1"));
            }
            let net = expect_network(&model)?;
            let base = parse_baseline(baseline, x.len())?;
            integrated_gradients(net, &x, &base, ig_steps, class).map_err(map_attr_err)?
        }
        other => {
            return Err(AppError::usage(format!(
                "unknown method \"{other}\" (expected linear, vg, or ig)"
            )))
        }
    };

    if let Some(path) = csv {
        write_atomic(path, contributions_csv(&values).as_bytes())?;
    }
    if let Some(path) = heatmap {
        let collapsed =
            collapse_channels(&values, model.input_shape()).map_err(map_attr_err)?;
        let (h, w) = spatial_dims(model.input_shape());
        render_heatmap(&collapsed, h, w, path).map_err(map_attr_err)?;
    }
    Ok(())
}

fn expect_network(model: &Model) -> Result<&Network> {
    match model {
        Model::Network(n) => Ok(n),
        Model::Ensemble(_) => {
            Err(AppError::usage("gradient methods need a plain network, not an ensemble"))
        }
    }
}

fn parse_baseline(baseline: &str, dim: usize) -> Result<Vec<f64>> {
    if baseline == "zeros" {
        return Ok(vec![0.0; dim]);
    }
    let rows = load_instances(Path::new(baseline))?;
    let base = rows.into_iter().next().unwrap();
    if base.len() != dim {
        return Err(AppError::usage(format!(
            "baseline has {} features, expected {dim}",
            base.len()
        )));
    }
    Ok(base)
}

pub(crate) fn neurons(
    model: &Path,
    input: &Path,
    index: usize,
    layer: usize,
    k: usize,
    class: usize,
    outdir: &Path,
) -> Result<()> {
    if k == 0 {
        return Err(AppError::usage("--k must be at least 1"));
    }
    let net = load_network_file(model)?;
    if layer >= net.layers.len() {
        return Err(AppError::usage(format!(
            "--layer {layer} out of range ({} layers)",
            net.layers.len()
        )));
    }
    let rows = load_instances(input)?;
    let x = pick_instance(&rows, index)?;
    let top = top_k_neurons(&net, &x, layer, k, class).map_err(map_attr_err)?;

    std::fs::create_dir_all(outdir).map_err(AppError::runtime)?;
    let (h, w) = spatial_dims(&net.input_shape);
    let mut tsv = String::from("sign\trank\tneuron\tactivation\tcontribution\n");
    for (sign, list) in [("pos", &top.positive), ("neg", &top.negative)] {
        for (rank, neuron) in list.iter().enumerate() {
            let collapsed = collapse_channels(&neuron.map.contributions, &net.input_shape)
                .map_err(map_attr_err)?;
            let path = outdir.join(format!("{sign}_{}_{}.ppm", rank + 1, neuron.neuron_index));
            render_heatmap(&collapsed, h, w, &path).map_err(map_attr_err)?;
            let _ = writeln!(
                tsv,
                "{sign}\t{}\t{}\t{}\t{}",
                rank + 1,
                neuron.neuron_index,
                neuron.activation_value,
                neuron.downstream_contribution
            );
        }
    }
    write_atomic(&outdir.join("neurons.tsv"), tsv.as_bytes())?;
    Ok(())
}

pub(crate) fn decompose(model_path: &Path, images: &Path, labels: &Path, out: &Path) -> Result<()> {
    let model = load_model_file(model_path)?;
    let ds = load_dataset(images, labels)?;
    let report = decompose_eval(&model, &ds).map_err(AppError::runtime)?;
    eprintln!("n={}", report.n);
    let name = model_path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy());
    write_atomic(out, report_table(&report, &name).as_bytes())?;
    Ok(())
}

pub(crate) fn region(
    model: &Path,
    input: &Path,
    index: usize,
    direction: &str,
    seed: u64,
) -> Result<()> {
    let net = load_network_file(model)?;
    let rows = load_instances(input)?;
    let x = pick_instance(&rows, index)?;

    let theta: Vec<f64> = if direction == "random" {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    } else if let Some(j) = direction.strip_prefix("coord:") {
        let j: usize = j
            .parse()
            .map_err(|_| AppError::usage(format!("bad coordinate \"{j}\" in --direction")))?;
        if j >= x.len() {
            return Err(AppError::usage(format!("coordinate {j} out of range ({})", x.len())));
        }
        let mut e = vec![0.0; x.len()];
        e[j] = 1.0;
        e
    } else {
        return Err(AppError::usage(format!(
            "bad --direction \"{direction}\" (expected random or coord:<j>)"
        )));
    };

    let probe = region_probe(&net, &x, &theta).map_err(AppError::runtime)?;
    let boundary = if probe.unbounded {
        "none".to_string()
    } else {
        probe.boundary_layer.map_or_else(|| "none".to_string(), |i| i.to_string())
    };
    println!("delta={} boundary_layer={boundary}", probe.delta);
    Ok(())
}

pub(crate) fn verify(
    model_path: &Path,
    images: &Path,
    labels: &Path,
    n: usize,
    seed: u64,
) -> Result<()> {
    if n == 0 {
        return Err(AppError::usage("--n must be at least 1"));
    }
    let model = load_model_file(model_path)?;
    let ds = load_dataset(images, labels)?;
    if ds.is_empty() {
        return Err(AppError::runtime("empty dataset"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.len())).collect();

    let mut max_residual = 0.0_f64;
    for &i in &picks {
        let x = &ds.inputs[i];
        let lin = linearize_model(&model, x).map_err(AppError::runtime)?;
        let f = model.forward(x).map_err(AppError::runtime)?;
        let r = lin.reconstruct(x).map_err(AppError::runtime)?;
        max_residual = max_residual.max(reconstruction_residual(&f, &r));
    }
    println!("max_residual={max_residual:e}");
    let mut ok = max_residual <= RESIDUAL_THRESHOLD;

    if model.is_piecewise_linear() {
        if let Model::Network(net) = &model {
            let mut max_jac = 0.0_f64;
            let mut checked = 0;
            for &i in &picks {
                let x = &ds.inputs[i];
                if kink_margin(net, x).map_err(AppError::runtime)? < KINK_SAFE_MARGIN {
                    continue;
                }
                let lin = linearize_model(&model, x).map_err(AppError::runtime)?;
                let j = jacobian_fd(net, x, 1e-5).map_err(AppError::runtime)?;
                let diff = lin
                    .w
                    .values()
                    .iter()
                    .zip(j.values())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                max_jac = max_jac.max(diff);
                checked += 1;
            }
            if checked > 0 {
                println!("max_jacobian_diff={max_jac:e}");
                ok = ok && max_jac <= JACOBIAN_THRESHOLD;
            } else {
                eprintln!("no kink-safe inputs sampled; jacobian check skipped");
            }
        } else {
            eprintln!("ensemble model: jacobian check skipped");
        }
    } else {
        eprintln!("non-piecewise-linear activations: jacobian check skipped");
    }

    if ok {
        Ok(())
    } else {
        Err(AppError::runtime("verification thresholds exceeded"))
    }
}

pub(crate) fn init(arch: &str, activation: &str, seed: u64, out: &Path) -> Result<()> {
    let dims: std::result::Result<Vec<usize>, _> =
        arch.split(['x', ',']).map(str::parse::<usize>).collect();
    let dims = dims.map_err(|_| AppError::usage(format!("bad --arch \"{arch}\"")))?;
    if dims.len() < 2 || dims.contains(&0) {
        return Err(AppError::usage("--arch needs at least two positive layer widths"));
    }
    let kind = match activation {
        "relu" => ActivationKind::Relu,
        "leaky_relu" => ActivationKind::LeakyRelu { alpha: 0.01 },
        "elu" => ActivationKind::Elu { alpha: 1.0 },
        "selu" => ActivationKind::Selu,
        "gelu" => ActivationKind::Gelu,
        other => return Err(AppError::usage(format!("unknown activation \"{other}\""))),
    };
    let mut layers = Vec::new();
    for win in dims.windows(2) {
        let (d_in, d_out) = (win[0], win[1]);
        layers.push(LayerSpec::Dense {
            weight: DenseMatrix::zeros(d_out, d_in),
            bias: Some(vec![0.0; d_out]),
        });
        layers.push(LayerSpec::Activation { kind });
    }
    layers.pop(); // no activation after the output layer
    let mut net =
        Network::new(Shape::new(vec![dims[0]]).map_err(AppError::runtime)?, layers);
    init_glorot_uniform(&mut net, seed);
    save_model(&Model::Network(net), out).map_err(AppError::runtime)?;
    Ok(())
}
