//! Acceptance suite: one test per shipping criterion, each printing a PASS
//! line with its measured numbers (run with `--nocapture` to see them).
//!
//! Criterion 4 trains a 784-300-100-10 classifier on a 10k/1k image split.
//! When `LINNET_MNIST_DIR` points at decompressed IDX files
//! (`train-images-idx3-ubyte`, `train-labels-idx1-ubyte`,
//! `t10k-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`) those are used;
//! otherwise a deterministic 28x28 dataset is synthesized from the bundled
//! 8x8 handwritten digits (bilinear upscale plus pixel shifts), keeping the
//! same split sizes and disjoint source digits for train and test.

use linnet_core::attribute::attribution;
use linnet_core::experiments::{decompose_eval, load_csv, load_idx, report_table, Dataset, DecompositionReport};
use linnet_core::linearize::{
    jacobian_fd, kink_margin, linearize_conv, linearize_ensemble, linearize_instance,
    linearize_residual, reconstruction_residual, region_probe,
};
use linnet_core::model::{
    model_from_json, model_to_json, ActivationKind, ConvKernels, Ensemble, LayerSpec, Model,
    Network,
};
use linnet_core::tensor::{DenseMatrix, Matrix, Shape};
use linnet_core::trainer::{
    assign_params, backprop, backprop_output_grad, flatten_grads, flatten_params,
    init_glorot_uniform, train_classifier, tsne_affinities, tsne_loss, tsne_output_grads,
    Gradients, LossKind, SampleLoss, TrainConfig,
};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;
use std::time::Instant;

fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).unwrap()
}

fn dense(values: Vec<f64>, rows: usize, cols: usize, bias: Option<Vec<f64>>) -> LayerSpec {
    LayerSpec::Dense { weight: DenseMatrix::from_vec(rows, cols, values).unwrap(), bias }
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

/// The layer-zoo network of criteria 1 and 2: conv with padding, batch norm,
/// activations, max pool, a residual block, flatten, dense head.
fn zoo_network(seed: u64, kind: ActivationKind) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conv = |rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize| LayerSpec::Conv2D {
        kernels: ConvKernels {
            out_channels: out_ch,
            in_channels: in_ch,
            kh: 3,
            kw: 3,
            values: rand_vec(rng, out_ch * in_ch * 9),
        },
        bias: Some(rand_vec(rng, out_ch)),
        stride: 1,
        padding: 1,
    };
    let bn = |rng: &mut ChaCha8Rng, ch: usize| LayerSpec::BatchNorm {
        gamma: (0..ch).map(|_| rng.random_range(0.5..1.5)).collect(),
        beta: rand_vec(rng, ch),
        mu: rand_vec(rng, ch),
        var: (0..ch).map(|_| rng.random_range(0.5..1.5)).collect(),
        eps: 1e-5,
    };
    let act = LayerSpec::Activation { kind };
    // pool before the activation: after a ReLU most dead units are exactly
    // zero, so pool windows tie at margin 0 and no input counts as kink-safe
    Network::new(
        shape(&[1, 8, 8]),
        vec![
            conv(&mut rng, 1, 4),
            bn(&mut rng, 4),
            LayerSpec::MaxPool2D { k: 2, stride: 2 },
            act.clone(),
            LayerSpec::Residual {
                inner: vec![conv(&mut rng, 4, 4), bn(&mut rng, 4), act.clone()],
            },
            LayerSpec::Flatten,
            dense(rand_vec(&mut rng, 10 * 64), 10, 64, Some(rand_vec(&mut rng, 10))),
        ],
    )
}

#[test]
fn criterion_01_exact_reconstruction() {
    let start = Instant::now();
    let net = zoo_network(1001, ActivationKind::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let x = rand_vec(&mut rng, 64);
        let lin = linearize_instance(&net, &x).unwrap();
        let (f, _) = net.forward(&x).unwrap();
        let r = lin.reconstruct(&x).unwrap();
        worst = worst.max(reconstruction_residual(&f, &r));
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(worst <= 1e-9, "worst relative residual {worst}");
    assert!(secs < 10.0, "took {secs:.2}s, budget 10s");
    println!("PASS criterion 1: exact reconstruction, worst residual {worst:.3e} over 100 inputs in {secs:.2}s");
}

#[test]
fn criterion_02_jacobian_oracle() {
    let net = zoo_network(1001, ActivationKind::Relu);
    let mut rng = ChaCha8Rng::seed_from_u64(2001);
    let mut checked = 0;
    let mut attempts = 0;
    let mut worst = 0.0_f64;
    while checked < 20 {
        attempts += 1;
        assert!(attempts < 10_000, "could not sample 20 kink-safe inputs");
        let x = rand_vec(&mut rng, 64);
        if kink_margin(&net, &x).unwrap() < 1e-6 {
            continue;
        }
        let lin = linearize_instance(&net, &x).unwrap();
        let j = jacobian_fd(&net, &x, 1e-5).unwrap();
        let diff = lin
            .w
            .values()
            .iter()
            .zip(j.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff);
        checked += 1;
    }
    assert!(worst <= 1e-4, "relu W vs finite-difference Jacobian: {worst}");

    // smooth activations reconstruct exactly but are not the Jacobian
    let gelu_net = zoo_network(1001, ActivationKind::Gelu);
    let mut max_gelu_diff = 0.0_f64;
    let mut worst_recon = 0.0_f64;
    for _ in 0..20 {
        let x = rand_vec(&mut rng, 64);
        let lin = linearize_instance(&gelu_net, &x).unwrap();
        let (f, _) = gelu_net.forward(&x).unwrap();
        worst_recon = worst_recon.max(reconstruction_residual(&f, &lin.reconstruct(&x).unwrap()));
        let j = jacobian_fd(&gelu_net, &x, 1e-5).unwrap();
        let diff = lin
            .w
            .values()
            .iter()
            .zip(j.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        max_gelu_diff = max_gelu_diff.max(diff);
    }
    assert!(worst_recon <= 1e-9, "gelu reconstruction residual {worst_recon}");
    assert!(max_gelu_diff > 1e-3, "gelu W should differ from the Jacobian, got {max_gelu_diff}");
    println!(
        "PASS criterion 2: relu |W - J| <= {worst:.3e}; gelu reconstructs ({worst_recon:.3e}) while |W - J| reaches {max_gelu_diff:.3e}"
    );
}

/// Direct single-layer forward through the public API.
fn layer_forward(layer: LayerSpec, in_shape: &Shape, x: &[f64]) -> Vec<f64> {
    let net = Network::new(in_shape.clone(), vec![layer]);
    net.forward(x).unwrap().0
}

fn assert_factor_matches(
    w: &Matrix,
    b: &[f64],
    x: &[f64],
    direct: &[f64],
    what: &str,
) -> f64 {
    let mut y = w.matvec(x).unwrap();
    for (yi, bi) in y.iter_mut().zip(b) {
        *yi += bi;
    }
    let diff = y.iter().zip(direct).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-12, "{what}: factor vs direct forward differ by {diff}");
    diff
}

#[test]
fn criterion_03_layer_rewrite_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(3001);
    let mut worst = 0.0_f64;

    for case in 0..50 {
        // convolution
        let in_ch = rng.random_range(1..=3);
        let out_ch = rng.random_range(1..=3);
        let k = rng.random_range(1..=3);
        let stride = rng.random_range(1..=2);
        let padding = rng.random_range(0..=1);
        let h = rng.random_range(k.max(3)..=7);
        let w = rng.random_range(k.max(3)..=7);
        let in_shape = shape(&[in_ch, h, w]);
        let kernels = ConvKernels {
            out_channels: out_ch,
            in_channels: in_ch,
            kh: k,
            kw: k,
            values: rand_vec(&mut rng, out_ch * in_ch * k * k),
        };
        let bias = rand_vec(&mut rng, out_ch);
        let x = rand_vec(&mut rng, in_shape.len());
        let factor = linearize_conv(&kernels, Some(&bias), stride, padding, &in_shape).unwrap();
        let direct = layer_forward(
            LayerSpec::Conv2D { kernels, bias: Some(bias.clone()), stride, padding },
            &in_shape,
            &x,
        );
        worst = worst.max(assert_factor_matches(&factor.w, &factor.b, &x, &direct, "conv"));

        // max pool: factor built from the instance's own trace
        let pk = rng.random_range(1..=3);
        let ps = rng.random_range(1..=3);
        let c = rng.random_range(1..=3);
        let h = rng.random_range(pk..=pk + 4);
        let w = rng.random_range(pk..=pk + 4);
        let in_shape = shape(&[c, h, w]);
        let x = rand_vec(&mut rng, in_shape.len());
        let pool_net =
            Network::new(in_shape.clone(), vec![LayerSpec::MaxPool2D { k: pk, stride: ps }]);
        let (direct, trace) = pool_net.forward(&x).unwrap();
        let linnet_core::model::TraceRecord::MaxPool { selected } = &trace.records[0] else {
            panic!("missing pool trace");
        };
        let factor =
            linnet_core::linearize::linearize_maxpool(pk, ps, &in_shape, selected).unwrap();
        worst = worst.max(assert_factor_matches(&factor.w, &factor.b, &x, &direct, "maxpool"));

        // average pool
        let factor = linnet_core::linearize::linearize_avgpool(pk, ps, &in_shape).unwrap();
        let direct = layer_forward(LayerSpec::AvgPool2D { k: pk, stride: ps }, &in_shape, &x);
        worst = worst.max(assert_factor_matches(&factor.w, &factor.b, &x, &direct, "avgpool"));

        // batch norm fold
        let ch = rng.random_range(1..=4);
        let spatial = rng.random_range(1..=4);
        let in_shape = if case % 2 == 0 { shape(&[ch, spatial, spatial]) } else { shape(&[ch]) };
        let gamma: Vec<f64> = (0..ch).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta = rand_vec(&mut rng, ch);
        let mu = rand_vec(&mut rng, ch);
        let var: Vec<f64> = (0..ch).map(|_| rng.random_range(0.5..1.5)).collect();
        let x = rand_vec(&mut rng, in_shape.len());
        let factor =
            linnet_core::linearize::linearize_batchnorm(&gamma, &beta, &mu, &var, 1e-5, &in_shape)
                .unwrap();
        let direct = layer_forward(
            LayerSpec::BatchNorm { gamma, beta, mu, var, eps: 1e-5 },
            &in_shape,
            &x,
        );
        worst = worst.max(assert_factor_matches(&factor.w, &factor.b, &x, &direct, "batchnorm"));

        // residual merge with a relu inside
        let n = rng.random_range(2..=6);
        let in_shape = shape(&[n]);
        let inner = vec![
            dense(rand_vec(&mut rng, n * n), n, n, Some(rand_vec(&mut rng, n))),
            LayerSpec::Activation { kind: ActivationKind::Relu },
        ];
        let x = rand_vec(&mut rng, n);
        let (factor, _) = linearize_residual(&inner, &in_shape, &x).unwrap();
        let direct = layer_forward(LayerSpec::Residual { inner }, &in_shape, &x);
        worst = worst.max(assert_factor_matches(&factor.w, &factor.b, &x, &direct, "residual"));
    }

    // the exact figure structures: 2x2 kernel, stride 2, 4x4 input
    let kernels = ConvKernels {
        out_channels: 1,
        in_channels: 1,
        kh: 2,
        kw: 2,
        values: vec![1.0, 2.0, 3.0, 4.0],
    };
    let factor = linearize_conv(&kernels, None, 2, 0, &shape(&[1, 4, 4])).unwrap();
    let Matrix::Sparse(w) = &factor.w else { panic!() };
    assert_eq!((w.rows(), w.cols()), (4, 16), "figure conv matrix must be 4x16");
    let cols: Vec<usize> = w.row_entries(0).map(|(c, _)| c).collect();
    assert_eq!(cols, vec![0, 1, 4, 5], "figure conv row 0 columns");

    let pool_net = Network::new(shape(&[1, 4, 4]), vec![LayerSpec::MaxPool2D { k: 2, stride: 2 }]);
    let x: Vec<f64> = (0..16).map(|i| ((i * 7 + 3) % 16) as f64).collect();
    let (_, trace) = pool_net.forward(&x).unwrap();
    let linnet_core::model::TraceRecord::MaxPool { selected } = &trace.records[0] else {
        panic!()
    };
    let factor =
        linnet_core::linearize::linearize_maxpool(2, 2, &shape(&[1, 4, 4]), selected).unwrap();
    let Matrix::Sparse(w) = &factor.w else { panic!() };
    assert_eq!((w.rows(), w.cols()), (4, 16), "figure pool matrix must be 4x16");
    for r in 0..4 {
        let entries: Vec<(usize, f64)> = w.row_entries(r).collect();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0], (selected[r], 1.0));
    }

    println!("PASS criterion 3: layer rewrites match direct forwards within {worst:.3e} (tolerance 1e-12) over 50 random configurations each");
}

// ---------------------------------------------------------------------------
// Criterion 4/5/6 shared fixture: the trained 784-300-100-10 classifier.

struct TrainedFixture {
    net: Network,
    test: Dataset,
    report: DecompositionReport,
    source: &'static str,
    train_secs: f64,
    eval_secs: f64,
}

fn bilinear_upscale(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn shift_image(src: &[f64], h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        let sy = y - dy;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..w as isize {
            let sx = x - dx;
            if sx < 0 || sx >= w as isize {
                continue;
            }
            out[(y * w as isize + x) as usize] = src[(sy * w as isize + sx) as usize];
        }
    }
    out
}

/// Deterministic 28x28 digit dataset built from the bundled 8x8 digits:
/// bilinear upscale then a random shift of up to two pixels.
fn synthesize_digits(base: &Dataset, pool: std::ops::Range<usize>, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let idx = rng.random_range(pool.clone());
        let up = bilinear_upscale(&base.inputs[idx], 8, 8, 28, 28);
        let dy = rng.random_range(-2_i32..=2) as isize;
        let dx = rng.random_range(-2_i32..=2) as isize;
        inputs.push(shift_image(&up, 28, 28, dy, dx));
        labels.push(base.labels[idx]);
    }
    Dataset { inputs, labels, input_shape: shape(&[1, 28, 28]), num_classes: 10 }
}

fn mnist_style_split() -> (Dataset, Dataset, &'static str) {
    if let Ok(dir) = std::env::var("LINNET_MNIST_DIR") {
        let dir = Path::new(&dir);
        let train = load_idx(
            &dir.join("train-images-idx3-ubyte"),
            &dir.join("train-labels-idx1-ubyte"),
        )
        .expect("LINNET_MNIST_DIR set but train files unreadable");
        let test = load_idx(
            &dir.join("t10k-images-idx3-ubyte"),
            &dir.join("t10k-labels-idx1-ubyte"),
        )
        .expect("LINNET_MNIST_DIR set but test files unreadable");
        return (train.slice(0, 10_000), test.slice(0, 1_000), "mnist");
    }
    let base = load_idx(
        &data_dir().join("digits-images-idx3-ubyte"),
        &data_dir().join("digits-labels-idx1-ubyte"),
    )
    .expect("bundled digits data missing");
    // disjoint source digits for the two splits
    let train = synthesize_digits(&base, 0..1500, 10_000, 4001);
    let test = synthesize_digits(&base, 1500..base.len(), 1_000, 4002);
    (train, test, "synthetic-digits")
}

fn lenet300_style() -> Network {
    let mut net = Network::new(
        shape(&[1, 28, 28]),
        vec![
            LayerSpec::Flatten,
            dense(vec![0.0; 300 * 784], 300, 784, Some(vec![0.0; 300])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 100 * 300], 100, 300, Some(vec![0.0; 100])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 10 * 100], 10, 100, Some(vec![0.0; 10])),
        ],
    );
    init_glorot_uniform(&mut net, 4003);
    net
}

static FIXTURE: LazyLock<TrainedFixture> = LazyLock::new(|| {
    let (train, test, source) = mnist_style_split();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 4,
        batch_size: 32,
        seed: 4004,
        loss: LossKind::CrossEntropy,
        perplexity: 15.0,
    };
    let start = Instant::now();
    let (net, log) = train_classifier(lenet300_style(), &train, Some(&test), &cfg).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    for s in &log {
        eprintln!("[fixture] epoch {}: loss {:.4} test accuracy {:.4}", s.epoch, s.loss, s.accuracy);
    }
    let start = Instant::now();
    let report = decompose_eval(&Model::Network(net.clone()), &test).unwrap();
    let eval_secs = start.elapsed().as_secs_f64();
    TrainedFixture { net, test, report, source, train_secs, eval_secs }
});

#[test]
fn criterion_04_decomposition_study() {
    let f = &*FIXTURE;
    let r = &f.report;
    let secs = f.train_secs + f.eval_secs;
    eprintln!("[criterion 4] source={} report:\n{}", f.source, report_table(r, "lenet300-style"));
    assert!(r.acc_full >= 0.90, "full accuracy {:.4} below 0.90", r.acc_full);
    assert!(r.lfr_wx <= 0.05, "lfr of W·x {:.4} above 0.05", r.lfr_wx);
    assert!(
        r.acc_wx >= r.acc_full - 0.03,
        "W·x accuracy {:.4} more than 0.03 below full {:.4}",
        r.acc_wx,
        r.acc_full
    );
    assert!(r.acc_b <= 0.3, "bias-only accuracy {:.4} above 0.3", r.acc_b);
    assert!(secs < 600.0, "train+eval took {secs:.0}s, budget 600s");
    println!(
        "PASS criterion 4 ({}): acc_full {:.4}, acc_wx {:.4}, lfr_wx {:.4}, acc_b {:.4}, n {} in {secs:.0}s",
        f.source, r.acc_full, r.acc_wx, r.lfr_wx, r.acc_b, r.n
    );
}

#[test]
fn criterion_05_attribution_completeness() {
    let f = &*FIXTURE;
    let mut worst = 0.0_f64;
    for x in f.test.inputs.iter().take(100) {
        let lin = linearize_instance(&f.net, x).unwrap();
        let (logits, _) = f.net.forward(x).unwrap();
        for (c, &logit) in logits.iter().enumerate() {
            let map = attribution(&lin, x, c).unwrap();
            let total = map.contributions.iter().sum::<f64>() + map.bias_share;
            worst = worst.max((total - logit).abs());
        }
    }
    assert!(worst <= 1e-9, "completeness gap {worst}");
    println!("PASS criterion 5: attribution completeness gap {worst:.3e} over 100 instances x 10 classes");
}

#[test]
fn criterion_06_region_probe() {
    // analytic single-gate case
    let gate = Network::new(
        shape(&[1]),
        vec![dense(vec![1.0], 1, 1, None), LayerSpec::Activation { kind: ActivationKind::Relu }],
    );
    let probe = region_probe(&gate, &[2.0], &[-1.0]).unwrap();
    assert!((probe.delta - 2.0).abs() <= 1e-6, "analytic delta {}", probe.delta);

    // random probes on the trained classifier: the x-linearization explains
    // the whole segment up to the boundary
    let f = &*FIXTURE;
    let mut rng = ChaCha8Rng::seed_from_u64(6001);
    let mut worst = 0.0_f64;
    for probe_idx in 0..20 {
        let x = &f.test.inputs[probe_idx * 7 % f.test.len()];
        let theta: Vec<f64> = (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let probe = region_probe(&f.net, x, &theta).unwrap();
        let lin = linearize_instance(&f.net, x).unwrap();
        let t = 0.999 * probe.delta;
        let shifted: Vec<f64> =
            x.iter().zip(&probe.direction).map(|(xi, di)| xi + t * di).collect();
        let (fwd, _) = f.net.forward(&shifted).unwrap();
        let rec = lin.reconstruct(&shifted).unwrap();
        worst = worst.max(reconstruction_residual(&fwd, &rec));
    }
    assert!(worst <= 1e-9, "in-region reconstruction residual {worst}");
    println!("PASS criterion 6: analytic delta 2.0 recovered; 20 in-region reconstructions within {worst:.3e}");
}

#[test]
fn criterion_07_ensemble() {
    let mut rng = ChaCha8Rng::seed_from_u64(7001);
    let mut worst_recon = 0.0_f64;
    let mut worst_sum = 0.0_f64;
    for trial in 0..5 {
        let member = |rng: &mut ChaCha8Rng| {
            Network::new(
                shape(&[6]),
                vec![
                    dense(rand_vec(rng, 8 * 6), 8, 6, Some(rand_vec(rng, 8))),
                    LayerSpec::Activation { kind: ActivationKind::Relu },
                    dense(rand_vec(rng, 3 * 8), 3, 8, Some(rand_vec(rng, 3))),
                ],
            )
        };
        let members = vec![member(&mut rng), member(&mut rng)];
        let shares = vec![rng.random_range(-1.0..1.5), rng.random_range(-1.0..1.5)];
        let ens = Ensemble { members: members.clone(), shares: shares.clone() };
        let _ = trial;
        for _ in 0..20 {
            let x = rand_vec(&mut rng, 6);
            let lin = linearize_ensemble(&ens, &x).unwrap();
            let fwd = ens.forward(&x).unwrap();
            let rec = lin.reconstruct(&x).unwrap();
            worst_recon = worst_recon.max(reconstruction_residual(&fwd, &rec));

            // W_ens equals the share-weighted sum of member linearizations
            let lin_a = linearize_instance(&members[0], &x).unwrap();
            let lin_b = linearize_instance(&members[1], &x).unwrap();
            for ((e, a), b) in
                lin.w.values().iter().zip(lin_a.w.values()).zip(lin_b.w.values())
            {
                worst_sum = worst_sum.max((e - (shares[0] * a + shares[1] * b)).abs());
            }
        }
    }
    assert!(worst_recon <= 1e-9, "ensemble reconstruction {worst_recon}");
    assert!(worst_sum <= 1e-12, "ensemble W vs share-weighted member sum {worst_sum}");
    println!("PASS criterion 7: ensemble reconstruction within {worst_recon:.3e}, share-sum identity within {worst_sum:.3e}");
}

#[test]
fn criterion_08_parametric_tsne() {
    let start = Instant::now();
    let iris = load_csv(&data_dir().join("iris.csv"), "species").unwrap();
    assert_eq!(iris.len(), 150);

    // affinities reach the target perplexity, re-derived independently from
    // the returned bandwidths
    let perplexity = 15.0;
    let aff = tsne_affinities(&iris.inputs, perplexity).unwrap();
    let mut worst_perp = 0.0_f64;
    for i in 0..iris.len() {
        let beta = 0.5 / (aff.sigmas[i] * aff.sigmas[i]);
        let mut weights = vec![0.0; iris.len()];
        let mut sum = 0.0;
        for j in 0..iris.len() {
            if j == i {
                continue;
            }
            let d2: f64 = iris.inputs[i]
                .iter()
                .zip(&iris.inputs[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            weights[j] = (-d2 * beta).exp();
            sum += weights[j];
        }
        let mut entropy_bits = 0.0;
        for (j, w) in weights.iter().enumerate() {
            if j != i && *w > 0.0 {
                let p = w / sum;
                entropy_bits -= p * p.log2();
            }
        }
        worst_perp = worst_perp.max((entropy_bits.exp2() - perplexity).abs());
    }
    assert!(worst_perp <= 1e-4, "achieved perplexity off by {worst_perp}");

    // loss gradient vs finite differences on five points
    let mut rng = ChaCha8Rng::seed_from_u64(8001);
    let toy: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 3)).collect();
    let mut toy_net = Network::new(
        shape(&[3]),
        vec![
            dense(vec![0.0; 12], 4, 3, Some(vec![0.0; 4])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 8], 2, 4, Some(vec![0.0; 2])),
        ],
    );
    init_glorot_uniform(&mut toy_net, 8002);
    let toy_aff = tsne_affinities(&toy, 3.0).unwrap();
    let embeddings: Vec<Vec<f64>> = toy.iter().map(|x| toy_net.forward(x).unwrap().0).collect();
    let out_grads = tsne_output_grads(&toy_aff, &embeddings).unwrap();
    let mut grads = Gradients::zeros_like(&toy_net);
    for (x, g) in toy.iter().zip(&out_grads) {
        backprop_output_grad(&toy_net, x, g, &mut grads).unwrap();
    }
    let analytic = flatten_grads(&grads);
    let params = flatten_params(&toy_net);
    let loss_at = |p: &[f64]| {
        let mut probe = toy_net.clone();
        assign_params(&mut probe, p).unwrap();
        let e: Vec<Vec<f64>> = toy.iter().map(|x| probe.forward(x).unwrap().0).collect();
        tsne_loss(&toy_aff, &e).unwrap()
    };
    let h = 1e-6;
    let mut worst_grad = 0.0_f64;
    for (i, a) in analytic.iter().enumerate() {
        let mut plus = params.clone();
        plus[i] += h;
        let mut minus = params.clone();
        minus[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let rel = (a - numeric).abs() / numeric.abs().max(1e-4);
        worst_grad = worst_grad.max(rel);
    }
    assert!(worst_grad <= 1e-5, "t-SNE gradient vs finite differences: {worst_grad}");

    // 500 iterations on iris descend, and each projection is an exact 2x4 map
    let mut proj_net = Network::new(
        shape(&[4]),
        vec![
            dense(vec![0.0; 128], 32, 4, Some(vec![0.0; 32])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 32 * 32], 32, 32, Some(vec![0.0; 32])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 64], 2, 32, Some(vec![0.0; 2])),
        ],
    );
    init_glorot_uniform(&mut proj_net, 8003);
    let cfg = TrainConfig {
        learning_rate: 0.2,
        epochs: 500,
        batch_size: 1,
        seed: 8004,
        loss: LossKind::Tsne,
        perplexity,
    };
    let (trained, log) =
        linnet_core::trainer::train_parametric_tsne(proj_net, &iris.inputs, &cfg).unwrap();
    assert!(
        log.last().unwrap().loss < log[0].loss,
        "loss did not fall: {} -> {}",
        log[0].loss,
        log.last().unwrap().loss
    );
    let mut worst_recon = 0.0_f64;
    for x in iris.inputs.iter().take(25) {
        let lin = linearize_instance(&trained, x).unwrap();
        assert_eq!((lin.w.rows(), lin.w.cols()), (2, 4));
        let (fwd, _) = trained.forward(x).unwrap();
        worst_recon = worst_recon.max(reconstruction_residual(&fwd, &lin.reconstruct(x).unwrap()));
    }
    assert!(worst_recon <= 1e-9, "projection reconstruction {worst_recon}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 300.0, "took {secs:.0}s, budget 300s");
    println!(
        "PASS criterion 8: perplexity within {worst_perp:.2e}, gradient within {worst_grad:.2e}, loss {:.4} -> {:.4}, projection residual {worst_recon:.3e} in {secs:.0}s",
        log[0].loss,
        log.last().unwrap().loss
    );
}

/// Central-difference oracle over all trainable parameters.
fn fd_gradient(net: &Network, x: &[f64], loss: &SampleLoss, h: f64) -> Vec<f64> {
    let params = flatten_params(net);
    let loss_at = |p: &[f64]| -> f64 {
        let mut probe = net.clone();
        assign_params(&mut probe, p).unwrap();
        let (y, _) = probe.forward(x).unwrap();
        match loss {
            SampleLoss::SquaredError(t) => {
                y.iter().zip(t).map(|(yi, ti)| (yi - ti) * (yi - ti)).sum()
            }
            SampleLoss::CrossEntropy(c) => {
                let m = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let logsum = y.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
                logsum - y[*c]
            }
        }
    };
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let mut plus = params.clone();
        plus[i] += h;
        let mut minus = params.clone();
        minus[i] -= h;
        grad[i] = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
    }
    grad
}

#[test]
fn criterion_09_gradient_suite() {
    let mut worst = 0.0_f64;
    for seed in [9001_u64, 9002, 9003] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Network::new(
            shape(&[1, 4, 4]),
            vec![
                LayerSpec::Conv2D {
                    kernels: ConvKernels {
                        out_channels: 2,
                        in_channels: 1,
                        kh: 2,
                        kw: 2,
                        values: rand_vec(&mut rng, 8),
                    },
                    bias: Some(rand_vec(&mut rng, 2)),
                    stride: 1,
                    padding: 1,
                },
                LayerSpec::BatchNorm {
                    gamma: (0..2).map(|_| rng.random_range(0.5..1.5)).collect(),
                    beta: rand_vec(&mut rng, 2),
                    mu: rand_vec(&mut rng, 2),
                    var: (0..2).map(|_| rng.random_range(0.5..1.5)).collect(),
                    eps: 1e-5,
                },
                LayerSpec::Activation { kind: ActivationKind::Relu },
                LayerSpec::MaxPool2D { k: 2, stride: 2 },
                LayerSpec::Residual {
                    inner: vec![LayerSpec::Conv2D {
                        kernels: ConvKernels {
                            out_channels: 2,
                            in_channels: 2,
                            kh: 1,
                            kw: 1,
                            values: rand_vec(&mut rng, 4),
                        },
                        bias: None,
                        stride: 1,
                        padding: 0,
                    }],
                },
                LayerSpec::Flatten,
                dense(rand_vec(&mut rng, 3 * 8), 3, 8, Some(rand_vec(&mut rng, 3))),
            ],
        );
        let x = rand_vec(&mut rng, 16);
        for loss in [
            SampleLoss::CrossEntropy(seed as usize % 3),
            SampleLoss::SquaredError(rand_vec(&mut rng, 3)),
        ] {
            let (grads, _) = backprop(&net, &x, &loss).unwrap();
            let analytic = flatten_grads(&grads);
            let numeric = fd_gradient(&net, &x, &loss, 1e-6);
            for (a, n) in analytic.iter().zip(&numeric) {
                let rel = (a - n).abs() / n.abs().max(1e-4);
                worst = worst.max(rel);
            }
        }
    }
    assert!(worst <= 1e-5, "worst relative gradient error {worst}");
    println!("PASS criterion 9: all layer gradients match central differences within {worst:.3e}");
}

#[test]
fn criterion_10_format_contracts() {
    // model JSON round-trips bit-exactly, including non-terminating decimals
    let mut rng = ChaCha8Rng::seed_from_u64(10_001);
    let mut values = vec![1.0 / 3.0, std::f64::consts::PI, -0.1, 1e-300];
    values.extend(rand_vec(&mut rng, 4));
    let model = Model::Network(Network::new(
        shape(&[4]),
        vec![
            dense(values, 2, 4, Some(vec![0.1 + 0.2, -1.0 / 7.0])),
            LayerSpec::Activation { kind: ActivationKind::Gelu },
        ],
    ));
    let json = model_to_json(&model).unwrap();
    let back = model_from_json(&json).unwrap();
    assert_eq!(model, back, "round trip must preserve every weight bit");
    assert_eq!(json, model_to_json(&back).unwrap(), "second serialization must be byte-identical");

    // IDX loader rejects a wrong magic number
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad-images");
    let labels = dir.path().join("labels");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes()); // label magic in image file
    bytes.extend_from_slice(&1u32.to_be_bytes());
    bytes.extend_from_slice(&[0u8; 8]);
    std::fs::write(&bad, &bytes).unwrap();
    let mut lbl = Vec::new();
    lbl.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lbl.extend_from_slice(&1u32.to_be_bytes());
    lbl.push(0);
    std::fs::write(&labels, &lbl).unwrap();
    let err = load_idx(&bad, &labels).unwrap_err();
    assert!(err.to_string().contains("wrong magic"), "{err}");

    // PPM output begins with the P6 magic
    let ppm = linnet_core::attribute::heatmap_bytes(&[0.5, -0.5, 0.0, 1.0], 2, 2).unwrap();
    assert!(ppm.starts_with(b"P6\n"));

    // decompose TSV header is the exact contract
    let report = DecompositionReport {
        acc_full: 0.5,
        acc_wx: 0.5,
        acc_b: 0.5,
        lfr_wx: 0.0,
        lfr_b: 0.0,
        n: 2,
    };
    assert!(report_table(&report, "m")
        .starts_with("model\tacc_wx\tlfr_wx\tacc_b\tlfr_b\tacc_full\n"));

    // same-seed training is bit-identical, including the serialized file
    let mut rng = ChaCha8Rng::seed_from_u64(10_002);
    let inputs: Vec<Vec<f64>> = (0..24).map(|_| rand_vec(&mut rng, 4)).collect();
    let labels: Vec<usize> = (0..24).map(|i| i % 2).collect();
    let ds = Dataset { inputs, labels, input_shape: shape(&[4]), num_classes: 2 };
    let mut net = Network::new(
        shape(&[4]),
        vec![
            dense(vec![0.0; 16], 4, 4, Some(vec![0.0; 4])),
            LayerSpec::Activation { kind: ActivationKind::Relu },
            dense(vec![0.0; 8], 2, 4, Some(vec![0.0; 2])),
        ],
    );
    init_glorot_uniform(&mut net, 10_003);
    let cfg = TrainConfig {
        learning_rate: 0.05,
        epochs: 4,
        batch_size: 6,
        seed: 10_004,
        loss: LossKind::CrossEntropy,
        perplexity: 15.0,
    };
    let (a, _) = train_classifier(net.clone(), &ds, None, &cfg).unwrap();
    let (b, _) = train_classifier(net, &ds, None, &cfg).unwrap();
    assert_eq!(
        model_to_json(&Model::Network(a)).unwrap(),
        model_to_json(&Model::Network(b)).unwrap(),
        "same seed must give a byte-identical trained model"
    );

    println!("PASS criterion 10: model round-trip, IDX magic, PPM magic, TSV header, and seed determinism all hold");
}
