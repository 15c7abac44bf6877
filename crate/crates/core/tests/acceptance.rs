//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! to stdout (bypassing capture) and then asserts the same condition.
//!
//! Oracles here are written independently of the library: plain nested
//! loops over flat buffers.

use std::io::Write;
use std::time::{Duration, Instant};

use convshare_core::attention::{transport_weights, HeadGeometry};
use convshare_core::model::PositionalKind;
use convshare_core::optics::{channel_tiling, kernel_tiling, mixed_tiling, DeviceSpec};
use convshare_core::plan::{format_latency, plan_inferences};
use convshare_core::simulate::{compare_paths, SimulationMode};
use convshare_core::training::{
    gradient_check, metrics_csv, randomize_parameters, toy_model_config, train, DatasetKind, TrainConfig,
};
use convshare_core::{Checkpoint, ConvShareViT, ModelConfig, PaddingMode, Precision, SharedGroupedConv, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, passed: bool, detail: String, elapsed: Duration) {
    let verdict = if passed { "PASS" } else { "FAIL" };
    writeln!(std::io::stdout(), "{verdict} {name}: {detail} [{:.1}s]", elapsed.as_secs_f64()).unwrap();
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), uniform(rng, shape.iter().product())).unwrap()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// `max |a - b| / max |b|`.
fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    d / max_abs(b).max(f64::MIN_POSITIVE)
}

/// `y[r, c] = sum_k a[r, k] * b[k, c]`.
fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        for k in 0..inner {
            for c in 0..cols {
                y[r * cols + c] += a[r * inner + k] * b[k * cols + c];
            }
        }
    }
    y
}

#[test]
fn shared_convolution_equals_flattened_matmul() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let cases = 120;
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let g = [1, 2, 4][rng.random_range(0..3)];
        let t = g * rng.random_range(1..=16 / g);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let m = rng.random_range(1..=10);
        let with_bias = rng.random_bool(0.5);
        let kernels = tensor(&mut rng, &[m, g, h, w]);
        let bias = with_bias.then(|| tensor(&mut rng, &[m]));
        let x = tensor(&mut rng, &[t, h, w]);

        // Row j of X is the flattened group j; column m of W is kernel m.
        let flat = g * h * w;
        let weights: Vec<f64> = (0..flat * m)
            .map(|i| kernels.data()[(i % m) * flat + i / m])
            .collect();
        let mut want = matmul(x.data(), &weights, t / g, flat, m);
        if let Some(b) = &bias {
            for (i, v) in want.iter_mut().enumerate() {
                *v += b.data()[i % m];
            }
        }

        let layer = SharedGroupedConv::new(kernels, g, bias, PaddingMode::Valid).unwrap();
        let got = layer.forward_raw(&x).unwrap();
        assert_eq!(got.shape(), &[t / g * m, 1, 1]);
        let err = got.data().iter().zip(&want).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
        worst = worst.max(err);
    }
    let passed = worst < 1e-12 && start.elapsed() < Duration::from_secs(10);
    report(
        "linear emulation",
        passed,
        format!("{cases} configurations, max abs error {worst:.2e} (< 1e-12)"),
        start.elapsed(),
    );
    assert!(passed);
}

/// Head `k` of a `[H, W]` token is sub-patch `(k / grid, k % grid)`;
/// its features are listed row-major and heads are concatenated.
fn head_major(x: &[f64], t: usize, side: usize, grid: usize) -> Vec<f64> {
    let hs = side / grid;
    let d = side * side;
    let mut out = Vec::with_capacity(t * d);
    for tok in 0..t {
        for k in 0..grid * grid {
            for a in 0..hs {
                for b in 0..hs {
                    let (r, c) = ((k / grid) * hs + a, (k % grid) * hs + b);
                    out.push(x[tok * d + r * side + c]);
                }
            }
        }
    }
    out
}

/// Dense multi-head self-attention on rows of `x: [t, d]`.
fn dense_mhsa(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], t: usize, d: usize, heads: usize) -> Vec<f64> {
    let dh = d / heads;
    let (q, k, v) = (matmul(x, wq, t, d, d), matmul(x, wk, t, d, d), matmul(x, wv, t, d, d));
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..t {
            let logits: Vec<f64> = (0..t)
                .map(|j| cols.clone().map(|c| q[i * d + c] * k[j * d + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|s| (s - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for c in cols.clone() {
                    out[i * d + c] += e[j] / z * v[j * d + c];
                }
            }
        }
    }
    out
}

#[test]
fn convolutional_attention_equals_dense_attention() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let per_heads = 20;
    let mut summary = Vec::new();
    let mut passed = true;
    for heads in [1usize, 4, 16] {
        let grid = (heads as f64).sqrt() as usize;
        let mut worst = 0.0f64;
        for _ in 0..per_heads {
            let side = grid * rng.random_range(1..=(8 / grid).max(1));
            let t = rng.random_range(1..=16);
            let (d, dh) = (side * side, side * side / heads);
            // One shared block per projection, repeated down the diagonal.
            let mut weight = |rng: &mut ChaCha8Rng| {
                let block = uniform(rng, dh * dh);
                let mut w = vec![0.0; d * d];
                for h in 0..heads {
                    for r in 0..dh {
                        for c in 0..dh {
                            w[(h * dh + r) * d + h * dh + c] = block[r * dh + c];
                        }
                    }
                }
                w
            };
            let (wq, wk, wv) = (weight(&mut rng), weight(&mut rng), weight(&mut rng));
            let x = tensor(&mut rng, &[t, side, side]);

            let as_tensor = |w: &[f64]| Tensor::new(vec![d, d], w.to_vec()).unwrap();
            let geom = HeadGeometry::new(heads, side, side).unwrap();
            let layer = transport_weights(&as_tensor(&wq), &as_tensor(&wk), &as_tensor(&wv), geom).unwrap();
            let got = head_major(layer.forward(&x).unwrap().data(), t, side, grid);
            let want = dense_mhsa(&head_major(x.data(), t, side, grid), &wq, &wk, &wv, t, d, heads);
            worst = worst.max(rel_error(&got, &want));
        }
        passed &= worst < 1e-10;
        summary.push(format!("{heads} head(s) {worst:.2e}"));
    }
    passed &= start.elapsed() < Duration::from_secs(30);
    report(
        "attention equivalence",
        passed,
        format!("{per_heads} instances per head count, max rel error {} (< 1e-10)", summary.join(", ")),
        start.elapsed(),
    );
    assert!(passed);
}

/// Valid cross-correlation of `x: [m, m]` with `k: [n, n]`.
fn correlate(x: &[f64], m: usize, k: &[f64], n: usize) -> Vec<f64> {
    let o = m - n + 1;
    let mut y = vec![0.0; o * o];
    for p in 0..o {
        for q in 0..o {
            for a in 0..n {
                for b in 0..n {
                    y[p * o + q] += x[(p + a) * m + q + b] * k[a * n + b];
                }
            }
        }
    }
    y
}

fn extents(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let m = rng.random_range(1..=16);
    (m, rng.random_range(1..=m))
}

#[test]
fn optical_tilings_equal_direct_convolution() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let per_scheme = 50;
    let (mut kernel_err, mut channel_err, mut mixed_err) = (0.0f64, 0.0f64, 0.0f64);

    for _ in 0..per_scheme {
        let (m, n) = extents(&mut rng);
        let count = rng.random_range(1..=10);
        let device = DeviceSpec::new((m + n - 1) * rng.random_range(1..=4), 1.0).unwrap();
        let x = tensor(&mut rng, &[m, m]);
        let kernels: Vec<Tensor> = (0..count).map(|_| tensor(&mut rng, &[n, n])).collect();
        let (outs, _) = kernel_tiling(&x, &kernels, &device).unwrap();
        assert_eq!(outs.len(), count);
        for (k, o) in kernels.iter().zip(&outs) {
            kernel_err = kernel_err.max(rel_error(o.data(), &correlate(x.data(), m, k.data(), n)));
        }
    }

    for _ in 0..per_scheme {
        let (m, n) = extents(&mut rng);
        let s = rng.random_range(1..=3);
        let device = DeviceSpec::new((m + n - 1) * (s + rng.random_range(0..2)), 1.0).unwrap();
        let xs: Vec<Tensor> = (0..s * s).map(|_| tensor(&mut rng, &[m, m])).collect();
        let ks: Vec<Tensor> = (0..s * s).map(|_| tensor(&mut rng, &[n, n])).collect();
        let (out, _) = channel_tiling(&xs, &ks, &device).unwrap();
        let o = m - n + 1;
        let mut want = vec![0.0; o * o];
        for (x, k) in xs.iter().zip(&ks) {
            for (w, v) in want.iter_mut().zip(correlate(x.data(), m, k.data(), n)) {
                *w += v;
            }
        }
        channel_err = channel_err.max(rel_error(out.data(), &want));
    }

    for _ in 0..per_scheme {
        let (m, n) = extents(&mut rng);
        let c_in = rng.random_range(1..=4);
        let depthwise = rng.random_bool(0.5);
        let c_out = if depthwise { c_in * rng.random_range(1..=3) } else { rng.random_range(1..=6) };
        let device = DeviceSpec::new((m + n - 1) * (c_in + rng.random_range(0..3)), 1.0).unwrap();
        let xs: Vec<Tensor> = (0..c_in).map(|_| tensor(&mut rng, &[m, m])).collect();
        let kernels = tensor(&mut rng, &[c_out, c_in, n, n]);
        let (outs, _) = mixed_tiling(&xs, &kernels, &device, depthwise).unwrap();
        let got: Vec<f64> = outs.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut want = Vec::new();
        for oc in 0..c_out {
            let o = m - n + 1;
            let mut acc = vec![0.0; o * o];
            for (c, x) in xs.iter().enumerate() {
                if depthwise && c != oc / (c_out / c_in) {
                    continue;
                }
                let k = &kernels.data()[(oc * c_in + c) * n * n..][..n * n];
                for (a, v) in acc.iter_mut().zip(correlate(x.data(), m, k, n)) {
                    *a += v;
                }
            }
            want.extend(acc);
        }
        mixed_err = mixed_err.max(rel_error(&got, &want));
    }

    let worst = kernel_err.max(channel_err).max(mixed_err);
    let passed = worst < 1e-9 && start.elapsed() < Duration::from_secs(60);
    report(
        "optical tiling",
        passed,
        format!(
            "{per_scheme} instances per scheme, max rel error kernel {kernel_err:.2e}, channel {channel_err:.2e}, mixed {mixed_err:.2e} (< 1e-9)"
        ),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn reference_inference_counts_and_latency() {
    let start = Instant::now();
    let p = plan_inferences(&ModelConfig::cifar100_13x13(), &DeviceSpec::new(2160, 2e6).unwrap()).unwrap();
    let b = &p.per_block;
    let display = format_latency(p.latency_s);
    let passed = p.capacity == 86
        && (b.qkv, b.scores, b.weighted_sum, b.mlp) == (384, 50, 1, 195)
        && p.blocks == 9
        && p.total == 5670
        && (p.latency_s - 2.835e-3).abs() < 1e-15
        && display == "2.8 ms";
    report(
        "inference arithmetic",
        passed,
        format!(
            "capacity {}, per block {}/{}/{}/{}, total {}, latency {:.3} ms shown as \"{display}\"",
            p.capacity,
            b.qkv,
            b.scores,
            b.weighted_sum,
            b.mlp,
            p.total,
            p.latency_s * 1e3
        ),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let start = Instant::now();
    let config = ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_h: 8,
        embed_w: 8,
        heads: 4,
        depth: 2,
        mlp_ratio: 2,
        positional: PositionalKind::Trainable,
        num_classes: 3,
        weight_sharing: true,
        qkv_padding: PaddingMode::Valid,
        bias: true,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut model = ConvShareViT::init(&config, &mut rng).unwrap();
        model.set_precision(Precision::Double);
        randomize_parameters(&mut model, &mut rng, 0.3);
        let batch: Vec<(Tensor, usize)> = (0..2).map(|i| (tensor(&mut rng, &[1, 8, 8]), i % 3)).collect();
        let r = gradient_check(&model, &batch, 1e-5).unwrap();
        assert_eq!(r.checked, model.parameter_count());
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let passed = worst < 1e-4 && start.elapsed() < Duration::from_secs(300);
    report(
        "gradient check",
        passed,
        format!("3 seeds, {checked} parameters, max rel error {worst:.2e} (< 1e-4)"),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn quadrant_blob_valid_learns_and_beats_same_padding() {
    let start = Instant::now();
    let seed = 0;
    let run = |padding: PaddingMode| {
        let config = ModelConfig {
            qkv_padding: padding,
            ..toy_model_config(DatasetKind::QuadrantBlob, 16)
        };
        let mut model = ConvShareViT::init(&config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let r = train(&mut model, &TrainConfig::quadrant_blob(50, seed), |_| {}).unwrap();
        r.metrics.last().unwrap().clone()
    };
    let valid = run(PaddingMode::Valid);
    let same = run(PaddingMode::Same);
    let learns = valid.train_acc >= 0.95 && valid.val_acc >= 0.90;
    let ordered = same.val_acc < valid.val_acc;
    let passed = learns && ordered && start.elapsed() < Duration::from_secs(900);
    report(
        "desk-scale learning",
        passed,
        format!(
            "valid train {:.3} val {:.3} (>= 0.95 / 0.90: {}); same-padding val {:.3} strictly lower: {}",
            valid.train_acc,
            valid.val_acc,
            if learns { "yes" } else { "no" },
            same.val_acc,
            if ordered { "yes" } else { "no" },
        ),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn optical_simulation_matches_electronic_logits() {
    let start = Instant::now();
    let config = ModelConfig::cifar100_13x13();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let model = ConvShareViT::init(&config, &mut rng).unwrap();
    let images: Vec<Tensor> = (0..100)
        .map(|_| tensor(&mut rng, &[config.channels, config.image_size, config.image_size]))
        .collect();
    let r = compare_paths(&model, &images, &DeviceSpec::new(2160, 2e6).unwrap(), SimulationMode::Cells).unwrap();
    let passed = r.max_rel_deviation < 1e-6
        && r.argmax_agreement == 100
        && r.inferences_per_image == 5670
        && start.elapsed() < Duration::from_secs(600);
    report(
        "optical simulation",
        passed,
        format!(
            "100 images, max rel deviation {:.2e} (< 1e-6), argmax agreement {}/100, {} passes per image",
            r.max_rel_deviation, r.argmax_agreement, r.inferences_per_image
        ),
        start.elapsed(),
    );
    assert!(passed);
}

#[test]
fn checkpoints_and_seeded_training_are_reproducible() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let config = toy_model_config(DatasetKind::QuadrantBlob, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let model = ConvShareViT::init(&config, &mut rng).unwrap();
    let path = dir.path().join("model.ckpt");
    Checkpoint::capture(&model, 808, 0).save(&path).unwrap();
    let restored = Checkpoint::load(&path).unwrap().restore().unwrap();
    let identical_forward = (0..5).all(|_| {
        let x = tensor(&mut rng, &[1, 8, 8]);
        let (a, b) = (model.forward(&x).unwrap(), restored.forward(&x).unwrap());
        a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits())
    });

    let csv = || {
        let mut m = ConvShareViT::init(&config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let tc = TrainConfig::toy(DatasetKind::QuadrantBlob, 8, 3, 9);
        metrics_csv(&train(&mut m, &tc, |_| {}).unwrap().metrics)
    };
    let identical_csv = csv() == csv();
    let passed = identical_forward && identical_csv;
    report(
        "determinism",
        passed,
        format!("checkpoint round trip bit-identical: {identical_forward}; repeated seeded metrics identical: {identical_csv}"),
        start.elapsed(),
    );
    assert!(passed);
}
