//! Randomised equivalence suites: convolution path against its dense
//! matrix, convolutional attention against standard attention, and each
//! optical tiling against direct convolution. Each suite reports the worst
//! error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{reference_mhsa, to_head_major, transport_weights, HeadGeometry};
use crate::error::Result;
use crate::linear::SharedGroupedConv;
use crate::model::ModelConfig;
use crate::optics::{channel_tiling, kernel_tiling, mixed_tiling, DeviceSpec};
use crate::plan::plan_inferences;
use crate::tensor::{conv2d, PaddingMode, Tensor};

pub const VERIFY_SCHEMA_VERSION: u32 = 1;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 20240917;

pub const LINEAR_TOLERANCE: f64 = 1e-12;
pub const ATTENTION_TOLERANCE: f64 = 1e-10;
pub const OPTICS_TOLERANCE: f64 = 1e-9;

/// Scale applied to one kernel when a fault is injected.
pub const FAULT_SCALE: f64 = 1.0 + 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub property: String,
    pub instances: usize,
    pub max_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl SuiteResult {
    fn new(suite: &str, property: &str, instances: usize, max_error: f64, threshold: f64) -> Self {
        SuiteResult {
            suite: suite.into(),
            property: property.into(),
            instances,
            max_error,
            threshold,
            passed: max_error.is_finite() && max_error < threshold,
        }
    }

    /// `PASS suite: property (n instances, max error e < t)`.
    pub fn line(&self) -> String {
        format!(
            "{} {}: {} ({} instances, max error {:.3e}, threshold {:.0e})",
            if self.passed { "PASS" } else { "FAIL" },
            self.suite,
            self.property,
            self.instances,
            self.max_error,
            self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub fault_injected: bool,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn failing(&self) -> Vec<&SuiteResult> {
        self.suites.iter().filter(|s| !s.passed).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Scales one kernel of the convolution path by [`FAULT_SCALE`].
    pub inject_fault: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: DEFAULT_SEED,
            inject_fault: false,
        }
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Valid-padding shared convolution against the flattened matrix product.
pub fn linear_equivalence(rng: &mut ChaCha8Rng, instances: usize, inject_fault: bool) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let g = [1, 2, 4][rng.random_range(0..3)];
        let t = g * rng.random_range(1..=16 / g);
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let m = rng.random_range(1..=12);
        let bias = rng.random_bool(0.5).then(|| rand_tensor(rng, &[m]));
        let layer = SharedGroupedConv::new(rand_tensor(rng, &[m, g, h, w]), g, bias, PaddingMode::Valid)?;
        let x = rand_tensor(rng, &[t, h, w]);
        let dense = layer.to_linear().apply(&x, g)?;
        let mut conv_layer = layer.clone();
        if inject_fault && i == 0 {
            let k = &mut conv_layer.kernels_mut().data_mut()[..g * h * w];
            k.iter_mut().for_each(|v| *v *= FAULT_SCALE);
        }
        let conv = conv_layer.forward(&x, &[t / g, m])?;
        worst = worst.max(conv.max_abs_diff(&dense)?);
    }
    Ok(SuiteResult::new(
        "linear-equivalence",
        "shared valid convolution equals the flattened matrix product",
        instances,
        worst,
        LINEAR_TOLERANCE,
    ))
}

fn block_diagonal(rng: &mut ChaCha8Rng, geom: &HeadGeometry) -> Tensor {
    let (d, dh) = (geom.token_dim(), geom.head_dim());
    let block = rand_tensor(rng, &[dh, dh]);
    Tensor::from_fn(&[d, d], |i| {
        let (r, c) = (i / d, i % d);
        if r / dh == c / dh {
            block.data()[(r % dh) * dh + c % dh]
        } else {
            0.0
        }
    })
}

/// Convolutional attention with transported weights against standard
/// multi-head attention, relative error.
pub fn attention_equivalence(rng: &mut ChaCha8Rng, heads: usize, instances: usize) -> Result<SuiteResult> {
    let grid = (heads as f64).sqrt().round() as usize;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let side = grid * rng.random_range(1..=8 / grid.max(1)).max(1);
        let t = rng.random_range(1..=16);
        let geom = HeadGeometry::new(heads, side, side)?;
        let (wq, wk, wv) = (
            block_diagonal(rng, &geom),
            block_diagonal(rng, &geom),
            block_diagonal(rng, &geom),
        );
        let layer = transport_weights(&wq, &wk, &wv, geom)?;
        let x = rand_tensor(rng, &[t, side, side]);
        let conv = to_head_major(&layer.forward(&x)?, &geom)?;
        let reference = reference_mhsa(&to_head_major(&x, &geom)?, &wq, &wk, &wv, heads)?;
        worst = worst.max(conv.max_rel_diff(&reference)?);
    }
    Ok(SuiteResult::new(
        &format!("attention-equivalence-{heads}"),
        &format!("convolutional attention equals standard attention with {heads} head(s)"),
        instances,
        worst,
        ATTENTION_TOLERANCE,
    ))
}

fn optics_case(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let m = rng.random_range(1..=16);
    (m, rng.random_range(1..=m))
}

/// One input against many kernels.
pub fn kernel_tiling_suite(rng: &mut ChaCha8Rng, instances: usize) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, n) = optics_case(rng);
        let count = rng.random_range(1..=12);
        let l = m + n - 1;
        let device = DeviceSpec::new(l * rng.random_range(1..=4), 1.0)?;
        let x = rand_tensor(rng, &[m, m]);
        let kernels: Vec<Tensor> = (0..count).map(|_| rand_tensor(rng, &[n, n])).collect();
        let (outs, _) = kernel_tiling(&x, &kernels, &device)?;
        for (k, o) in kernels.iter().zip(&outs) {
            let direct = conv2d(&x.reshape(&[1, m, m])?, &k.reshape(&[1, 1, n, n])?, PaddingMode::Valid, 1)?;
            worst = worst.max(o.reshape(direct.shape())?.max_rel_diff(&direct)?);
        }
    }
    Ok(SuiteResult::new(
        "kernel-tiling",
        "kernel-tiled optical pass equals direct convolution",
        instances,
        worst,
        OPTICS_TOLERANCE,
    ))
}

/// A square number of channels summed in one pass.
pub fn channel_tiling_suite(rng: &mut ChaCha8Rng, instances: usize) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, n) = optics_case(rng);
        let s = rng.random_range(1..=3);
        let device = DeviceSpec::new((m + n - 1) * (s + rng.random_range(0..2)), 1.0)?;
        let xs: Vec<Tensor> = (0..s * s).map(|_| rand_tensor(rng, &[m, m])).collect();
        let ks: Vec<Tensor> = (0..s * s).map(|_| rand_tensor(rng, &[n, n])).collect();
        let (out, _) = channel_tiling(&xs, &ks, &device)?;
        let direct = conv2d(
            &Tensor::concat(&xs)?.reshape(&[s * s, m, m])?,
            &Tensor::concat(&ks)?.reshape(&[1, s * s, n, n])?,
            PaddingMode::Valid,
            1,
        )?;
        worst = worst.max(out.reshape(direct.shape())?.max_rel_diff(&direct)?);
    }
    Ok(SuiteResult::new(
        "channel-tiling",
        "channel-tiled optical pass equals the channel-summed convolution",
        instances,
        worst,
        OPTICS_TOLERANCE,
    ))
}

/// A whole layer, dense or depthwise, across as many passes as needed.
pub fn mixed_tiling_suite(rng: &mut ChaCha8Rng, instances: usize) -> Result<SuiteResult> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (m, n) = optics_case(rng);
        let c_in = rng.random_range(1..=4);
        let depthwise = rng.random_bool(0.5);
        let c_out = if depthwise { c_in * rng.random_range(1..=3) } else { rng.random_range(1..=6) };
        let device = DeviceSpec::new((m + n - 1) * (c_in + rng.random_range(0..3)), 1.0)?;
        let xs: Vec<Tensor> = (0..c_in).map(|_| rand_tensor(rng, &[m, m])).collect();
        let kernels = rand_tensor(rng, &[c_out, c_in, n, n]);
        let (outs, _) = mixed_tiling(&xs, &kernels, &device, depthwise)?;
        let mut effective = kernels.clone();
        if depthwise {
            let per = c_out / c_in;
            for (i, v) in effective.data_mut().iter_mut().enumerate() {
                let (o, c) = (i / (c_in * n * n), (i / (n * n)) % c_in);
                if c != o / per {
                    *v = 0.0;
                }
            }
        }
        let direct = conv2d(
            &Tensor::concat(&xs)?.reshape(&[c_in, m, m])?,
            &effective,
            PaddingMode::Valid,
            1,
        )?;
        let got = Tensor::concat(&outs)?.reshape(direct.shape())?;
        worst = worst.max(got.max_rel_diff(&direct)?);
    }
    Ok(SuiteResult::new(
        "mixed-tiling",
        "mixed-tiled optical passes equal direct convolution",
        instances,
        worst,
        OPTICS_TOLERANCE,
    ))
}

/// Pass counts of the 13×13 reference model on the reference device.
pub fn reference_plan_suite() -> Result<SuiteResult> {
    let p = plan_inferences(&ModelConfig::cifar100_13x13(), &DeviceSpec::reference())?;
    let got = [p.capacity, p.per_block.qkv, p.per_block.scores, p.per_block.weighted_sum, p.per_block.mlp, p.total];
    let want = [86, 384, 50, 1, 195, 5670];
    let off = got.iter().zip(&want).filter(|(a, b)| a != b).count() as f64;
    let latency = (p.latency_s - 2.835e-3).abs();
    Ok(SuiteResult::new(
        "reference-plan",
        "13x13 model on a 2160-pixel 2 MHz device: 86 channels, 384/50/1/195 passes, 5670 total, 2.835 ms",
        1,
        off + latency,
        1e-12,
    ))
}

/// Every suite at its default size.
pub fn run_all(opts: VerifyOptions) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut suites = vec![linear_equivalence(&mut rng, 100, opts.inject_fault)?];
    for heads in [1, 4, 16] {
        suites.push(attention_equivalence(&mut rng, heads, 20)?);
    }
    suites.push(kernel_tiling_suite(&mut rng, 50)?);
    suites.push(channel_tiling_suite(&mut rng, 50)?);
    suites.push(mixed_tiling_suite(&mut rng, 50)?);
    suites.push(reference_plan_suite()?);
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifyReport {
        schema_version: VERIFY_SCHEMA_VERSION,
        seed: opts.seed,
        fault_injected: opts.inject_fault,
        suites,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let r = run_all(VerifyOptions::default()).unwrap();
        for s in &r.suites {
            assert!(s.passed, "{}", s.line());
        }
        assert!(r.passed);
        assert_eq!(r.suites.len(), 8);
    }

    #[test]
    fn injected_fault_fails_the_linear_suite_only() {
        let r = run_all(VerifyOptions {
            inject_fault: true,
            ..Default::default()
        })
        .unwrap();
        assert!(!r.passed);
        let failing: Vec<_> = r.failing().iter().map(|s| s.suite.clone()).collect();
        assert_eq!(failing, ["linear-equivalence"]);
        assert!(r.suites[0].max_error > 1e-9);
    }

    #[test]
    fn report_json_has_schema_fields() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = VerifyReport {
            schema_version: VERIFY_SCHEMA_VERSION,
            seed: 1,
            fault_injected: false,
            suites: vec![kernel_tiling_suite(&mut rng, 3).unwrap()],
            passed: true,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["schema_version"], 1);
        for key in ["suite", "property", "instances", "max_error", "threshold", "passed"] {
            assert!(v["suites"][0].get(key).is_some(), "{key}");
        }
    }
}
