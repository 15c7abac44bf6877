//! Ideal 4f correlator: convolution by pointwise multiplication in the
//! Fourier plane, and the three ways of packing many convolutions into one
//! optical pass.
//!
//! The bench computes true convolution. Network layers are correlations,
//! so every tiling writes kernels onto the mask flipped, and reads the
//! valid-correlation window out of each `L × L` output cell, where
//! `L = M + N - 1` for an `M × M` input and `N × N` kernels.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::tensor::Tensor;

/// Resolution and pass rate of an optical correlator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    /// Pixels per side of the modulators and sensor.
    pub resolution: usize,
    /// Optical passes per second.
    pub clock_hz: f64,
}

impl DeviceSpec {
    pub fn new(resolution: usize, clock_hz: f64) -> Result<Self> {
        let d = DeviceSpec { resolution, clock_hz };
        d.validate()?;
        Ok(d)
    }

    /// 2160-pixel modulator at 2 MHz.
    pub fn reference() -> Self {
        DeviceSpec {
            resolution: 2160,
            clock_hz: 2e6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return config_err("device resolution must be at least 1");
        }
        if !(self.clock_hz > 0.0) || !self.clock_hz.is_finite() {
            return config_err("device clock must be positive");
        }
        Ok(())
    }
}

/// Channels of an `m × m` input and `n × n` kernels that fit side by side
/// on a device of `resolution` pixels: `⌊R / (m + n - 1)⌋`.
pub fn capacity(resolution: usize, m: usize, n: usize) -> Result<usize> {
    if resolution == 0 || m == 0 || n == 0 {
        return config_err("capacity needs positive resolution and extents");
    }
    let c = resolution / (m + n - 1);
    if c == 0 {
        return Err(Error::Infeasible {
            stage: "capacity".into(),
            reason: format!(
                "capacity 0: a {}-pixel cell does not fit on a {resolution}-pixel device",
                m + n - 1
            ),
        });
    }
    Ok(c)
}

/// Cached FFT plans for one 2-D transform size.
pub struct Fft2 {
    h: usize,
    w: usize,
    rows: Arc<dyn Fft<f64>>,
    cols: Arc<dyn Fft<f64>>,
    rows_inv: Arc<dyn Fft<f64>>,
    cols_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(h: usize, w: usize) -> Self {
        let mut p = FftPlanner::new();
        Fft2 {
            h,
            w,
            rows: p.plan_fft_forward(w),
            cols: p.plan_fft_forward(h),
            rows_inv: p.plan_fft_inverse(w),
            cols_inv: p.plan_fft_inverse(h),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    fn run(&self, buf: &mut [Complex64], rows: &dyn Fft<f64>, cols: &dyn Fft<f64>) {
        let (h, w) = (self.h, self.w);
        rows.process(buf);
        let mut t = vec![Complex64::new(0.0, 0.0); h * w];
        for i in 0..h {
            for j in 0..w {
                t[j * h + i] = buf[i * w + j];
            }
        }
        cols.process(&mut t);
        for i in 0..h {
            for j in 0..w {
                buf[i * w + j] = t[j * h + i];
            }
        }
    }

    /// Unnormalised forward DFT in place.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.run(buf, &*self.rows, &*self.cols);
    }

    /// Inverse DFT in place, scaled by `1 / (h w)`.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.run(buf, &*self.rows_inv, &*self.cols_inv);
        let s = 1.0 / (self.h * self.w) as f64;
        for v in buf.iter_mut() {
            *v *= s;
        }
    }

    /// Spectrum of a real `[a, b]` block placed at the origin of the
    /// transform grid, optionally flipped in both axes.
    pub fn spectrum(&self, block: &[f64], a: usize, b: usize, flip: bool) -> Vec<Complex64> {
        let mut buf = vec![Complex64::new(0.0, 0.0); self.h * self.w];
        for i in 0..a {
            for j in 0..b {
                let v = if flip {
                    block[(a - 1 - i) * b + (b - 1 - j)]
                } else {
                    block[i * b + j]
                };
                buf[i * self.w + j] = Complex64::new(v, 0.0);
            }
        }
        self.forward(&mut buf);
        buf
    }
}

/// Full linear convolution `[Hi + Hk - 1, Wi + Wk - 1]` through the
/// Fourier domain: zero-pad both operands to the output extent, transform,
/// multiply, transform back and keep the real part.
pub fn fourier_conv(input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    input.expect_rank("fourier_conv input", 2)?;
    kernel.expect_rank("fourier_conv kernel", 2)?;
    if !input.is_finite() || !kernel.is_finite() {
        return dim_err("fourier_conv operands must be finite");
    }
    let (hi, wi) = (input.shape()[0], input.shape()[1]);
    let (hk, wk) = (kernel.shape()[0], kernel.shape()[1]);
    let (h, w) = (hi + hk - 1, wi + wk - 1);
    let fft = Fft2::new(h, w);
    let mut a = fft.spectrum(input.data(), hi, wi, false);
    let b = fft.spectrum(kernel.data(), hk, wk, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    fft.inverse(&mut a);
    Tensor::new(vec![h, w], a.iter().map(|c| c.re).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TilingScheme {
    Kernel,
    Channel,
    Mixed,
}

/// Content of one mask cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MaskCell {
    Zero,
    /// Kernel for output `output` applied to input channel `input`.
    Kernel { output: usize, input: usize },
}

/// Where an input channel sits on the input plane, in cell units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputCell {
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

/// Pixel window of the output plane holding one result.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidRegion {
    pub output: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl ValidRegion {
    fn overlaps(&self, o: &ValidRegion) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

/// Layout of one optical pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilingPlan {
    pub scheme: TilingScheme,
    /// `M + N - 1`.
    pub cell_size: usize,
    /// Mask grid, in cells.
    pub rows: usize,
    pub cols: usize,
    /// Row-major `rows × cols` mask contents.
    pub mask: Vec<MaskCell>,
    pub inputs: Vec<InputCell>,
    pub valid_regions: Vec<ValidRegion>,
    /// Output plane extent `[height, width]` in pixels.
    pub canvas: [usize; 2],
    /// Position of this pass in its sequence.
    pub inference: usize,
}

impl TilingPlan {
    /// Checks that the pass fits on `device` and that its valid regions are
    /// inside the output plane and pairwise disjoint.
    pub fn validate(&self, device: &DeviceSpec) -> Result<()> {
        let extent = self.cell_size * self.rows.max(self.cols);
        if extent > device.resolution {
            return Err(Error::Infeasible {
                stage: format!("{:?} tiling", self.scheme).to_lowercase(),
                reason: format!("{extent} pixels needed, device has {}", device.resolution),
            });
        }
        if self.mask.len() != self.rows * self.cols {
            return config_err("mask does not cover the declared grid");
        }
        for (i, r) in self.valid_regions.iter().enumerate() {
            if r.top + r.height > self.canvas[0] || r.left + r.width > self.canvas[1] {
                return config_err(format!("valid region of output {} leaves the canvas", r.output));
            }
            if let Some(o) = self.valid_regions[..i].iter().find(|o| o.overlaps(r)) {
                return config_err(format!("valid regions of outputs {} and {} overlap", o.output, r.output));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }
}

fn square(t: &Tensor, what: &str) -> Result<usize> {
    t.expect_rank(what, 2)?;
    if t.shape()[0] != t.shape()[1] {
        return dim_err(format!("{what} must be square, got {:?}", t.shape()));
    }
    Ok(t.shape()[0])
}

/// Writes `block` (`n × n`, flipped if asked) at pixel `(top, left)` of a canvas
/// `width` pixels wide.
fn paint(canvas: &mut [f64], width: usize, top: usize, left: usize, block: &[f64], n: usize, flip: bool) {
    for i in 0..n {
        for j in 0..n {
            let v = if flip {
                block[(n - 1 - i) * n + (n - 1 - j)]
            } else {
                block[i * n + j]
            };
            canvas[(top + i) * width + left + j] = v;
        }
    }
}

fn window(t: &Tensor, r: &ValidRegion) -> Tensor {
    let w = t.shape()[1];
    Tensor::from_fn(&[r.height, r.width], |i| {
        let (a, b) = (i / r.width, i % r.width);
        t.data()[(r.top + a) * w + r.left + b]
    })
}

fn valid_region(output: usize, top: usize, left: usize, m: usize, n: usize) -> ValidRegion {
    ValidRegion {
        output,
        top: top + n - 1,
        left: left + n - 1,
        height: m - n + 1,
        width: m - n + 1,
    }
}

fn check_extents(m: usize, n: usize) -> Result<()> {
    if n > m {
        return dim_err(format!("{n}x{n} kernels exceed the {m}x{m} input"));
    }
    Ok(())
}

/// One input against many kernels: kernels sit in a grid of `L × L` cells
/// and each cell of the output holds one correlation. Passes hold up to
/// `capacity²` kernels; returns the valid correlations in kernel order and
/// one plan per pass.
pub fn kernel_tiling(input: &Tensor, kernels: &[Tensor], device: &DeviceSpec) -> Result<(Vec<Tensor>, Vec<TilingPlan>)> {
    device.validate()?;
    let m = square(input, "kernel tiling input")?;
    if kernels.is_empty() {
        return dim_err("kernel tiling needs at least one kernel");
    }
    let n = square(&kernels[0], "kernel")?;
    for k in kernels {
        k.expect_shape("kernel", &[n, n])?;
    }
    check_extents(m, n)?;
    let l = m + n - 1;
    let cap = capacity(device.resolution, m, n)?;
    let mut outputs = Vec::with_capacity(kernels.len());
    let mut plans = Vec::new();
    for (pass, chunk) in kernels.chunks(cap * cap).enumerate() {
        let cols = chunk.len().min(cap);
        let rows = chunk.len().div_ceil(cols);
        let width = cols * l;
        let mut mask = vec![0.0; rows * l * width];
        let mut cells = vec![MaskCell::Zero; rows * cols];
        let mut regions = Vec::with_capacity(chunk.len());
        for (i, k) in chunk.iter().enumerate() {
            let (r, c) = (i / cols, i % cols);
            paint(&mut mask, width, r * l, c * l, k.data(), n, true);
            let id = pass * cap * cap + i;
            cells[i] = MaskCell::Kernel { output: id, input: 0 };
            regions.push(valid_region(id, r * l, c * l, m, n));
        }
        let out = fourier_conv(input, &Tensor::new(vec![rows * l, width], mask)?)?;
        let plan = TilingPlan {
            scheme: TilingScheme::Kernel,
            cell_size: l,
            rows,
            cols,
            mask: cells,
            inputs: vec![InputCell { channel: 0, row: 0, col: 0 }],
            valid_regions: regions,
            canvas: [out.shape()[0], out.shape()[1]],
            inference: pass,
        };
        plan.validate(device)?;
        outputs.extend(plan.valid_regions.iter().map(|r| window(&out, r)));
        plans.push(plan);
    }
    Ok((outputs, plans))
}

/// `s²` channels against `s²` kernels, summed in one pass. Inputs sit on an
/// `s × s` grid and kernels at the point-reflected cells, so the pairs that
/// belong together all land on the centre tile of the `(2s-1)²` output
/// grid; every other tile is discarded.
pub fn channel_tiling(inputs: &[Tensor], kernels: &[Tensor], device: &DeviceSpec) -> Result<(Tensor, TilingPlan)> {
    device.validate()?;
    if inputs.is_empty() || inputs.len() != kernels.len() {
        return dim_err(format!("{} inputs for {} kernels", inputs.len(), kernels.len()));
    }
    let s = (inputs.len() as f64).sqrt().round() as usize;
    if s * s != inputs.len() {
        return config_err(format!("channel tiling needs a square channel count, got {}", inputs.len()));
    }
    let m = square(&inputs[0], "channel tiling input")?;
    let n = square(&kernels[0], "kernel")?;
    for (x, k) in inputs.iter().zip(kernels) {
        x.expect_shape("channel tiling input", &[m, m])?;
        k.expect_shape("kernel", &[n, n])?;
    }
    check_extents(m, n)?;
    let l = m + n - 1;
    if s > capacity(device.resolution, m, n)? {
        return Err(Error::Infeasible {
            stage: "channel tiling".into(),
            reason: format!("{s}x{s} channel grid exceeds capacity"),
        });
    }
    let side = s * l;
    let mut plane = vec![0.0; side * side];
    let mut mask = vec![0.0; side * side];
    let mut cells = vec![MaskCell::Zero; s * s];
    let mut placed = Vec::with_capacity(s * s);
    for c in 0..s * s {
        let (a, b) = (c / s, c % s);
        paint(&mut plane, side, a * l, b * l, inputs[c].data(), m, false);
        let (ra, rb) = (s - 1 - a, s - 1 - b);
        paint(&mut mask, side, ra * l, rb * l, kernels[c].data(), n, true);
        cells[ra * s + rb] = MaskCell::Kernel { output: 0, input: c };
        placed.push(InputCell { channel: c, row: a, col: b });
    }
    let out = fourier_conv(&Tensor::new(vec![side, side], plane)?, &Tensor::new(vec![side, side], mask)?)?;
    let centre = (s - 1) * l;
    let plan = TilingPlan {
        scheme: TilingScheme::Channel,
        cell_size: l,
        rows: s,
        cols: s,
        mask: cells,
        inputs: placed,
        valid_regions: vec![valid_region(0, centre, centre, m, n)],
        canvas: [out.shape()[0], out.shape()[1]],
        inference: 0,
    };
    plan.validate(device)?;
    Ok((window(&out, &plan.valid_regions[0]), plan))
}

/// A whole convolutional layer per pass. Inputs are tiled along one row;
/// mask row `o` holds the kernels of output channel `o`, kernel `[o, c]` at
/// column `C_in - 1 - c`, so every channel of row `o` lands on the centre
/// column and sums there.
///
/// With `depthwise`, row `o` keeps only the kernel of channel
/// `o / (C_out / C_in)` and the rest are zero. Output rows beyond capacity
/// spill into further passes; more input channels than capacity is
/// infeasible.
pub fn mixed_tiling(
    inputs: &[Tensor],
    kernels: &Tensor,
    device: &DeviceSpec,
    depthwise: bool,
) -> Result<(Vec<Tensor>, Vec<TilingPlan>)> {
    device.validate()?;
    kernels.expect_rank("mixed tiling kernels", 4)?;
    let s = kernels.shape();
    let (c_out, c_in, n) = (s[0], s[1], s[2]);
    if s[3] != n {
        return dim_err("mixed tiling kernels must be square");
    }
    if inputs.len() != c_in {
        return dim_err(format!("{} inputs for {c_in} kernel channels", inputs.len()));
    }
    let m = square(&inputs[0], "mixed tiling input")?;
    for x in inputs {
        x.expect_shape("mixed tiling input", &[m, m])?;
    }
    check_extents(m, n)?;
    if depthwise && c_out % c_in != 0 {
        return config_err(format!("depthwise tiling needs C_out ({c_out}) divisible by C_in ({c_in})"));
    }
    let l = m + n - 1;
    let cap = capacity(device.resolution, m, n)?;
    if c_in > cap {
        return Err(Error::Infeasible {
            stage: "mixed tiling".into(),
            reason: format!("{c_in} input channels exceed capacity {cap}; input splitting is not supported"),
        });
    }
    let width = c_in * l;
    let mut plane = vec![0.0; m * width];
    for (c, x) in inputs.iter().enumerate() {
        paint(&mut plane, width, 0, c * l, x.data(), m, false);
    }
    let plane = Tensor::new(vec![m, width], plane)?;
    let kn = n * n;
    let mut outputs = Vec::with_capacity(c_out);
    let mut plans = Vec::new();
    let rows_all: Vec<usize> = (0..c_out).collect();
    for (pass, rows) in rows_all.chunks(cap).enumerate() {
        let mut mask = vec![0.0; rows.len() * l * width];
        let mut cells = vec![MaskCell::Zero; rows.len() * c_in];
        let mut regions = Vec::with_capacity(rows.len());
        for (r, &o) in rows.iter().enumerate() {
            for c in 0..c_in {
                if depthwise && c != o / (c_out / c_in) {
                    continue;
                }
                let k = &kernels.data()[(o * c_in + c) * kn..][..kn];
                paint(&mut mask, width, r * l, (c_in - 1 - c) * l, k, n, true);
                cells[r * c_in + (c_in - 1 - c)] = MaskCell::Kernel { output: o, input: c };
            }
            regions.push(valid_region(o, r * l, (c_in - 1) * l, m, n));
        }
        let out = fourier_conv(&plane, &Tensor::new(vec![rows.len() * l, width], mask)?)?;
        let plan = TilingPlan {
            scheme: TilingScheme::Mixed,
            cell_size: l,
            rows: rows.len(),
            cols: c_in,
            mask: cells,
            inputs: (0..c_in).map(|c| InputCell { channel: c, row: 0, col: c }).collect(),
            valid_regions: regions,
            canvas: [out.shape()[0], out.shape()[1]],
            inference: pass,
        };
        plan.validate(device)?;
        outputs.extend(plan.valid_regions.iter().map(|r| window(&out, r)));
        plans.push(plan);
    }
    Ok((outputs, plans))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::SharedGroupedConv;
    use crate::tensor::{conv2d, PaddingMode};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn direct_full_conv(x: &Tensor, k: &Tensor) -> Tensor {
        let (hi, wi, hk, wk) = (x.shape()[0], x.shape()[1], k.shape()[0], k.shape()[1]);
        let (h, w) = (hi + hk - 1, wi + wk - 1);
        let mut out = vec![0.0; h * w];
        for i in 0..hi {
            for j in 0..wi {
                for a in 0..hk {
                    for b in 0..wk {
                        out[(i + a) * w + j + b] += x.data()[i * wi + j] * k.data()[a * wk + b];
                    }
                }
            }
        }
        Tensor::new(vec![h, w], out).unwrap()
    }

    fn rel(a: &Tensor, b: &Tensor) -> f64 {
        a.max_abs_diff(b).unwrap() / b.max_abs().max(1e-300)
    }

    fn dev(r: usize) -> DeviceSpec {
        DeviceSpec::new(r, 1.0).unwrap()
    }

    #[test]
    fn fourier_conv_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let delta = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        assert!(fourier_conv(&x, &delta).unwrap().max_abs_diff(&x).unwrap() < 1e-15);

        let ones = Tensor::full(&[2, 2], 1.0);
        let y = fourier_conv(&ones, &ones).unwrap();
        let e = [1.0, 2.0, 1.0, 2.0, 4.0, 2.0, 1.0, 2.0, 1.0];
        assert!(y.data().iter().zip(e).all(|(a, b)| (a - b).abs() < 1e-12));

        for _ in 0..10 {
            let x = rand_tensor(&mut rng, &[8, 8]);
            let k = rand_tensor(&mut rng, &[3, 3]);
            assert!(rel(&fourier_conv(&x, &k).unwrap(), &direct_full_conv(&x, &k)) < 1e-9);
        }
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(fourier_conv(&bad, &delta).is_err());
    }

    #[test]
    fn capacity_examples() {
        assert_eq!(capacity(2160, 13, 13).unwrap(), 86);
        assert_eq!(capacity(25, 13, 13).unwrap(), 1);
        assert!(matches!(capacity(24, 13, 13), Err(Error::Infeasible { .. })));
        assert_eq!(capacity(2160, 13, 1).unwrap(), 166);
    }

    #[test]
    fn kernel_tiling_matches_direct_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let ks: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[3, 3])).collect();
        let (outs, plans) = kernel_tiling(&x, &ks, &dev(64)).unwrap();
        assert_eq!(plans.len(), 1);
        assert_eq!(plans[0].cell_size, 6);
        for (o, k) in outs.iter().zip(&ks) {
            let e = conv2d(&x.reshape(&[1, 4, 4]).unwrap(), &k.reshape(&[1, 1, 3, 3]).unwrap(), PaddingMode::Valid, 1)
                .unwrap()
                .reshape(&[2, 2])
                .unwrap();
            assert!(rel(o, &e) < 1e-9);
        }

        // one kernel degenerates to a single correlation
        let (one, _) = kernel_tiling(&x, &ks[..1], &dev(64)).unwrap();
        let full = fourier_conv(&x, &Tensor::from_fn(&[3, 3], |i| ks[0].data()[8 - i])).unwrap();
        assert!(rel(&one[0], &window(&full, &valid_region(0, 0, 0, 4, 3))) < 1e-12);
    }

    #[test]
    fn kernel_tiling_splits_over_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 4]);
        let ks: Vec<Tensor> = (0..7).map(|_| rand_tensor(&mut rng, &[3, 3])).collect();
        // capacity 2: four kernels per pass
        let (outs, plans) = kernel_tiling(&x, &ks, &dev(12)).unwrap();
        assert_eq!(plans.len(), 2);
        assert_eq!(plans.iter().map(|p| p.valid_regions.len()).collect::<Vec<_>>(), vec![4, 3]);
        assert_eq!(outs.len(), 7);
        for p in &plans {
            p.validate(&dev(12)).unwrap();
        }
    }

    #[test]
    fn channel_tiling_sums_on_centre_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[5, 5])).collect();
        let ks: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[3, 3])).collect();
        let (y, plan) = channel_tiling(&xs, &ks, &dev(64)).unwrap();
        assert_eq!((plan.rows, plan.cols), (2, 2));
        // input and mask planes are both 2 cells of 7 pixels
        assert_eq!(plan.canvas, [2 * 14 - 1, 2 * 14 - 1]);
        assert_eq!(plan.valid_regions[0].top, 7 + 2);
        let x = Tensor::stack(&xs).unwrap();
        let k = Tensor::stack(&ks).unwrap().reshape(&[1, 4, 3, 3]).unwrap();
        let e = conv2d(&x, &k, PaddingMode::Valid, 1).unwrap().reshape(&[3, 3]).unwrap();
        assert!(rel(&y, &e) < 1e-9);

        let (one, _) = channel_tiling(&xs[..1], &ks[..1], &dev(64)).unwrap();
        let e1 = conv2d(&xs[0].reshape(&[1, 5, 5]).unwrap(), &ks[0].reshape(&[1, 1, 3, 3]).unwrap(), PaddingMode::Valid, 1)
            .unwrap()
            .reshape(&[3, 3])
            .unwrap();
        assert!(rel(&one, &e1) < 1e-9);
        assert!(matches!(channel_tiling(&xs[..3], &ks[..3], &dev(64)), Err(Error::Config(_))));
    }

    #[test]
    fn mixed_tiling_matches_conv_layer() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[6, 6])).collect();
        let k = rand_tensor(&mut rng, &[3, 4, 3, 3]);
        let (ys, plans) = mixed_tiling(&xs, &k, &dev(64), false).unwrap();
        assert_eq!(plans.len(), 1);
        let e = conv2d(&Tensor::stack(&xs).unwrap(), &k, PaddingMode::Valid, 1).unwrap();
        for (o, y) in ys.iter().enumerate() {
            assert!(rel(y, &e.outer(o).unwrap()) < 1e-9);
        }

        let (single, _) = mixed_tiling(&xs[..1], &k.outer(0).unwrap().outer(0).unwrap().reshape(&[1, 1, 3, 3]).unwrap(), &dev(64), false).unwrap();
        let e = conv2d(&xs[0].reshape(&[1, 6, 6]).unwrap(), &k.outer(0).unwrap().outer(0).unwrap().reshape(&[1, 1, 3, 3]).unwrap(), PaddingMode::Valid, 1).unwrap();
        assert!(rel(&single[0], &e.reshape(&[4, 4]).unwrap()) < 1e-9);

        // capacity 2 (cell 8, R = 16) cannot hold 4 input channels
        assert!(matches!(mixed_tiling(&xs, &k, &dev(16), false), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn depthwise_mixed_tiling_reproduces_shared_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (t, h, m_out) = (3, 4, 16);
        let layer = SharedGroupedConv::init(&mut rng, m_out, 1, (h, h), PaddingMode::Valid, false);
        let x = rand_tensor(&mut rng, &[t, h, h]);
        let bank = layer.kernels();
        let dense = Tensor::from_fn(&[t * m_out, t, h, h], |i| {
            let (o, c, px) = (i / (t * h * h), (i / (h * h)) % t, i % (h * h));
            if c == o / m_out {
                bank.data()[(o % m_out) * h * h + px]
            } else {
                // would be summed in if the row were not masked
                7.0
            }
        });
        let xs: Vec<Tensor> = (0..t).map(|i| x.outer(i).unwrap()).collect();
        // R = 21: capacity 3, so 48 rows take 16 passes
        let (ys, plans) = mixed_tiling(&xs, &dense, &dev(21), true).unwrap();
        assert_eq!(plans.len(), 16);
        let e = layer.forward_raw(&x).unwrap();
        for (o, y) in ys.iter().enumerate() {
            assert!((y.data()[0] - e.data()[o]).abs() <= 1e-9 * e.max_abs());
        }
    }

    #[test]
    fn plans_serialise_and_reject_overflow() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[4, 4])).collect();
        let k = rand_tensor(&mut rng, &[2, 2, 2, 2]);
        let (_, plans) = mixed_tiling(&xs, &k, &dev(64), false).unwrap();
        let json = plans[0].to_json();
        let back: TilingPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plans[0]);
        assert!(json.contains("\"scheme\": \"mixed\""));
        assert!(plans[0].validate(&dev(9)).is_err());
    }
}
