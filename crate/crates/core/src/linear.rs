//! Linear layers expressed as shared grouped convolutions.
//!
//! A [`SharedGroupedConv`] holds a single kernel bank `[M_out, g, Kh, Kw]`
//! that is reused by every group of `g` consecutive input channels (tokens).
//! With valid padding and full-extent kernels each output channel collapses
//! to one pixel, so the layer computes `W · vec(group)` for every group:
//! exactly a dense layer applied token-wise. `g = 1` is the shared depthwise
//! case; `g > 1` maps several tokens onto one.

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::tensor::{conv_backward, conv_forward, ConvGeometry, PaddingMode, Tensor};

/// Gradients of a grouped convolution layer.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Option<Tensor>,
}

fn geometry(
    x: &Tensor,
    out_per_group: usize,
    group_size: usize,
    kh: usize,
    kw: usize,
    padding: PaddingMode,
) -> Result<ConvGeometry> {
    x.expect_rank("grouped conv input", 3)?;
    let (t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if t % group_size != 0 {
        return config_err(format!("{t} input channels not divisible by group size {group_size}"));
    }
    if padding == PaddingMode::Valid && (kh != h || kw != w) {
        return config_err(format!(
            "valid padding needs full-extent kernels: kernel {kh}x{kw}, input {h}x{w}"
        ));
    }
    let n_groups = t / group_size;
    ConvGeometry::new(t, h, w, n_groups * out_per_group, kh, kw, n_groups, padding)
}

fn add_bias(out: &mut [f64], bias: &[f64], slot: impl Fn(usize) -> usize, g: &ConvGeometry) {
    let plane = g.out_h * g.out_w;
    for k in 0..g.c_out {
        let b = bias[slot(k)];
        for v in &mut out[k * plane..(k + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad(dy: &[f64], n_slots: usize, slot: impl Fn(usize) -> usize, g: &ConvGeometry) -> Vec<f64> {
    let plane = g.out_h * g.out_w;
    let mut db = vec![0.0; n_slots];
    for k in 0..g.c_out {
        db[slot(k)] += dy[k * plane..(k + 1) * plane].iter().sum::<f64>();
    }
    db
}

/// One kernel bank shared across all groups of input channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedGroupedConv {
    kernels: Tensor,
    group_size: usize,
    bias: Option<Tensor>,
    padding: PaddingMode,
}

impl SharedGroupedConv {
    pub fn new(
        kernels: Tensor,
        group_size: usize,
        bias: Option<Tensor>,
        padding: PaddingMode,
    ) -> Result<Self> {
        kernels.expect_rank("shared conv kernels", 4)?;
        if group_size == 0 || kernels.shape()[1] != group_size {
            return config_err(format!(
                "kernel bank {:?} does not match group size {group_size}",
                kernels.shape()
            ));
        }
        if let Some(b) = &bias {
            b.expect_shape("shared conv bias", &[kernels.shape()[0]])?;
        }
        Ok(SharedGroupedConv {
            kernels,
            group_size,
            bias,
            padding,
        })
    }

    /// Truncated-normal kernels (std 0.02), zero bias.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        out_channels: usize,
        group_size: usize,
        kernel: (usize, usize),
        padding: PaddingMode,
        bias: bool,
    ) -> Self {
        SharedGroupedConv {
            kernels: trunc_normal(rng, &[out_channels, group_size, kernel.0, kernel.1], INIT_STD),
            group_size,
            bias: bias.then(|| Tensor::zeros(&[out_channels])),
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn kernel_extent(&self) -> (usize, usize) {
        (self.kernels.shape()[2], self.kernels.shape()[3])
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor {
        &mut self.kernels
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    /// Kernels and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut Tensor, Option<&mut Tensor>) {
        (&mut self.kernels, self.bias.as_mut())
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        let (kh, kw) = self.kernel_extent();
        geometry(x, self.out_channels(), self.group_size, kh, kw, self.padding)
    }

    /// Raw convolution output.
    ///
    /// Valid padding gives `[(T/g) * M_out, 1, 1]`; same padding gives
    /// `[(T/g) * M_out, H, W]`. Channel `j * M_out + m` is kernel `m`
    /// applied to group `j`.
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let m = self.out_channels();
        let mut out = conv_forward(x.data(), self.kernels.data(), |k| k % m, &g);
        if let Some(b) = &self.bias {
            add_bias(&mut out, b.data(), |k| k % m, &g);
        }
        let p = x.precision().combine(self.kernels.precision());
        Ok(Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], out, p))
    }

    /// [`forward_raw`](Self::forward_raw) reshaped to a caller-chosen
    /// geometry, e.g. `[T, H, W]` for a projection or `[T/g, M_out]` for
    /// the flat view.
    pub fn forward(&self, x: &Tensor, target: &[usize]) -> Result<Tensor> {
        self.forward_raw(x)?.reshape(target)
    }

    /// Adjoint of [`forward_raw`](Self::forward_raw).
    pub fn backward(&self, x: &Tensor, grad_raw: &Tensor) -> Result<ConvGrads> {
        let g = self.geometry(x)?;
        grad_raw.expect_shape("shared conv grad", &[g.c_out, g.out_h, g.out_w])?;
        let m = self.out_channels();
        let (dx, dk) = conv_backward(x.data(), self.kernels.data(), |k| k % m, &g, grad_raw.data());
        let p = grad_raw.precision();
        Ok(ConvGrads {
            input: Tensor::from_parts(x.shape().to_vec(), dx, p),
            kernels: Tensor::from_parts(self.kernels.shape().to_vec(), dk, p),
            bias: self
                .bias
                .as_ref()
                .map(|_| Tensor::from_parts(vec![m], bias_grad(grad_raw.data(), m, |k| k % m, &g), p)),
        })
    }

    /// The dense layer this bank computes under valid padding.
    pub fn to_linear(&self) -> LinearEquivalent {
        let s = self.kernels.shape();
        LinearEquivalent {
            weight: self
                .kernels
                .reshape(&[s[0], s[1] * s[2] * s[3]])
                .expect("element count preserved"),
            bias: self.bias.clone(),
        }
    }

    /// Builds a valid-padding bank from a dense weight `[M_out, g*Kh*Kw]`.
    pub fn from_linear(weq: &LinearEquivalent, group_size: usize, kh: usize, kw: usize) -> Result<Self> {
        let s = weq.weight.shape();
        if s.len() != 2 || group_size == 0 || s[1] != group_size * kh * kw {
            return config_err(format!(
                "weight {s:?} cannot be a bank of group size {group_size} with {kh}x{kw} kernels"
            ));
        }
        Self::new(
            weq.weight.reshape(&[s[0], group_size, kh, kw])?,
            group_size,
            weq.bias.clone(),
            PaddingMode::Valid,
        )
    }

    /// Materialises one independent copy of the bank per group.
    pub fn unshared_variant(&self, tokens: usize) -> Result<UnsharedGroupedConv> {
        if tokens == 0 || tokens % self.group_size != 0 {
            return config_err(format!(
                "{tokens} tokens not divisible by group size {}",
                self.group_size
            ));
        }
        let copies = tokens / self.group_size;
        let banks = vec![self.kernels.clone(); copies];
        let bias = match &self.bias {
            Some(b) => Some(Tensor::concat(&vec![b.clone(); copies])?),
            None => None,
        };
        Ok(UnsharedGroupedConv {
            kernels: Tensor::concat(&banks)?,
            copies,
            group_size: self.group_size,
            bias,
            padding: self.padding,
        })
    }
}

/// Dense weight matrix equivalent to a shared bank under valid padding.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearEquivalent {
    /// `[M_out, g*Kh*Kw]`; row `m` is kernel `m` flattened row-major.
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl LinearEquivalent {
    /// Flattens each group of `g` tokens and multiplies by the weight:
    /// returns `[T/g, M_out]`.
    pub fn apply(&self, x: &Tensor, group_size: usize) -> Result<Tensor> {
        x.expect_rank("linear input", 3)?;
        let (m, fan_in) = (self.weight.shape()[0], self.weight.shape()[1]);
        let t = x.shape()[0];
        let token = x.shape()[1] * x.shape()[2];
        if group_size == 0 || t % group_size != 0 {
            return config_err(format!("{t} tokens not divisible by group size {group_size}"));
        }
        if group_size * token != fan_in {
            return dim_err(format!(
                "flattened group of {} features does not match weight fan-in {fan_in}",
                group_size * token
            ));
        }
        let n = t / group_size;
        let w = self.weight.data();
        let mut out = vec![0.0; n * m];
        for j in 0..n {
            let v = &x.data()[j * fan_in..(j + 1) * fan_in];
            for r in 0..m {
                let row = &w[r * fan_in..(r + 1) * fan_in];
                out[j * m + r] = row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>()
                    + self.bias.as_ref().map_or(0.0, |b| b.data()[r]);
            }
        }
        Ok(Tensor::from_parts(vec![n, m], out, x.precision()))
    }
}

/// Independent kernel bank per group: the non-shared depthwise ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnsharedGroupedConv {
    /// `[copies * M_out, g, Kh, Kw]`; copy `j` occupies rows `j*M_out..`.
    kernels: Tensor,
    copies: usize,
    group_size: usize,
    bias: Option<Tensor>,
    padding: PaddingMode,
}

impl UnsharedGroupedConv {
    pub fn copies(&self) -> usize {
        self.copies
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.shape()[0] / self.copies
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn padding(&self) -> PaddingMode {
        self.padding
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor {
        &mut self.kernels
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        self.bias.as_mut()
    }

    /// Kernels and bias borrowed together.
    pub fn params_mut(&mut self) -> (&mut Tensor, Option<&mut Tensor>) {
        (&mut self.kernels, self.bias.as_mut())
    }

    /// Kernel bank of copy `j`.
    pub fn copy_bank(&self, j: usize) -> Result<Tensor> {
        if j >= self.copies {
            return dim_err(format!("copy {j} out of range ({} copies)", self.copies));
        }
        let m = self.out_channels();
        let s = self.kernels.shape();
        let len = m * s[1] * s[2] * s[3];
        Tensor::new(
            vec![m, s[1], s[2], s[3]],
            self.kernels.data()[j * len..(j + 1) * len].to_vec(),
        )
    }

    fn geometry(&self, x: &Tensor) -> Result<ConvGeometry> {
        let s = self.kernels.shape();
        let g = geometry(x, self.out_channels(), self.group_size, s[2], s[3], self.padding)?;
        if g.groups != self.copies {
            return config_err(format!(
                "layer holds {} banks but input has {} groups",
                self.copies, g.groups
            ));
        }
        Ok(g)
    }

    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let mut out = conv_forward(x.data(), self.kernels.data(), |k| k, &g);
        if let Some(b) = &self.bias {
            add_bias(&mut out, b.data(), |k| k, &g);
        }
        let p = x.precision().combine(self.kernels.precision());
        Ok(Tensor::from_parts(vec![g.c_out, g.out_h, g.out_w], out, p))
    }

    pub fn backward(&self, x: &Tensor, grad_raw: &Tensor) -> Result<ConvGrads> {
        let g = self.geometry(x)?;
        grad_raw.expect_shape("unshared conv grad", &[g.c_out, g.out_h, g.out_w])?;
        let (dx, dk) = conv_backward(x.data(), self.kernels.data(), |k| k, &g, grad_raw.data());
        let p = grad_raw.precision();
        Ok(ConvGrads {
            input: Tensor::from_parts(x.shape().to_vec(), dx, p),
            kernels: Tensor::from_parts(self.kernels.shape().to_vec(), dk, p),
            bias: self
                .bias
                .as_ref()
                .map(|b| Tensor::from_parts(b.shape().to_vec(), bias_grad(grad_raw.data(), g.c_out, |k| k, &g), p)),
        })
    }
}

/// A token-wise projection with either shared or per-group weights.
#[derive(Clone, Debug, PartialEq)]
pub enum Projection {
    Shared(SharedGroupedConv),
    Unshared(UnsharedGroupedConv),
}

impl Projection {
    pub fn forward_raw(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Projection::Shared(l) => l.forward_raw(x),
            Projection::Unshared(l) => l.forward_raw(x),
        }
    }

    pub fn backward(&self, x: &Tensor, grad_raw: &Tensor) -> Result<ConvGrads> {
        match self {
            Projection::Shared(l) => l.backward(x, grad_raw),
            Projection::Unshared(l) => l.backward(x, grad_raw),
        }
    }

    pub fn padding(&self) -> PaddingMode {
        match self {
            Projection::Shared(l) => l.padding(),
            Projection::Unshared(l) => l.padding(),
        }
    }

    pub fn kernels(&self) -> &Tensor {
        match self {
            Projection::Shared(l) => l.kernels(),
            Projection::Unshared(l) => l.kernels(),
        }
    }

    pub fn kernels_mut(&mut self) -> &mut Tensor {
        match self {
            Projection::Shared(l) => l.kernels_mut(),
            Projection::Unshared(l) => l.kernels_mut(),
        }
    }

    pub fn bias(&self) -> Option<&Tensor> {
        match self {
            Projection::Shared(l) => l.bias(),
            Projection::Unshared(l) => l.bias(),
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Projection::Shared(l) => l.bias_mut(),
            Projection::Unshared(l) => l.bias_mut(),
        }
    }

    pub fn params_mut(&mut self) -> (&mut Tensor, Option<&mut Tensor>) {
        match self {
            Projection::Shared(l) => l.params_mut(),
            Projection::Unshared(l) => l.params_mut(),
        }
    }

    pub fn as_shared(&self) -> Option<&SharedGroupedConv> {
        match self {
            Projection::Shared(l) => Some(l),
            Projection::Unshared(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::conv2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Explicit sum over the group's flattened pixels.
    fn dense_oracle(x: &Tensor, kernels: &Tensor, g: usize) -> Vec<Vec<f64>> {
        let (t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let m = kernels.shape()[0];
        (0..t / g)
            .map(|j| {
                (0..m)
                    .map(|r| {
                        let mut acc = 0.0;
                        for c in 0..g {
                            for a in 0..h {
                                for b in 0..w {
                                    acc += x.get(&[j * g + c, a, b]).unwrap()
                                        * kernels.get(&[r, c, a, b]).unwrap();
                                }
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn selector_kernel_picks_top_left_pixel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[5, 3, 3]);
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 0, 0], 1.0).unwrap();
        let layer = SharedGroupedConv::new(k, 1, None, PaddingMode::Valid).unwrap();
        let y = layer.forward(&x, &[5]).unwrap();
        for t in 0..5 {
            assert_eq!(y.data()[t], x.get(&[t, 0, 0]).unwrap());
        }
    }

    #[test]
    fn paper_scale_projection_has_65_times_169_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = SharedGroupedConv::init(&mut rng, 169, 1, (13, 13), PaddingMode::Valid, false);
        let x = rand_tensor(&mut rng, &[65, 13, 13]);
        let raw = layer.forward_raw(&x).unwrap();
        assert_eq!(raw.shape(), &[65 * 169, 1, 1]);
    }

    #[test]
    fn grouped_layer_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[4, 3, 3]);
        let k = rand_tensor(&mut rng, &[5, 2, 3, 3]);
        let layer = SharedGroupedConv::new(k.clone(), 2, None, PaddingMode::Valid).unwrap();
        let y = layer.forward(&x, &[2, 5]).unwrap();
        let oracle = dense_oracle(&x, &k, 2);
        for j in 0..2 {
            for m in 0..5 {
                assert!((y.get(&[j, m]).unwrap() - oracle[j][m]).abs() < 1e-12);
            }
        }
        let lin = layer.to_linear().apply(&x, 2).unwrap();
        assert!(lin.max_abs_diff(&y).unwrap() < 1e-12);
    }

    #[test]
    fn linear_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = SharedGroupedConv::new(
            rand_tensor(&mut rng, &[6, 2, 3, 4]),
            2,
            Some(rand_tensor(&mut rng, &[6])),
            PaddingMode::Valid,
        )
        .unwrap();
        let back = SharedGroupedConv::from_linear(&layer.to_linear(), 2, 3, 4).unwrap();
        assert_eq!(back, layer);
        assert!(SharedGroupedConv::from_linear(&layer.to_linear(), 1, 3, 4).is_err());
    }

    #[test]
    fn identity_weight_returns_flattened_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 2 * 2 * 3;
        let eye = Tensor::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
        let layer = SharedGroupedConv::from_linear(
            &LinearEquivalent {
                weight: eye,
                bias: None,
            },
            2,
            2,
            3,
        )
        .unwrap();
        let x = rand_tensor(&mut rng, &[6, 2, 3]);
        let y = layer.forward(&x, &[3, n]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn configuration_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let layer = SharedGroupedConv::init(&mut rng, 3, 2, (3, 3), PaddingMode::Valid, false);
        assert!(matches!(
            layer.forward_raw(&Tensor::zeros(&[5, 3, 3])),
            Err(crate::Error::Config(_))
        ));
        assert!(matches!(
            layer.forward_raw(&Tensor::zeros(&[4, 4, 4])),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn same_padding_path_is_plain_grouped_conv_with_repeated_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let layer = SharedGroupedConv::new(k.clone(), 1, None, PaddingMode::Same).unwrap();
        let x = rand_tensor(&mut rng, &[3, 4, 4]);
        let repeated = Tensor::concat(&[k.clone(), k.clone(), k]).unwrap();
        let expect = conv2d(&x, &repeated, PaddingMode::Same, 3).unwrap();
        assert_eq!(layer.forward_raw(&x).unwrap(), expect);
    }

    #[test]
    fn unshared_copies_start_identical_and_stay_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = SharedGroupedConv::init(&mut rng, 4, 1, (3, 3), PaddingMode::Valid, true);
        let mut un = layer.unshared_variant(3).unwrap();
        let x = rand_tensor(&mut rng, &[3, 3, 3]);
        let base = layer.forward_raw(&x).unwrap();
        assert_eq!(un.forward_raw(&x).unwrap(), base);

        for v in &mut un.kernels_mut().data_mut()[..4 * 9] {
            *v += 0.25;
        }
        let moved = un.forward_raw(&x).unwrap();
        for k in 0..12 {
            let changed = moved.data()[k] != base.data()[k];
            assert_eq!(changed, k < 4, "channel {k}");
        }
    }

    #[test]
    fn unshared_gradient_touches_only_its_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = SharedGroupedConv::init(&mut rng, 2, 2, (2, 2), PaddingMode::Valid, false);
        let un = layer.unshared_variant(6).unwrap();
        let x = rand_tensor(&mut rng, &[6, 2, 2]);
        let dy = rand_tensor(&mut rng, &[6, 1, 1]);
        let grads = un.backward(&x, &dy).unwrap();
        // Finite differences on copy 1 (tokens 2 and 3).
        let loss = |l: &UnsharedGroupedConv| -> f64 {
            l.forward_raw(&x).unwrap().data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        let copy_len = 2 * 2 * 2 * 2;
        for i in 0..un.kernels().len() {
            let mut p = un.clone();
            p.kernels_mut().data_mut()[i] += h;
            let mut m = un.clone();
            m.kernels_mut().data_mut()[i] -= h;
            let fd = (loss(&p) - loss(&m)) / (2.0 * h);
            assert!((fd - grads.kernels.data()[i]).abs() < 1e-8);
        }
        // Gradient of copy 1 depends only on tokens 2..4.
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[..8] {
            *v += 1.0;
        }
        let g2 = un.backward(&x2, &dy).unwrap();
        assert_eq!(
            grads.kernels.data()[copy_len..2 * copy_len],
            g2.kernels.data()[copy_len..2 * copy_len]
        );
    }
}
