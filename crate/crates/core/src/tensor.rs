//! Dense row-major tensors and the deterministic arithmetic every layer is
//! built from: grouped 2D correlation, transpose convolution, softmax,
//! token-wise layer normalisation and GELU, each with its adjoint.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};

/// Numeric precision a tensor is held at.
///
/// Storage is always `f64`; a `Single` tensor has every element rounded to
/// the nearest `f32` after each operation that produces it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }

    /// Result precision of an operation mixing `self` and `other`.
    pub fn combine(self, other: Precision) -> Precision {
        if self == Precision::Single || other == Precision::Single {
            Precision::Single
        } else {
            Precision::Double
        }
    }
}

/// Spatial padding applied by [`conv2d`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// No padding: output extent is `input - kernel + 1`.
    #[default]
    Valid,
    /// Zero padding that preserves the input extent. Odd totals put the
    /// extra zero on the trailing side.
    Same,
}

impl PaddingMode {
    /// Leading and trailing padding for one spatial axis.
    pub fn pads(self, kernel: usize) -> (usize, usize) {
        match self {
            PaddingMode::Valid => (0, 0),
            PaddingMode::Same => {
                let total = kernel - 1;
                let lead = total / 2;
                (lead, total - lead)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::with_precision(shape, data, Precision::Double)
    }

    pub fn with_precision(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return dim_err(format!("shape {shape:?} has a zero extent"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return dim_err(format!(
                "shape {shape:?} holds {n} elements but {} were supplied",
                data.len()
            ));
        }
        Ok(Self::from_parts(shape, data, precision))
    }

    /// Builds a tensor whose shape is already known to match, rounding to
    /// `precision`.
    pub(crate) fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if precision == Precision::Single {
            for v in &mut data {
                *v = precision.round(*v);
            }
        }
        Tensor {
            shape,
            data,
            precision,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            precision: Precision::Double,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            precision: Precision::Double,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            precision: Precision::Double,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable element access. Callers writing into a `Single` tensor are
    /// responsible for keeping values on the `f32` grid.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), precision)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, index: &[usize]) -> Result<usize> {
        if index.len() != self.shape.len() {
            return dim_err(format!(
                "index rank {} does not match tensor rank {}",
                index.len(),
                self.shape.len()
            ));
        }
        let mut off = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return dim_err(format!("index {index:?} out of bounds for {:?}", self.shape));
            }
            off = off * d + i;
        }
        Ok(off)
    }

    pub fn get(&self, index: &[usize]) -> Result<f64> {
        Ok(self.data[self.offset(index)?])
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        let off = self.offset(index)?;
        self.data[off] = self.precision.round(value);
        Ok(())
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.data.len() || new_shape.iter().any(|&d| d == 0) {
            return dim_err(format!(
                "cannot reshape {:?} ({} elements) into {new_shape:?}",
                self.shape,
                self.data.len()
            ));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
            precision: self.precision,
        })
    }

    /// Reorders axes so that output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if order.len() != rank {
            return dim_err(format!("axis order {order:?} is not a permutation of {rank} axes"));
        }
        for &a in order {
            if a >= rank || seen[a] {
                return dim_err(format!("axis order {order:?} is not a permutation of {rank} axes"));
            }
            seen[a] = true;
        }
        let new_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let mut in_strides = vec![1usize; rank];
        for a in (0..rank.saturating_sub(1)).rev() {
            in_strides[a] = in_strides[a + 1] * self.shape[a + 1];
        }
        let strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.data.len());
        let mut idx = vec![0usize; rank];
        for _ in 0..self.data.len() {
            let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out.push(self.data[off]);
            for a in (0..rank).rev() {
                idx[a] += 1;
                if idx[a] < new_shape[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Ok(Tensor {
            shape: new_shape,
            data: out,
            precision: self.precision,
        })
    }

    /// Sub-tensor at position `i` of the leading axis.
    pub fn outer(&self, i: usize) -> Result<Tensor> {
        if self.shape.len() < 2 || i >= self.shape[0] {
            return dim_err(format!("outer index {i} invalid for {:?}", self.shape));
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
            precision: self.precision,
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(p) => p,
            None => return dim_err("cannot stack zero tensors"),
        };
        let mut data = Vec::with_capacity(first.len() * parts.len());
        let mut precision = Precision::Double;
        for p in parts {
            if p.shape != first.shape {
                return dim_err(format!("stack shape mismatch {:?} vs {:?}", p.shape, first.shape));
            }
            precision = precision.combine(p.precision);
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor::from_parts(shape, data, precision))
    }

    /// Concatenates along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = match parts.first() {
            Some(p) => p,
            None => return dim_err("cannot concatenate zero tensors"),
        };
        let mut lead = 0;
        let mut data = Vec::new();
        let mut precision = Precision::Double;
        for p in parts {
            if p.shape.len() != first.shape.len() || p.shape[1..] != first.shape[1..] {
                return dim_err(format!("concat shape mismatch {:?} vs {:?}", p.shape, first.shape));
            }
            lead += p.shape[0];
            precision = precision.combine(p.precision);
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor::from_parts(shape, data, precision))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            self.precision.combine(other.precision),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        let p = self.precision;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = p.round(*a + b);
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return dim_err(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// `max|a - b| / max|other|`, with the denominator floored at
    /// `f64::MIN_POSITIVE`.
    pub fn max_rel_diff(&self, other: &Tensor) -> Result<f64> {
        let d = self.max_abs_diff(other)?;
        Ok(d / other.max_abs().max(f64::MIN_POSITIVE))
    }

    pub(crate) fn expect_shape(&self, what: &str, shape: &[usize]) -> Result<()> {
        if self.shape != shape {
            return dim_err(format!("{what}: expected shape {shape:?}, got {:?}", self.shape));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, what: &str, rank: usize) -> Result<()> {
        if self.shape.len() != rank {
            return dim_err(format!("{what}: expected rank {rank}, got shape {:?}", self.shape));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Resolved geometry of a grouped 2D correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        height: usize,
        width: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        groups: usize,
        padding: PaddingMode,
    ) -> Result<Self> {
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return config_err(format!(
                "groups={groups} must divide input channels {c_in} and output channels {c_out}"
            ));
        }
        let (pt, pb) = padding.pads(kh);
        let (pl, pr) = padding.pads(kw);
        let ph = height + pt + pb;
        let pw = width + pl + pr;
        if kh > ph || kw > pw {
            return dim_err(format!(
                "kernel {kh}x{kw} exceeds padded input {ph}x{pw}"
            ));
        }
        Ok(ConvGeometry {
            c_in,
            height,
            width,
            c_out,
            kh,
            kw,
            groups,
            pad_top: pt,
            pad_left: pl,
            out_h: ph - kh + 1,
            out_w: pw - kw + 1,
        })
    }

    /// Unpadded kernels covering the whole input plane: every output is a
    /// single dot product.
    fn is_full_extent(&self) -> bool {
        self.kh == self.height && self.kw == self.width && self.out_h == 1 && self.out_w == 1
    }

    pub fn kernel_len(&self) -> usize {
        (self.c_in / self.groups) * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.c_out * self.out_h * self.out_w
    }

    /// Output positions `o` along one axis with `o + k - pad` inside `[0, n)`.
    #[inline]
    fn range(out: usize, k: usize, pad: usize, n: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (n + pad).saturating_sub(k).min(out);
        (lo, hi.max(lo))
    }
}

/// Grouped correlation over a kernel bank. Output channel `k` uses the
/// kernel at bank slot `slot(k)`; this lets one bank serve many groups
/// without being materialised per group.
pub(crate) fn conv_forward(
    x: &[f64],
    bank: &[f64],
    slot: impl Fn(usize) -> usize,
    g: &ConvGeometry,
) -> Vec<f64> {
    let cpg_in = g.c_in / g.groups;
    let cpg_out = g.c_out / g.groups;
    let klen = g.kernel_len();
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.out_len()];
    if g.is_full_extent() {
        // One dot product per output channel over a contiguous group.
        for (k, o) in out.iter_mut().enumerate() {
            let xg = &x[(k / cpg_out) * klen..][..klen];
            let kern = &bank[slot(k) * klen..][..klen];
            *o = xg.iter().zip(kern).map(|(a, b)| a * b).sum();
        }
        return out;
    }
    for k in 0..g.c_out {
        let grp = k / cpg_out;
        let kern = &bank[slot(k) * klen..][..klen];
        let o = &mut out[k * oplane..][..oplane];
        for ci in 0..cpg_in {
            let xc = &x[(grp * cpg_in + ci) * plane..][..plane];
            for i in 0..g.kh {
                let (p0, p1) = ConvGeometry::range(g.out_h, i, g.pad_top, g.height);
                for j in 0..g.kw {
                    let wv = kern[(ci * g.kh + i) * g.kw + j];
                    let (q0, q1) = ConvGeometry::range(g.out_w, j, g.pad_left, g.width);
                    for p in p0..p1 {
                        let row = (p + i - g.pad_top) * g.width;
                        let orow = p * g.out_w;
                        for q in q0..q1 {
                            o[orow + q] += wv * xc[row + q + j - g.pad_left];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`conv_forward`]: returns the input gradient and the gradient
/// of every bank slot (slots shared by several output channels accumulate).
pub(crate) fn conv_backward(
    x: &[f64],
    bank: &[f64],
    slot: impl Fn(usize) -> usize,
    g: &ConvGeometry,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let cpg_in = g.c_in / g.groups;
    let cpg_out = g.c_out / g.groups;
    let klen = g.kernel_len();
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.len()];
    let mut dbank = vec![0.0; bank.len()];
    if g.is_full_extent() {
        for (k, &d) in dy.iter().enumerate() {
            let base = (k / cpg_out) * klen;
            let s = slot(k) * klen;
            let xg = &x[base..][..klen];
            let kern = &bank[s..][..klen];
            for (db, xv) in dbank[s..][..klen].iter_mut().zip(xg) {
                *db += d * xv;
            }
            for (dxv, kv) in dx[base..][..klen].iter_mut().zip(kern) {
                *dxv += d * kv;
            }
        }
        return (dx, dbank);
    }
    for k in 0..g.c_out {
        let grp = k / cpg_out;
        let s = slot(k) * klen;
        let dyk = &dy[k * oplane..][..oplane];
        for ci in 0..cpg_in {
            let c = grp * cpg_in + ci;
            let xc = &x[c * plane..][..plane];
            for i in 0..g.kh {
                let (p0, p1) = ConvGeometry::range(g.out_h, i, g.pad_top, g.height);
                for j in 0..g.kw {
                    let widx = s + (ci * g.kh + i) * g.kw + j;
                    let wv = bank[widx];
                    let (q0, q1) = ConvGeometry::range(g.out_w, j, g.pad_left, g.width);
                    let mut acc = 0.0;
                    for p in p0..p1 {
                        let row = (p + i - g.pad_top) * g.width;
                        let orow = p * g.out_w;
                        for q in q0..q1 {
                            let xi = row + q + j - g.pad_left;
                            let d = dyk[orow + q];
                            acc += d * xc[xi];
                            dx[c * plane + xi] += wv * d;
                        }
                    }
                    dbank[widx] += acc;
                }
            }
        }
    }
    (dx, dbank)
}

fn conv_geometry(input: &Tensor, kernels: &Tensor, padding: PaddingMode, groups: usize) -> Result<ConvGeometry> {
    input.expect_rank("conv2d input", 3)?;
    kernels.expect_rank("conv2d kernels", 4)?;
    let (c_in, h, w) = (input.shape[0], input.shape[1], input.shape[2]);
    let (c_out, kc, kh, kw) = (
        kernels.shape[0],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    );
    if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
        return config_err(format!(
            "groups={groups} must divide input channels {c_in} and output channels {c_out}"
        ));
    }
    if kc * groups != c_in {
        return dim_err(format!(
            "kernel depth {kc} x groups {groups} != input channels {c_in}"
        ));
    }
    ConvGeometry::new(c_in, h, w, c_out, kh, kw, groups, padding)
}

/// Grouped 2D cross-correlation.
///
/// `Y[k,p,q] = sum_c sum_i sum_j X[c, p+i, q+j] * W[k, c, i, j]`, with `c`
/// restricted to the group of output channel `k`. No kernel flip.
pub fn conv2d(input: &Tensor, kernels: &Tensor, padding: PaddingMode, groups: usize) -> Result<Tensor> {
    let g = conv_geometry(input, kernels, padding, groups)?;
    let out = conv_forward(&input.data, &kernels.data, |k| k, &g);
    Ok(Tensor::from_parts(
        vec![g.c_out, g.out_h, g.out_w],
        out,
        input.precision.combine(kernels.precision),
    ))
}

/// Gradients of [`conv2d`] with respect to its input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    padding: PaddingMode,
    groups: usize,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(input, kernels, padding, groups)?;
    grad_output.expect_shape("conv2d grad_output", &[g.c_out, g.out_h, g.out_w])?;
    let (dx, dk) = conv_backward(&input.data, &kernels.data, |k| k, &g, &grad_output.data);
    let p = input.precision.combine(kernels.precision);
    Ok((
        Tensor::from_parts(input.shape.clone(), dx, p),
        Tensor::from_parts(kernels.shape.clone(), dk, p),
    ))
}

/// Transpose convolution with kernels `[C_in, C_out, Kh, Kw]` and equal
/// stride on both axes. Output extent is `(H - 1) * stride + Kh`.
pub fn conv_transpose2d(input: &Tensor, kernels: &Tensor, stride: usize) -> Result<Tensor> {
    let (ci, h, w, co, kh, kw) = transpose_dims(input, kernels, stride)?;
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    let mut out = vec![0.0; co * oh * ow];
    for c in 0..ci {
        for i in 0..h {
            for j in 0..w {
                let v = input.data[(c * h + i) * w + j];
                for o in 0..co {
                    let kern = &kernels.data[(c * co + o) * kh * kw..][..kh * kw];
                    for a in 0..kh {
                        let row = (o * oh + i * stride + a) * ow + j * stride;
                        for b in 0..kw {
                            out[row + b] += v * kern[a * kw + b];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(
        vec![co, oh, ow],
        out,
        input.precision.combine(kernels.precision),
    ))
}

/// Gradients of [`conv_transpose2d`] with respect to input and kernels.
pub fn conv_transpose2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (ci, h, w, co, kh, kw) = transpose_dims(input, kernels, stride)?;
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    grad_output.expect_shape("conv_transpose2d grad_output", &[co, oh, ow])?;
    let mut dx = vec![0.0; input.len()];
    let mut dk = vec![0.0; kernels.len()];
    for c in 0..ci {
        for i in 0..h {
            for j in 0..w {
                let xi = (c * h + i) * w + j;
                let v = input.data[xi];
                let mut acc = 0.0;
                for o in 0..co {
                    let kbase = (c * co + o) * kh * kw;
                    for a in 0..kh {
                        let row = (o * oh + i * stride + a) * ow + j * stride;
                        for b in 0..kw {
                            let d = grad_output.data[row + b];
                            acc += d * kernels.data[kbase + a * kw + b];
                            dk[kbase + a * kw + b] += d * v;
                        }
                    }
                }
                dx[xi] = acc;
            }
        }
    }
    let p = input.precision.combine(kernels.precision);
    Ok((
        Tensor::from_parts(input.shape.clone(), dx, p),
        Tensor::from_parts(kernels.shape.clone(), dk, p),
    ))
}

fn transpose_dims(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    input.expect_rank("conv_transpose2d input", 3)?;
    kernels.expect_rank("conv_transpose2d kernels", 4)?;
    if stride == 0 {
        return config_err("transpose convolution stride must be positive");
    }
    if kernels.shape[0] != input.shape[0] {
        return dim_err(format!(
            "transpose kernels expect {} input channels, got {}",
            kernels.shape[0], input.shape[0]
        ));
    }
    Ok((
        input.shape[0],
        input.shape[1],
        input.shape[2],
        kernels.shape[1],
        kernels.shape[2],
        kernels.shape[3],
    ))
}

// ---------------------------------------------------------------------------
// Softmax, layer norm, GELU
// ---------------------------------------------------------------------------

fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return dim_err(format!("softmax axis {axis} out of range for {:?}", x.shape));
    }
    let (outer, n, inner) = axis_strides(&x.shape, axis);
    let mut out = vec![0.0; x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let m = (0..n).map(|a| x.data[at(a)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for a in 0..n {
                let e = (x.data[at(a)] - m).exp();
                out[at(a)] = e;
                z += e;
            }
            for a in 0..n {
                out[at(a)] /= z;
            }
        }
    }
    Ok(Tensor::from_parts(x.shape.clone(), out, x.precision))
}

/// Adjoint of [`softmax`] given its output `s`.
pub fn softmax_backward(s: &Tensor, axis: usize, grad_output: &Tensor) -> Result<Tensor> {
    if axis >= s.rank() {
        return dim_err(format!("softmax axis {axis} out of range for {:?}", s.shape));
    }
    grad_output.expect_shape("softmax grad_output", &s.shape)?;
    let (outer, n, inner) = axis_strides(&s.shape, axis);
    let mut dx = vec![0.0; s.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| (o * n + a) * inner + i;
            let dot: f64 = (0..n).map(|a| s.data[at(a)] * grad_output.data[at(a)]).sum();
            for a in 0..n {
                dx[at(a)] = s.data[at(a)] * (grad_output.data[at(a)] - dot);
            }
        }
    }
    Ok(Tensor::from_parts(s.shape.clone(), dx, s.precision))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Output of [`layer_norm`] with the statistics its adjoint needs.
#[derive(Clone, Debug)]
pub struct LayerNormOutput {
    pub output: Tensor,
    /// Normalised tokens before the affine transform.
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalises every `[H, W]` token of `x: [T, H, W]` to zero mean and unit
/// variance, then applies `gain` and `offset`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, offset: &Tensor, eps: f64) -> Result<LayerNormOutput> {
    x.expect_rank("layer_norm input", 3)?;
    let (t, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    gain.expect_shape("layer_norm gain", &[h, w])?;
    offset.expect_shape("layer_norm offset", &[h, w])?;
    if eps <= 0.0 {
        return config_err("layer_norm eps must be positive");
    }
    let n = h * w;
    let p = x.precision.combine(gain.precision).combine(offset.precision);
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(t);
    for tok in 0..t {
        let s = &x.data[tok * n..][..n];
        let mean = s.iter().sum::<f64>() / n as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let r = 1.0 / (var + eps).sqrt();
        inv_std.push(r);
        for f in 0..n {
            let z = (s[f] - mean) * r;
            xhat[tok * n + f] = z;
            out[tok * n + f] = z * gain.data[f] + offset.data[f];
        }
    }
    Ok(LayerNormOutput {
        output: Tensor::from_parts(x.shape.clone(), out, p),
        normalized: Tensor::from_parts(x.shape.clone(), xhat, Precision::Double),
        inv_std,
    })
}

/// Adjoint of [`layer_norm`]: returns `(d_input, d_gain, d_offset)`.
pub fn layer_norm_backward(
    cache: &LayerNormOutput,
    gain: &Tensor,
    grad_output: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let xhat = &cache.normalized;
    grad_output.expect_shape("layer_norm grad_output", &xhat.shape)?;
    let (t, h, w) = (xhat.shape[0], xhat.shape[1], xhat.shape[2]);
    gain.expect_shape("layer_norm gain", &[h, w])?;
    let n = h * w;
    let mut dx = vec![0.0; xhat.len()];
    let mut dg = vec![0.0; n];
    let mut db = vec![0.0; n];
    let mut dn = vec![0.0; n];
    for tok in 0..t {
        let z = &xhat.data[tok * n..][..n];
        let dy = &grad_output.data[tok * n..][..n];
        for f in 0..n {
            dg[f] += dy[f] * z[f];
            db[f] += dy[f];
            dn[f] = dy[f] * gain.data[f];
        }
        let mean_dn = dn.iter().sum::<f64>() / n as f64;
        let mean_dnz = dn.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let r = cache.inv_std[tok];
        for f in 0..n {
            dx[tok * n + f] = r * (dn[f] - mean_dn - z[f] * mean_dnz);
        }
    }
    let p = grad_output.precision;
    Ok((
        Tensor::from_parts(xhat.shape.clone(), dx, p),
        Tensor::from_parts(vec![h, w], dg, p),
        Tensor::from_parts(vec![h, w], db, p),
    ))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    x.zip_with(grad_output, |v, d| d * gelu_grad_scalar(v))
}
