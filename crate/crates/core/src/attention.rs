//! Multi-head self-attention built only from convolutions.
//!
//! Tokens are `[H, W]` matrices. Heads are carved out as a `√heads × √heads`
//! grid of sub-patches, so every head sees an `[h, w]` piece of every token.
//! Per head:
//!
//! 1. Q, K and V come from shared depthwise convolutions with full-extent
//!    kernels (valid padding), reshaped back to `[T, h, w]`.
//! 2. Scores are the all-to-all valid correlation of Q with K, which is the
//!    shared layer whose kernel bank *is* K.
//! 3. The softmaxed score matrix becomes the kernel bank of a pointwise
//!    (1×1) convolution over the value tokens.
//!
//! Head outputs are written back to the sub-patch they came from.

use rand::Rng;

use crate::error::{config_err, dim_err, Result};
use crate::linear::{Projection, SharedGroupedConv};
use crate::tensor::{conv2d, conv2d_backward, softmax, softmax_backward, PaddingMode, Tensor};

/// How a `[H, W]` token is divided among attention heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadGeometry {
    pub heads: usize,
    /// Heads per row/column of the sub-patch grid (`√heads`).
    pub grid: usize,
    pub token_h: usize,
    pub token_w: usize,
    pub head_h: usize,
    pub head_w: usize,
}

impl HeadGeometry {
    pub fn new(heads: usize, token_h: usize, token_w: usize) -> Result<Self> {
        if heads == 0 {
            return config_err("head count must be positive");
        }
        let grid = (heads as f64).sqrt().round() as usize;
        if grid * grid != heads {
            return config_err(format!("head count {heads} is not a perfect square"));
        }
        if token_h % grid != 0 || token_w % grid != 0 {
            return config_err(format!(
                "{token_h}x{token_w} tokens cannot be split into a {grid}x{grid} head grid"
            ));
        }
        Ok(HeadGeometry {
            heads,
            grid,
            token_h,
            token_w,
            head_h: token_h / grid,
            head_w: token_w / grid,
        })
    }

    /// Per-head token dimension `d = h * w`.
    pub fn head_dim(&self) -> usize {
        self.head_h * self.head_w
    }

    pub fn token_dim(&self) -> usize {
        self.token_h * self.token_w
    }

    /// Row-major `[H, W]` offset of feature `f` in head-major order, where
    /// head `k` owns features `k*d .. (k+1)*d` laid out row-major within
    /// its sub-patch.
    pub fn head_major_to_spatial(&self, f: usize) -> usize {
        let d = self.head_dim();
        let (k, r) = (f / d, f % d);
        let (a, b) = (r / self.head_w, r % self.head_w);
        let (gr, gc) = (k / self.grid, k % self.grid);
        (gr * self.head_h + a) * self.token_w + gc * self.head_w + b
    }

    fn check(&self, x: &Tensor) -> Result<usize> {
        x.expect_rank("attention input", 3)?;
        if x.shape()[1] != self.token_h || x.shape()[2] != self.token_w {
            return dim_err(format!(
                "tokens {:?} do not match head geometry {}x{}",
                &x.shape()[1..],
                self.token_h,
                self.token_w
            ));
        }
        Ok(x.shape()[0])
    }
}

/// Splits `[T, H, W]` into one `[T, h, w]` tensor per head, row-major over
/// the head grid.
pub fn split_heads(x: &Tensor, geom: &HeadGeometry) -> Result<Vec<Tensor>> {
    let t = geom.check(x)?;
    let (hh, hw, w) = (geom.head_h, geom.head_w, geom.token_w);
    let plane = geom.token_dim();
    let mut parts = Vec::with_capacity(geom.heads);
    for k in 0..geom.heads {
        let (r0, c0) = ((k / geom.grid) * hh, (k % geom.grid) * hw);
        let mut data = Vec::with_capacity(t * hh * hw);
        for tok in 0..t {
            for a in 0..hh {
                let row = tok * plane + (r0 + a) * w + c0;
                data.extend_from_slice(&x.data()[row..row + hw]);
            }
        }
        parts.push(Tensor::from_parts(vec![t, hh, hw], data, x.precision()));
    }
    Ok(parts)
}

/// Inverse of [`split_heads`].
pub fn merge_heads(parts: &[Tensor], geom: &HeadGeometry) -> Result<Tensor> {
    if parts.len() != geom.heads {
        return dim_err(format!("expected {} head outputs, got {}", geom.heads, parts.len()));
    }
    let t = parts[0].shape()[0];
    let (hh, hw, w) = (geom.head_h, geom.head_w, geom.token_w);
    let plane = geom.token_dim();
    let mut data = vec![0.0; t * plane];
    let mut precision = parts[0].precision();
    for (k, p) in parts.iter().enumerate() {
        p.expect_shape("head output", &[t, hh, hw])?;
        precision = precision.combine(p.precision());
        let (r0, c0) = ((k / geom.grid) * hh, (k % geom.grid) * hw);
        for tok in 0..t {
            for a in 0..hh {
                let row = tok * plane + (r0 + a) * w + c0;
                data[row..row + hw].copy_from_slice(&p.data()[(tok * hh + a) * hw..][..hw]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, geom.token_h, geom.token_w], data, precision))
}

/// Flattens `[T, H, W]` tokens into `[T, D]` rows in head-major feature order.
pub fn to_head_major(x: &Tensor, geom: &HeadGeometry) -> Result<Tensor> {
    let t = geom.check(x)?;
    let d = geom.token_dim();
    let mut out = vec![0.0; t * d];
    for tok in 0..t {
        for f in 0..d {
            out[tok * d + f] = x.data()[tok * d + geom.head_major_to_spatial(f)];
        }
    }
    Ok(Tensor::from_parts(vec![t, d], out, x.precision()))
}

/// Inverse of [`to_head_major`].
pub fn from_head_major(y: &Tensor, geom: &HeadGeometry) -> Result<Tensor> {
    let d = geom.token_dim();
    y.expect_rank("head-major rows", 2)?;
    if y.shape()[1] != d {
        return dim_err(format!("rows of {} features, expected {d}", y.shape()[1]));
    }
    let t = y.shape()[0];
    let mut out = vec![0.0; t * d];
    for tok in 0..t {
        for f in 0..d {
            out[tok * d + geom.head_major_to_spatial(f)] = y.data()[tok * d + f];
        }
    }
    Ok(Tensor::from_parts(vec![t, geom.token_h, geom.token_w], out, y.precision()))
}

fn score_layer(k: &Tensor) -> Result<SharedGroupedConv> {
    let s = k.shape();
    SharedGroupedConv::new(k.reshape(&[s[0], 1, s[1], s[2]])?, 1, None, PaddingMode::Valid)
}

/// `S[i, j] = <Q_i, K_j> / √d`, computed as `T × T` valid correlations of
/// full-extent operands.
pub fn attention_scores(q: &Tensor, k: &Tensor, d: f64) -> Result<Tensor> {
    q.expect_rank("query", 3)?;
    if q.shape() != k.shape() {
        return dim_err(format!("query {:?} and key {:?} differ", q.shape(), k.shape()));
    }
    let t = q.shape()[0];
    let raw = score_layer(k)?.forward_raw(q)?;
    Ok(raw.reshape(&[t, t])?.scale(1.0 / d.sqrt()))
}

fn attention_scores_backward(q: &Tensor, k: &Tensor, d: f64, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = q.shape()[0];
    let g = score_layer(k)?.backward(q, &grad.scale(1.0 / d.sqrt()).reshape(&[t * t, 1, 1])?)?;
    Ok((g.input, g.kernels.reshape(k.shape())?))
}

/// `out_i = Σ_j A[i, j] · V_j` as a pointwise convolution whose kernel bank
/// is the score matrix.
pub fn weighted_values(a: &Tensor, v: &Tensor) -> Result<Tensor> {
    v.expect_rank("values", 3)?;
    let t = v.shape()[0];
    a.expect_shape("attention weights", &[t, t])?;
    conv2d(v, &a.reshape(&[t, t, 1, 1])?, PaddingMode::Valid, 1)
}

fn weighted_values_backward(a: &Tensor, v: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let t = v.shape()[0];
    let (dv, da) = conv2d_backward(v, &a.reshape(&[t, t, 1, 1])?, PaddingMode::Valid, 1, grad)?;
    Ok((da.reshape(&[t, t])?, dv))
}

/// Post-softmax attention scores of one layer, `[heads, T, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub scores: Tensor,
}

impl AttentionTrace {
    pub fn heads(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.scores.shape()[1]
    }

    /// `heads * T` rows of `T` comma-separated values.
    pub fn to_csv(&self) -> String {
        let t = self.tokens();
        let mut s = String::new();
        for row in self.scores.data().chunks(t) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }
}

/// Intermediates of one head kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    pub input: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub attn: Tensor,
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    pub heads: Vec<HeadCache>,
}

impl AttentionCache {
    pub fn trace(&self) -> Result<AttentionTrace> {
        let a: Vec<Tensor> = self.heads.iter().map(|h| h.attn.clone()).collect();
        Ok(AttentionTrace {
            scores: Tensor::stack(&a)?,
        })
    }
}

/// Gradients of one projection (kernels and optional bias).
#[derive(Clone, Debug)]
pub struct ProjectionGrads {
    pub kernels: Tensor,
    pub bias: Option<Tensor>,
}

impl ProjectionGrads {
    fn accumulate(acc: &mut Option<ProjectionGrads>, kernels: Tensor, bias: Option<Tensor>) -> Result<()> {
        match acc {
            None => *acc = Some(ProjectionGrads { kernels, bias }),
            Some(a) => {
                a.kernels.add_assign(&kernels)?;
                if let (Some(ab), Some(b)) = (a.bias.as_mut(), bias) {
                    ab.add_assign(&b)?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AttentionGrads {
    pub input: Tensor,
    pub wq: ProjectionGrads,
    pub wk: ProjectionGrads,
    pub wv: ProjectionGrads,
}

/// Convolutional multi-head self-attention.
///
/// One Q, one K and one V projection serve every head: each head's
/// sub-patches are just more input channels of the same shared layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvAttentionLayer {
    pub wq: Projection,
    pub wk: Projection,
    pub wv: Projection,
    geometry: HeadGeometry,
}

impl ConvAttentionLayer {
    pub fn new(wq: Projection, wk: Projection, wv: Projection, geometry: HeadGeometry) -> Result<Self> {
        for (name, p) in [("wq", &wq), ("wk", &wk), ("wv", &wv)] {
            let s = p.kernels().shape();
            let m = match p {
                Projection::Shared(l) => l.out_channels(),
                Projection::Unshared(l) => l.out_channels(),
            };
            let expect_m = match p.padding() {
                PaddingMode::Valid => geometry.head_dim(),
                PaddingMode::Same => 1,
            };
            if s[1] != 1 || m != expect_m {
                return config_err(format!(
                    "{name}: bank {s:?} cannot project {}x{} head patches",
                    geometry.head_h, geometry.head_w
                ));
            }
            if p.padding() == PaddingMode::Valid && (s[2] != geometry.head_h || s[3] != geometry.head_w) {
                return config_err(format!("{name}: valid projection needs full-extent kernels"));
            }
        }
        Ok(ConvAttentionLayer { wq, wk, wv, geometry })
    }

    /// Random projections.
    ///
    /// Valid padding uses `[h*w, 1, h, w]` banks; same padding uses a single
    /// `h × w` kernel per projection. With `sharing` off, `tokens`
    /// independent copies are materialised.
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        geometry: HeadGeometry,
        tokens: usize,
        sharing: bool,
        padding: PaddingMode,
        bias: bool,
    ) -> Result<Self> {
        let m = match padding {
            PaddingMode::Valid => geometry.head_dim(),
            PaddingMode::Same => 1,
        };
        let mut make = || -> Result<Projection> {
            let l = SharedGroupedConv::init(rng, m, 1, (geometry.head_h, geometry.head_w), padding, bias);
            Ok(if sharing {
                Projection::Shared(l)
            } else {
                Projection::Unshared(l.unshared_variant(tokens)?)
            })
        };
        let (wq, wk, wv) = (make()?, make()?, make()?);
        Self::new(wq, wk, wv, geometry)
    }

    pub fn geometry(&self) -> &HeadGeometry {
        &self.geometry
    }

    /// Scaling constant `d = h * w`.
    pub fn scale_dim(&self) -> f64 {
        self.geometry.head_dim() as f64
    }

    fn project(&self, p: &Projection, x: &Tensor) -> Result<Tensor> {
        p.forward_raw(x)?.reshape(x.shape())
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_traced(&self, x: &Tensor) -> Result<(Tensor, AttentionTrace)> {
        let (y, cache) = self.forward_cached(x)?;
        Ok((y, cache.trace()?))
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let d = self.scale_dim();
        let mut outs = Vec::with_capacity(self.geometry.heads);
        let mut heads = Vec::with_capacity(self.geometry.heads);
        for xh in split_heads(x, &self.geometry)? {
            let q = self.project(&self.wq, &xh)?;
            let k = self.project(&self.wk, &xh)?;
            let v = self.project(&self.wv, &xh)?;
            let attn = softmax(&attention_scores(&q, &k, d)?, 1)?;
            outs.push(weighted_values(&attn, &v)?);
            heads.push(HeadCache {
                input: xh,
                q,
                k,
                v,
                attn,
            });
        }
        Ok((merge_heads(&outs, &self.geometry)?, AttentionCache { heads }))
    }

    pub fn backward(&self, cache: &AttentionCache, grad_output: &Tensor) -> Result<AttentionGrads> {
        let d = self.scale_dim();
        let grads = split_heads(grad_output, &self.geometry)?;
        if grads.len() != cache.heads.len() {
            return Err(crate::Error::State("attention cache does not match head count".into()));
        }
        let (mut gq, mut gk, mut gv) = (None, None, None);
        let mut dxs = Vec::with_capacity(grads.len());
        for (hc, dout) in cache.heads.iter().zip(&grads) {
            let (da, dv) = weighted_values_backward(&hc.attn, &hc.v, dout)?;
            let ds = softmax_backward(&hc.attn, 1, &da)?;
            let (dq, dk) = attention_scores_backward(&hc.q, &hc.k, d, &ds)?;
            let mut dx = Tensor::zeros(hc.input.shape());
            for (p, dproj, acc) in [
                (&self.wq, dq, &mut gq),
                (&self.wk, dk, &mut gk),
                (&self.wv, dv, &mut gv),
            ] {
                let raw_shape = p.forward_raw_shape(&hc.input)?;
                let g = p.backward(&hc.input, &dproj.reshape(&raw_shape)?)?;
                dx.add_assign(&g.input)?;
                ProjectionGrads::accumulate(acc, g.kernels, g.bias)?;
            }
            dxs.push(dx);
        }
        let missing = || crate::Error::State("no heads in attention cache".into());
        Ok(AttentionGrads {
            input: merge_heads(&dxs, &self.geometry)?,
            wq: gq.ok_or_else(missing)?,
            wk: gk.ok_or_else(missing)?,
            wv: gv.ok_or_else(missing)?,
        })
    }
}

impl Projection {
    fn forward_raw_shape(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        Ok(match self.padding() {
            PaddingMode::Valid => vec![t * h * w, 1, 1],
            PaddingMode::Same => vec![t, h, w],
        })
    }
}

fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..m {
                out[i * m + j] += av * b[p * m + j];
            }
        }
    }
    out
}

/// Textbook multi-head self-attention on flat tokens `x: [T, D]`.
///
/// `Q = X Wq`, `K = X Wk`, `V = X Wv`; head `k` uses feature columns
/// `k*D/heads .. (k+1)*D/heads`; outputs are concatenated in head order.
pub fn reference_mhsa(x: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor, heads: usize) -> Result<Tensor> {
    x.expect_rank("reference input", 2)?;
    let (t, d) = (x.shape()[0], x.shape()[1]);
    for w in [wq, wk, wv] {
        w.expect_shape("reference projection", &[d, d])?;
    }
    if heads == 0 || d % heads != 0 {
        return dim_err(format!("feature width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let q = matmul(x.data(), wq.data(), t, d, d);
    let k = matmul(x.data(), wk.data(), t, d, d);
    let v = matmul(x.data(), wv.data(), t, d, d);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; t * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..t {
            let mut s: Vec<f64> = (0..t)
                .map(|j| (0..dh).map(|f| q[i * d + off + f] * k[j * d + off + f]).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in &mut s {
                *v = (*v - m).exp();
                z += *v;
            }
            for j in 0..t {
                let a = s[j] / z;
                for f in 0..dh {
                    out[i * d + off + f] += a * v[j * d + off + f];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![t, d], out, x.precision()))
}

/// Builds the convolutional layer equivalent to `reference_mhsa` with the
/// given `[D, D]` weights, where inputs and outputs are related by
/// [`to_head_major`].
///
/// Every weight must be block diagonal over heads with the same block in
/// each head, since one shared bank serves all heads.
pub fn transport_weights(
    wq: &Tensor,
    wk: &Tensor,
    wv: &Tensor,
    geometry: HeadGeometry,
) -> Result<ConvAttentionLayer> {
    let d = geometry.token_dim();
    let dh = geometry.head_dim();
    let bank = |w: &Tensor, name: &str| -> Result<Projection> {
        w.expect_shape(name, &[d, d])?;
        let wd = w.data();
        for r in 0..d {
            for c in 0..d {
                let expect = if r / dh == c / dh {
                    wd[(r % dh) * d + (c % dh)]
                } else {
                    0.0
                };
                if wd[r * d + c] != expect {
                    return config_err(format!(
                        "{name} is not block diagonal with one shared head block (entry {r},{c})"
                    ));
                }
            }
        }
        // bank[m, 0, a, b] = W[a*w + b, m]
        let kernels = Tensor::from_fn(&[dh, 1, geometry.head_h, geometry.head_w], |i| {
            let (m, f) = (i / dh, i % dh);
            wd[f * d + m]
        });
        Ok(Projection::Shared(SharedGroupedConv::new(kernels, 1, None, PaddingMode::Valid)?))
    };
    ConvAttentionLayer::new(bank(wq, "wq")?, bank(wk, "wk")?, bank(wv, "wv")?, geometry)
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn token_permutation_equivariance(seed in 0u64..1000, t in 2usize..7, shift in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = HeadGeometry::new(4, 4, 4).unwrap();
            let layer = ConvAttentionLayer::init(&mut rng, g, t, true, PaddingMode::Valid, false).unwrap();
            let x = Tensor::from_fn(&[t, 4, 4], |_| rng.random_range(-1.0..1.0));
            let perm: Vec<usize> = (0..t).map(|i| (i + shift) % t).collect();
            let xp = Tensor::stack(&perm.iter().map(|&i| x.outer(i).unwrap()).collect::<Vec<_>>()).unwrap();
            let y = layer.forward(&x).unwrap();
            let yp = layer.forward(&xp).unwrap();
            for (pos, &src) in perm.iter().enumerate() {
                prop_assert!(yp.outer(pos).unwrap().max_abs_diff(&y.outer(src).unwrap()).unwrap() < 1e-12);
            }
        }

        #[test]
        fn scores_equal_scaled_gram(seed in 0u64..1000, t in 1usize..6, h in 1usize..5, w in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = Tensor::from_fn(&[t, h, w], |_| rng.random_range(-1.0..1.0));
            let k = Tensor::from_fn(&[t, h, w], |_| rng.random_range(-1.0..1.0));
            let d = (h * w) as f64;
            let s = attention_scores(&q, &k, d).unwrap();
            let n = h * w;
            for i in 0..t {
                for j in 0..t {
                    let dot: f64 = (0..n).map(|f| q.data()[i * n + f] * k.data()[j * n + f]).sum();
                    prop_assert!((s.data()[i * t + j] - dot / d.sqrt()).abs() < 1e-12);
                }
            }
        }
    }
}
