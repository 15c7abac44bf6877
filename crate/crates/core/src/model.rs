//! ConvShareViT: a vision transformer whose every trainable map is a
//! convolution.
//!
//! Image patches are embedded as `[H, W]` token matrices by a transpose
//! convolution, a class token is prepended, a positional table added, and
//! the sequence runs through pre-norm encoder blocks of convolutional
//! attention and convolutional MLP. The classifier reads the class token
//! through another full-extent valid convolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, AttentionTrace, ConvAttentionLayer, HeadGeometry};
use crate::error::{config_err, dim_err, Error, Result};
use crate::init::{trunc_normal, INIT_STD};
use crate::linear::SharedGroupedConv;
use crate::tensor::{
    conv_transpose2d, conv_transpose2d_backward, gelu, gelu_backward, layer_norm, layer_norm_backward,
    LayerNormOutput, PaddingMode, Precision, Tensor, LAYER_NORM_EPS,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalKind {
    Trainable,
    Sinusoidal,
}

/// Architecture hyperparameters. Serialised as JSON with exactly these
/// field names.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_h: usize,
    pub embed_w: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub positional: PositionalKind,
    pub num_classes: usize,
    /// One Q/K/V bank for all tokens (`true`) or an independent bank per
    /// token (`false`).
    pub weight_sharing: bool,
    /// `valid`: full-extent kernels, one output per kernel, reshaped back to
    /// a token. `same`: a single head-sized kernel with same padding.
    pub qkv_padding: PaddingMode,
    pub bias: bool,
}

impl ModelConfig {
    /// CIFAR-100 sized model with 13×13 single-head tokens.
    pub fn cifar100_13x13() -> Self {
        ModelConfig {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_h: 13,
            embed_w: 13,
            heads: 1,
            depth: 9,
            mlp_ratio: 2,
            positional: PositionalKind::Trainable,
            num_classes: 100,
            weight_sharing: true,
            qkv_padding: PaddingMode::Valid,
            bias: true,
        }
    }

    /// CIFAR-100 sized model with 16×16 tokens split over 16 heads.
    pub fn cifar100_16x16() -> Self {
        ModelConfig {
            embed_h: 16,
            embed_w: 16,
            heads: 16,
            ..Self::cifar100_13x13()
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: ModelConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_h", self.embed_h),
            ("embed_w", self.embed_w),
            ("depth", self.depth),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return config_err(format!("{name} must be positive"));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return config_err(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        self.head_geometry()?;
        self.tokenizer_geometry()?;
        Ok(())
    }

    /// Patches per image side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Sequence length including the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    pub fn token_dim(&self) -> usize {
        self.embed_h * self.embed_w
    }

    pub fn head_geometry(&self) -> Result<HeadGeometry> {
        HeadGeometry::new(self.heads, self.embed_h, self.embed_w)
    }

    /// `(stride, kernel_h, kernel_w)` of the patch embedding. The stride is
    /// `(min(H, W) - P) / (P - 1)` (at least 1) and the kernels fill the
    /// rest, so `(P - 1) * stride + kernel` equals the token extent.
    pub fn tokenizer_geometry(&self) -> Result<(usize, usize, usize)> {
        let p = self.patch_size;
        let small = self.embed_h.min(self.embed_w);
        let stride = if p == 1 || small < p {
            1
        } else {
            ((small - p) / (p - 1)).max(1)
        };
        let span = (p - 1) * stride;
        if self.embed_h <= span || self.embed_w <= span {
            return config_err(format!(
                "a {p}x{p} patch cannot be embedded as a {}x{} token",
                self.embed_h, self.embed_w
            ));
        }
        Ok((stride, self.embed_h - span, self.embed_w - span))
    }
}

/// Patch embedding by transpose convolution, shared over patches.
#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    /// `[C, 1, kh, kw]`.
    pub weight: Tensor,
    /// `[1]`.
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub patch_size: usize,
}

impl Tokenizer {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let (stride, kh, kw) = config.tokenizer_geometry()?;
        Ok(Tokenizer {
            weight: trunc_normal(rng, &[config.channels, 1, kh, kw], INIT_STD),
            bias: config.bias.then(|| Tensor::zeros(&[1])),
            stride,
            patch_size: config.patch_size,
        })
    }

    /// Non-overlapping `[C, P, P]` patches in row-major grid order.
    pub fn patches(&self, image: &Tensor) -> Result<Vec<Tensor>> {
        image.expect_rank("image", 3)?;
        let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
        let p = self.patch_size;
        if c != self.weight.shape()[0] {
            return dim_err(format!("image has {c} channels, tokenizer expects {}", self.weight.shape()[0]));
        }
        if h % p != 0 || w % p != 0 {
            return config_err(format!("{h}x{w} image is not divisible into {p}x{p} patches"));
        }
        let mut out = Vec::with_capacity((h / p) * (w / p));
        for gi in 0..h / p {
            for gj in 0..w / p {
                let mut data = Vec::with_capacity(c * p * p);
                for ch in 0..c {
                    for a in 0..p {
                        let row = (ch * h + gi * p + a) * w + gj * p;
                        data.extend_from_slice(&image.data()[row..row + p]);
                    }
                }
                out.push(Tensor::from_parts(vec![c, p, p], data, image.precision()));
            }
        }
        Ok(out)
    }

    fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        let mut t = conv_transpose2d(patch, &self.weight, self.stride)?;
        if let Some(b) = &self.bias {
            let b = b.data()[0];
            t = t.map(|v| v + b);
        }
        Ok(t)
    }

    /// `[C, S, S]` image to `[(S/P)^2, H, W]` tokens.
    pub fn tokenize(&self, image: &Tensor) -> Result<Tensor> {
        let embedded = self
            .patches(image)?
            .iter()
            .map(|p| self.embed(p))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&embedded)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEncoding {
    pub kind: PositionalKind,
    /// `[T, H, W]`.
    pub table: Tensor,
}

impl PositionalEncoding {
    /// Fixed sin/cos table over the flattened feature index:
    /// feature `f` of token `t` is `sin(t / 10000^(2i/D))` for `f = 2i` and
    /// `cos(...)` for `f = 2i + 1`.
    pub fn sinusoidal(tokens: usize, h: usize, w: usize) -> Self {
        let d = (h * w) as f64;
        let table = Tensor::from_fn(&[tokens, h, w], |idx| {
            let (t, f) = (idx / (h * w), idx % (h * w));
            let i = (f / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d);
            if f % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        });
        PositionalEncoding {
            kind: PositionalKind::Sinusoidal,
            table,
        }
    }

    pub fn trainable<R: Rng + ?Sized>(rng: &mut R, tokens: usize, h: usize, w: usize) -> Self {
        PositionalEncoding {
            kind: PositionalKind::Trainable,
            table: trunc_normal(rng, &[tokens, h, w], INIT_STD),
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.add(&self.table)
    }
}

/// Token-wise feed-forward network: expand each token into `r` tokens,
/// GELU, reduce each group of `r` back to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvMlp {
    /// `[r*H*W, 1, H, W]`, one group per token.
    pub expand: SharedGroupedConv,
    /// `[H*W, r, H, W]`, one group per `r` expanded tokens.
    pub reduce: SharedGroupedConv,
}

#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Tensor,
    hidden: Tensor,
    activated: Tensor,
}

impl ConvMlp {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, ratio: usize, bias: bool) -> Self {
        ConvMlp {
            expand: SharedGroupedConv::init(rng, ratio * h * w, 1, (h, w), PaddingMode::Valid, bias),
            reduce: SharedGroupedConv::init(rng, h * w, ratio, (h, w), PaddingMode::Valid, bias),
        }
    }

    pub fn ratio(&self) -> usize {
        self.reduce.group_size()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        x.expect_rank("mlp input", 3)?;
        let (t, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hidden = self.expand.forward(x, &[t * self.ratio(), h, w])?;
        let activated = gelu(&hidden);
        let y = self.reduce.forward(&activated, &[t, h, w])?;
        Ok((
            y,
            MlpCache {
                input: x.clone(),
                hidden,
                activated,
            },
        ))
    }

    fn backward(&self, cache: &MlpCache, dy: &Tensor) -> Result<MlpGrads> {
        let n = dy.len();
        let gr = self.reduce.backward(&cache.activated, &dy.reshape(&[n, 1, 1])?)?;
        let dh = gelu_backward(&cache.hidden, &gr.input)?;
        let ge = self.expand.backward(&cache.input, &dh.reshape(&[dh.len(), 1, 1])?)?;
        Ok(MlpGrads {
            input: ge.input,
            expand: (ge.kernels, ge.bias),
            reduce: (gr.kernels, gr.bias),
        })
    }
}

struct MlpGrads {
    input: Tensor,
    expand: (Tensor, Option<Tensor>),
    reduce: (Tensor, Option<Tensor>),
}

/// `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub norm1_gain: Tensor,
    pub norm1_offset: Tensor,
    pub attn: ConvAttentionLayer,
    pub norm2_gain: Tensor,
    pub norm2_offset: Tensor,
    pub mlp: ConvMlp,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    norm1: LayerNormOutput,
    attn: AttentionCache,
    norm2: LayerNormOutput,
    mlp: MlpCache,
}

impl EncoderBlock {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, config: &ModelConfig) -> Result<Self> {
        let (h, w) = (config.embed_h, config.embed_w);
        let attn = ConvAttentionLayer::init(
            rng,
            config.head_geometry()?,
            config.tokens(),
            config.weight_sharing,
            config.qkv_padding,
            config.bias,
        )?;
        let mlp = ConvMlp::init(rng, h, w, config.mlp_ratio, config.bias);
        Ok(EncoderBlock {
            norm1_gain: Tensor::full(&[h, w], 1.0),
            norm1_offset: Tensor::zeros(&[h, w]),
            attn,
            norm2_gain: Tensor::full(&[h, w], 1.0),
            norm2_offset: Tensor::zeros(&[h, w]),
            mlp,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, BlockCache)> {
        let norm1 = layer_norm(x, &self.norm1_gain, &self.norm1_offset, LAYER_NORM_EPS)?;
        let (a, attn) = self.attn.forward_cached(&norm1.output)?;
        let mid = x.add(&a)?;
        let norm2 = layer_norm(&mid, &self.norm2_gain, &self.norm2_offset, LAYER_NORM_EPS)?;
        let (m, mlp) = self.mlp.forward_cached(&norm2.output)?;
        Ok((mid.add(&m)?, BlockCache { norm1, attn, norm2, mlp }))
    }

    fn backward(&self, cache: &BlockCache, dy: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let gm = self.mlp.backward(&cache.mlp, dy)?;
        let (dn2, dg2, do2) = layer_norm_backward(&cache.norm2, &self.norm2_gain, &gm.input)?;
        let dmid = dy.add(&dn2)?;
        let ga = self.attn.backward(&cache.attn, &dmid)?;
        let (dn1, dg1, do1) = layer_norm_backward(&cache.norm1, &self.norm1_gain, &ga.input)?;
        let dx = dmid.add(&dn1)?;
        let mut grads = vec![dg1, do1];
        for p in [ga.wq, ga.wk, ga.wv] {
            grads.push(p.kernels);
            grads.extend(p.bias);
        }
        grads.extend([dg2, do2]);
        for (k, b) in [gm.expand, gm.reduce] {
            grads.push(k);
            grads.extend(b);
        }
        Ok((dx, grads))
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            (format!("{prefix}.norm1.gain"), &self.norm1_gain),
            (format!("{prefix}.norm1.offset"), &self.norm1_offset),
        ];
        for (n, p) in [("q", &self.attn.wq), ("k", &self.attn.wk), ("v", &self.attn.wv)] {
            v.push((format!("{prefix}.attn.{n}.kernels"), p.kernels()));
            if let Some(b) = p.bias() {
                v.push((format!("{prefix}.attn.{n}.bias"), b));
            }
        }
        v.push((format!("{prefix}.norm2.gain"), &self.norm2_gain));
        v.push((format!("{prefix}.norm2.offset"), &self.norm2_offset));
        for (n, l) in [("expand", &self.mlp.expand), ("reduce", &self.mlp.reduce)] {
            v.push((format!("{prefix}.mlp.{n}.kernels"), l.kernels()));
            if let Some(b) = l.bias() {
                v.push((format!("{prefix}.mlp.{n}.bias"), b));
            }
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.norm1_gain, &mut self.norm1_offset];
        for p in [&mut self.attn.wq, &mut self.attn.wk, &mut self.attn.wv] {
            let (k, b) = p.params_mut();
            v.push(k);
            v.extend(b);
        }
        v.push(&mut self.norm2_gain);
        v.push(&mut self.norm2_offset);
        for l in [&mut self.mlp.expand, &mut self.mlp.reduce] {
            let (k, b) = l.params_mut();
            v.push(k);
            v.extend(b);
        }
        v
    }
}

/// Intermediates of one image's forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    patches: Vec<Tensor>,
    blocks: Vec<BlockCache>,
    final_norm: LayerNormOutput,
    class_state: Tensor,
    pub logits: Tensor,
}

impl ForwardCache {
    /// Post-softmax attention of every block, in depth order.
    pub fn traces(&self) -> Result<Vec<AttentionTrace>> {
        self.blocks.iter().map(|b| b.attn.trace()).collect()
    }
}

/// Named tensors in the model's canonical parameter order.
pub type NamedTensors = Vec<(String, Tensor)>;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvShareViT {
    config: ModelConfig,
    pub tokenizer: Tokenizer,
    /// `[H, W]`.
    pub class_token: Tensor,
    pub positional: PositionalEncoding,
    pub blocks: Vec<EncoderBlock>,
    pub norm_gain: Tensor,
    pub norm_offset: Tensor,
    /// `[num_classes, 1, H, W]`, valid padding, applied to the class token.
    pub classifier: SharedGroupedConv,
}

impl ConvShareViT {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (h, w, t) = (config.embed_h, config.embed_w, config.tokens());
        let tokenizer = Tokenizer::init(rng, config)?;
        let class_token = trunc_normal(rng, &[h, w], INIT_STD);
        let positional = match config.positional {
            PositionalKind::Trainable => PositionalEncoding::trainable(rng, t, h, w),
            PositionalKind::Sinusoidal => PositionalEncoding::sinusoidal(t, h, w),
        };
        let blocks = (0..config.depth)
            .map(|_| EncoderBlock::init(rng, config))
            .collect::<Result<Vec<_>>>()?;
        let classifier = SharedGroupedConv::init(rng, config.num_classes, 1, (h, w), PaddingMode::Valid, config.bias);
        Ok(ConvShareViT {
            config: config.clone(),
            tokenizer,
            class_token,
            positional,
            blocks,
            norm_gain: Tensor::full(&[h, w], 1.0),
            norm_offset: Tensor::zeros(&[h, w]),
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.class_token.precision()
    }

    /// Rounds every parameter (and the fixed positional table) to `p`.
    pub fn set_precision(&mut self, p: Precision) {
        if self.config.positional == PositionalKind::Sinusoidal {
            self.positional.table = self.positional.table.to_precision(p);
        }
        for t in self.params_mut() {
            *t = t.to_precision(p);
        }
    }

    /// Trainable tensors with their hierarchical names.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("tokenizer.weight".to_string(), &self.tokenizer.weight)];
        if let Some(b) = &self.tokenizer.bias {
            v.push(("tokenizer.bias".into(), b));
        }
        v.push(("class_token".into(), &self.class_token));
        if self.config.positional == PositionalKind::Trainable {
            v.push(("pos_embed".into(), &self.positional.table));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(b.named_params(&format!("blocks.{i}")));
        }
        v.push(("norm.gain".into(), &self.norm_gain));
        v.push(("norm.offset".into(), &self.norm_offset));
        v.push(("head.kernels".into(), self.classifier.kernels()));
        if let Some(b) = self.classifier.bias() {
            v.push(("head.bias".into(), b));
        }
        v
    }

    /// Mutable trainable tensors, in the order of
    /// [`named_parameters`](Self::named_parameters).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.tokenizer.weight];
        v.extend(self.tokenizer.bias.as_mut());
        v.push(&mut self.class_token);
        if self.config.positional == PositionalKind::Trainable {
            v.push(&mut self.positional.table);
        }
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.push(&mut self.norm_gain);
        v.push(&mut self.norm_offset);
        let (k, b) = self.classifier.params_mut();
        v.push(k);
        v.extend(b);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.named_parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Class token, image tokens and positional table: the `[T, H, W]`
    /// input of the first block.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        self.embed_patches(&self.tokenizer.patches(image)?)
    }

    fn embed_patches(&self, patches: &[Tensor]) -> Result<Tensor> {
        let (h, w) = (self.config.embed_h, self.config.embed_w);
        if patches.len() + 1 != self.config.tokens() {
            return dim_err(format!(
                "image gives {} patches, model expects {}",
                patches.len(),
                self.config.tokens() - 1
            ));
        }
        let mut parts = vec![self.class_token.reshape(&[1, h, w])?];
        for p in patches {
            parts.push(self.tokenizer.embed(p)?);
        }
        self.positional.apply(&Tensor::concat(&parts)?)
    }

    /// Final normalisation and classifier on the class token.
    pub fn head(&self, x: &Tensor) -> Result<Tensor> {
        let n = layer_norm(x, &self.norm_gain, &self.norm_offset, LAYER_NORM_EPS)?;
        self.classify(&n.output.outer(0)?)
    }

    fn classify(&self, class_state: &Tensor) -> Result<Tensor> {
        let (h, w) = (self.config.embed_h, self.config.embed_w);
        self.classifier
            .forward(&class_state.reshape(&[1, h, w])?, &[self.config.num_classes])
    }

    /// Logits `[num_classes]` for a `[C, S, S]` image.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let mut x = self.embed(image)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.head(&x)
    }

    /// Logits plus the attention trace of every block.
    pub fn forward_traced(&self, image: &Tensor) -> Result<(Tensor, Vec<AttentionTrace>)> {
        let cache = self.forward_cached(image)?;
        Ok((cache.logits.clone(), cache.traces()?))
    }

    pub fn forward_cached(&self, image: &Tensor) -> Result<ForwardCache> {
        let patches = self.tokenizer.patches(image)?;
        let mut x = self.embed_patches(&patches)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, c) = b.forward_cached(&x)?;
            blocks.push(c);
            x = y;
        }
        let final_norm = layer_norm(&x, &self.norm_gain, &self.norm_offset, LAYER_NORM_EPS)?;
        let class_state = final_norm.output.outer(0)?;
        let logits = self.classify(&class_state)?;
        Ok(ForwardCache {
            patches,
            blocks,
            final_norm,
            class_state,
            logits,
        })
    }

    /// Gradients of `<grad_logits, logits>` with respect to every
    /// parameter, named and ordered like [`named_parameters`](Self::named_parameters).
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &Tensor) -> Result<NamedTensors> {
        let (h, w, t) = (self.config.embed_h, self.config.embed_w, self.config.tokens());
        if cache.blocks.len() != self.blocks.len() {
            return Err(Error::State("forward cache does not match model depth".into()));
        }
        grad_logits.expect_shape("logit gradient", &[self.config.num_classes])?;
        let gc = self.classifier.backward(
            &cache.class_state.reshape(&[1, h, w])?,
            &grad_logits.reshape(&[self.config.num_classes, 1, 1])?,
        )?;
        let mut dfinal = Tensor::zeros(&[t, h, w]);
        dfinal.data_mut()[..h * w].copy_from_slice(gc.input.data());
        let (mut dx, dng, dno) = layer_norm_backward(&cache.final_norm, &self.norm_gain, &dfinal)?;

        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (d, g) = b.backward(c, &dx)?;
            block_grads.push(g);
            dx = d;
        }
        block_grads.reverse();

        let dcls = dx.outer(0)?.reshape(&[h, w])?;
        let mut dweight = Tensor::zeros(self.tokenizer.weight.shape());
        let mut dbias = 0.0;
        for (i, p) in cache.patches.iter().enumerate() {
            let dtok = dx.outer(i + 1)?.reshape(&[1, h, w])?;
            let (_, dk) = conv_transpose2d_backward(p, &self.tokenizer.weight, self.tokenizer.stride, &dtok)?;
            dweight.add_assign(&dk)?;
            dbias += dtok.sum();
        }

        let mut grads = vec![dweight];
        if self.tokenizer.bias.is_some() {
            grads.push(Tensor::from_parts(vec![1], vec![dbias], grad_logits.precision()));
        }
        grads.push(dcls);
        if self.config.positional == PositionalKind::Trainable {
            grads.push(dx);
        }
        for g in block_grads {
            grads.extend(g);
        }
        grads.extend([dng, dno, gc.kernels]);
        grads.extend(gc.bias);

        let names = self.named_parameters();
        debug_assert_eq!(names.len(), grads.len());
        Ok(names.into_iter().map(|(n, _)| n).zip(grads).collect())
    }
}

/// Heatmap of one layer's class-token attention over the image.
///
/// The class-token query row is averaged over heads, the class-token
/// column dropped, the rest laid out on the patch grid, upsampled by
/// repetition to `image_size × image_size` and min-max normalised to
/// `[0, 1]`. A constant map normalises to zeros.
pub fn attention_heatmap(trace: &AttentionTrace, image_size: usize) -> Result<Tensor> {
    let (heads, t) = (trace.heads(), trace.tokens());
    let n = t.saturating_sub(1);
    let grid = (n as f64).sqrt().round() as usize;
    if n == 0 || grid * grid != n || image_size % grid != 0 {
        return dim_err(format!(
            "{n} image tokens cannot be laid out on a {image_size}x{image_size} image"
        ));
    }
    let s = trace.scores.data();
    let row: Vec<f64> = (1..t)
        .map(|j| (0..heads).map(|k| s[k * t * t + j]).sum::<f64>() / heads as f64)
        .collect();
    let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cell = image_size / grid;
    Ok(Tensor::from_fn(&[image_size, image_size], |i| {
        let (y, x) = (i / image_size, i % image_size);
        let v = row[(y / cell) * grid + x / cell];
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.0
        }
    }))
}

/// [`attention_heatmap`] for block `layer` of a collected trace list.
pub fn attention_heatmaps(traces: &[AttentionTrace], layer: usize, image_size: usize) -> Result<Tensor> {
    let trace = traces
        .get(layer)
        .ok_or_else(|| Error::State(format!("no attention trace recorded for layer {layer}")))?;
    attention_heatmap(trace, image_size)
}
