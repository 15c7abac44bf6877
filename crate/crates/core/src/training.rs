//! Cross-entropy training with Adam, linear warmup and cosine annealing,
//! plus the synthetic datasets and finite-difference gradient check used
//! to validate it.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{config_err, dim_err, Error, Result};
use crate::init::trunc_normal;
use crate::model::{ConvShareViT, ForwardCache, ModelConfig, NamedTensors, PositionalKind};
use crate::tensor::{PaddingMode, Precision, Tensor};

/// Cross entropy of one logit vector, via a max-shifted log-sum-exp.
pub fn cross_entropy(logits: &Tensor, target: usize) -> Result<f64> {
    let z = logits.data();
    if target >= z.len() {
        return dim_err(format!("target {target} out of range for {} classes", z.len()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    Ok(lse - z[target])
}

/// `softmax(logits) - onehot(target)`.
pub fn cross_entropy_grad(logits: &Tensor, target: usize) -> Result<Tensor> {
    let z = logits.data();
    if target >= z.len() {
        return dim_err(format!("target {target} out of range for {} classes", z.len()));
    }
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    Ok(Tensor::from_fn(&[z.len()], |i| e[i] / s - if i == target { 1.0 } else { 0.0 }))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows whose argmax equals the target.
pub fn accuracy(logits: &[Tensor], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() {
        return dim_err(format!("{} logit rows for {} targets", logits.len(), targets.len()));
    }
    if logits.is_empty() {
        return Ok(0.0);
    }
    let hits = logits
        .iter()
        .zip(targets)
        .filter(|(l, &t)| argmax(l.data()) == t)
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Linear warmup followed by cosine annealing, stepped once per epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub eta_min: f64,
}

impl ScheduleConfig {
    /// Base rate 5e-4 (the single-layer QKV models).
    pub fn base_5e4(total_epochs: usize) -> Self {
        ScheduleConfig {
            base_lr: 5e-4,
            warmup_epochs: 10,
            total_epochs,
            eta_min: 0.0,
        }
    }

    /// Base rate 8e-4 (the shared-depthwise models).
    pub fn base_8e4(total_epochs: usize) -> Self {
        ScheduleConfig {
            base_lr: 8e-4,
            ..Self::base_5e4(total_epochs)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return config_err(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if !(self.base_lr > 0.0) || self.eta_min < 0.0 || self.eta_min > self.base_lr {
            return config_err("need 0 <= eta_min <= base_lr and base_lr > 0");
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        self.validate()?;
        if epoch >= self.total_epochs {
            return config_err(format!("epoch {epoch} outside 0..{}", self.total_epochs));
        }
        let w = self.warmup_epochs;
        if epoch < w {
            return Ok(self.base_lr * epoch as f64 / w as f64);
        }
        let progress = (epoch - w) as f64 / (self.total_epochs - w) as f64;
        Ok(self.eta_min + 0.5 * (self.base_lr - self.eta_min) * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// Adam moments for every trainable tensor of a model.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(model: &ConvShareViT) -> Self {
        let zeros: Vec<Tensor> = model
            .named_parameters()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, model: &mut ConvShareViT, grads: &NamedTensors, lr: f64) -> Result<()> {
        let params = model.params_mut();
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::State("gradients do not match optimizer state".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, (name, g)), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if g.shape() != p.shape() {
                return dim_err(format!("gradient for {name} has shape {:?}", g.shape()));
            }
            let precision = p.precision();
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps);
                pd[i] = precision.round(pd[i] - update);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    /// One bright blob; the class is the image quadrant it sits in.
    QuadrantBlob,
    /// Horizontal versus vertical stripes.
    TwoClassTexture,
}

impl DatasetKind {
    pub fn classes(self) -> usize {
        match self {
            DatasetKind::QuadrantBlob => 4,
            DatasetKind::TwoClassTexture => 2,
        }
    }
}

/// Deterministic single-channel synthetic images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyDataset {
    pub kind: DatasetKind,
    pub image_size: usize,
    pub samples: usize,
    pub seed: u64,
    /// Standard deviation of the Gaussian background noise.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
}

/// Default background noise standard deviation of the synthetic images.
pub const TOY_NOISE_STD: f64 = 0.1;

fn default_noise() -> f64 {
    TOY_NOISE_STD
}

impl ToyDataset {
    /// `(image [1, S, S], label)` pairs with labels cycling through the
    /// classes, so every class has `samples / classes` members (±1).
    pub fn generate(&self) -> Result<Vec<(Tensor, usize)>> {
        let s = self.image_size;
        if s < 4 || s % 2 != 0 {
            return config_err(format!("toy images need an even size of at least 4, got {s}"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let noise = match Normal::new(0.0, self.noise_std) {
            Ok(n) if self.noise_std.is_finite() => n,
            _ => return config_err(format!("noise std must be finite and non-negative, got {}", self.noise_std)),
        };
        let k = self.kind.classes();
        let mut out = Vec::with_capacity(self.samples);
        for i in 0..self.samples {
            let label = i % k;
            let mut img: Vec<f64> = (0..s * s).map(|_| noise.sample(&mut rng)).collect();
            match self.kind {
                DatasetKind::QuadrantBlob => {
                    let half = (s / 2) as f64;
                    let radius = rng.random_range(0.12..0.2) * s as f64;
                    let margin = radius.min(half / 2.0);
                    let cy = (label / 2) as f64 * half + rng.random_range(margin..half - margin + 1e-9);
                    let cx = (label % 2) as f64 * half + rng.random_range(margin..half - margin + 1e-9);
                    for y in 0..s {
                        for x in 0..s {
                            let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                            img[y * s + x] += (-d2 / (2.0 * radius * radius)).exp();
                        }
                    }
                }
                DatasetKind::TwoClassTexture => {
                    let period = rng.random_range(3.0..6.0);
                    let phase = rng.random_range(0.0..std::f64::consts::TAU);
                    for y in 0..s {
                        for x in 0..s {
                            let c = if label == 0 { y } else { x } as f64;
                            img[y * s + x] += 0.5 * (std::f64::consts::TAU * c / period + phase).sin();
                        }
                    }
                }
            }
            out.push((Tensor::new(vec![1, s, s], img)?, label));
        }
        Ok(out)
    }
}

/// Per-image forward caches of one minibatch.
#[derive(Default)]
pub struct BatchTape {
    entries: Vec<(ForwardCache, usize)>,
}

impl BatchTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Runs the forward pass, keeping intermediates. Returns the logits.
    pub fn record(&mut self, model: &ConvShareViT, image: &Tensor, target: usize) -> Result<Tensor> {
        let cache = model.forward_cached(image)?;
        if target >= cache.logits.len() {
            return dim_err(format!("target {target} out of range"));
        }
        let logits = cache.logits.clone();
        self.entries.push((cache, target));
        Ok(logits)
    }

    /// Mean cross entropy over the recorded examples.
    pub fn loss(&self) -> Result<f64> {
        if self.is_empty() {
            return Err(Error::State("loss of an empty batch".into()));
        }
        let mut total = 0.0;
        for (c, t) in &self.entries {
            total += cross_entropy(&c.logits, *t)?;
        }
        Ok(total / self.len() as f64)
    }

    /// Gradient of `loss_scale * mean cross entropy` for every parameter.
    pub fn backward(&self, model: &ConvShareViT, loss_scale: f64) -> Result<NamedTensors> {
        if self.is_empty() {
            return Err(Error::State("backward called before any forward pass was recorded".into()));
        }
        let w = loss_scale / self.len() as f64;
        let mut total: Option<NamedTensors> = None;
        for (cache, t) in &self.entries {
            let dl = cross_entropy_grad(&cache.logits, *t)?.scale(w);
            let g = model.backward(cache, &dl)?;
            match &mut total {
                None => total = Some(g),
                Some(acc) => {
                    for ((_, a), (_, b)) in acc.iter_mut().zip(&g) {
                        a.add_assign(b)?;
                    }
                }
            }
        }
        Ok(total.expect("non-empty tape"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub batch_size: usize,
    pub seed: u64,
    pub train: ToyDataset,
    pub validation: ToyDataset,
}

impl TrainConfig {
    /// Quadrant-blob run: 16×16 images, 512 training and 256 validation
    /// samples, batch 64.
    pub fn quadrant_blob(epochs: usize, seed: u64) -> Self {
        Self::toy(DatasetKind::QuadrantBlob, 16, epochs, seed)
    }

    /// 512 training and 256 validation images of `kind`, batch 64, peak
    /// rate 2e-3 after 5 warmup epochs (fewer for very short runs).
    pub fn toy(kind: DatasetKind, image_size: usize, epochs: usize, seed: u64) -> Self {
        let data = |samples, s| ToyDataset {
            kind,
            image_size,
            samples,
            seed: s,
            noise_std: TOY_NOISE_STD,
        };
        TrainConfig {
            schedule: ScheduleConfig {
                base_lr: 2e-3,
                warmup_epochs: 5.min(epochs.saturating_sub(1)),
                total_epochs: epochs,
                eta_min: 0.0,
            },
            batch_size: 64,
            seed,
            train: data(512, seed.wrapping_mul(2).wrapping_add(1)),
            validation: data(256, seed.wrapping_mul(2).wrapping_add(2)),
        }
    }
}

/// Two-block single-channel model for the toy datasets: 4×4 patches
/// embedded as 8×8 tokens split over 4 heads.
pub fn toy_model_config(kind: DatasetKind, image_size: usize) -> ModelConfig {
    ModelConfig {
        image_size,
        channels: 1,
        patch_size: 4,
        embed_h: 8,
        embed_w: 8,
        heads: 4,
        depth: 2,
        mlp_ratio: 2,
        positional: PositionalKind::Trainable,
        num_classes: kind.classes(),
        weight_sharing: true,
        qkv_padding: PaddingMode::Valid,
        bias: true,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_acc";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        writeln!(s, "{},{:e},{:e},{},{}", r.epoch, r.lr, r.train_loss, r.train_acc, r.val_acc).unwrap();
    }
    s
}

pub struct TrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

pub fn evaluate(model: &ConvShareViT, data: &[(Tensor, usize)]) -> Result<f64> {
    let p = model.precision();
    let logits = data
        .iter()
        .map(|(x, _)| model.forward(&x.to_precision(p)))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<usize> = data.iter().map(|(_, t)| *t).collect();
    accuracy(&logits, &targets)
}

/// Trains `model` in place. Training accuracy and loss are accumulated
/// over the epoch's minibatches; validation accuracy is measured after the
/// epoch. Batches are reduced in a fixed order, so runs are reproducible.
pub fn train(
    model: &mut ConvShareViT,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    config.schedule.validate()?;
    if config.batch_size == 0 {
        return config_err("batch size must be positive");
    }
    let classes = config.train.kind.classes();
    if model.config().num_classes != classes {
        return config_err(format!(
            "model predicts {} classes but the dataset has {classes}",
            model.config().num_classes
        ));
    }
    let p = model.precision();
    let to_p = |d: Vec<(Tensor, usize)>| -> Vec<(Tensor, usize)> {
        d.into_iter().map(|(x, t)| (x.to_precision(p), t)).collect()
    };
    let train_set = to_p(config.train.generate()?);
    let val_set = to_p(config.validation.generate()?);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(model);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Vec::with_capacity(config.schedule.total_epochs);

    for epoch in 0..config.schedule.total_epochs {
        let lr = config.schedule.lr_at(epoch)?;
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let mut tape = BatchTape::new();
            for &i in batch {
                let (x, t) = &train_set[i];
                let logits = tape.record(model, x, *t)?;
                hits += usize::from(argmax(logits.data()) == *t);
            }
            let loss = tape.loss()?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("minibatch loss is {loss}"),
                });
            }
            loss_sum += loss * batch.len() as f64;
            let grads = tape.backward(model, 1.0)?;
            adam.step(model, &grads, lr)?;
        }
        let row = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: hits as f64 / train_set.len() as f64,
            val_acc: evaluate(model, &val_set)?,
        };
        on_epoch(&row);
        metrics.push(row);
    }
    Ok(TrainReport {
        checkpoint: Checkpoint::capture(model, config.seed, config.schedule.total_epochs),
        metrics,
    })
}

/// Outcome of [`gradient_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `name[index]` of the worst entry.
    pub worst: String,
    pub checked: usize,
}

/// Denominator floor of the relative error in [`gradient_check`]. Central
/// differences at step `1e-5` on a loss of order one carry a few `1e-10`
/// of absolute rounding noise, so entries whose gradients are smaller than
/// the floor are held to an absolute error of `floor * tolerance` instead.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

/// Replaces every parameter with a draw of standard deviation `std`
/// (normalisation gains with `1 ± std`), so that a gradient check
/// exercises non-trivial attention patterns and non-zero biases.
pub fn randomize_parameters<R: Rng + ?Sized>(model: &mut ConvShareViT, rng: &mut R, std: f64) {
    let names: Vec<String> = model.named_parameters().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(model.params_mut()) {
        let fresh = trunc_normal(rng, t.shape(), std);
        *t = if name.ends_with(".gain") {
            fresh.map(|v| 1.0 + v)
        } else {
            fresh
        };
    }
}

/// Compares analytic gradients of the mean cross entropy on `batch` with
/// central differences of step `step`, over every parameter entry.
pub fn gradient_check(model: &ConvShareViT, batch: &[(Tensor, usize)], step: f64) -> Result<GradCheck> {
    if model.precision() != Precision::Double {
        return config_err("gradient check needs a double-precision model");
    }
    let mut tape = BatchTape::new();
    for (x, t) in batch {
        tape.record(model, x, *t)?;
    }
    let analytic = tape.backward(model, 1.0)?;
    let loss = |m: &ConvShareViT| -> Result<f64> {
        let mut s = 0.0;
        for (x, t) in batch {
            s += cross_entropy(&m.forward(x)?, *t)?;
        }
        Ok(s / batch.len() as f64)
    };
    let mut probe = model.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (pi, (name, g)) in analytic.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params_mut()[pi].data()[i];
            probe.params_mut()[pi].data_mut()[i] = orig + step;
            let up = loss(&probe)?;
            probe.params_mut()[pi].data_mut()[i] = orig - step;
            let down = loss(&probe)?;
            probe.params_mut()[pi].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_empty() {
                report.max_rel_error = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}
