//! Runs a model's convolutions through the simulated 4f correlator and
//! compares the logits with the electronic forward pass.
//!
//! Optical: QKV projections, attention scores, the weighted sum of values
//! and both MLP layers, batched into passes exactly as the planner counts
//! them. Electronic: tokenizer, positional table, biases, layer norms,
//! softmax, GELU, residual sums, the partial sums of the MLP reduction and
//! the classifier.
//!
//! Two execution modes give the same numbers:
//!
//! * [`SimulationMode::Cells`] evaluates each `L × L` output cell on its
//!   own. Cells of a tiled canvas never overlap, so this is the canvas
//!   computation without the zero area; kernel spectra are computed once
//!   and only the valid pixel of each cell is transformed back.
//! * [`SimulationMode::Canvas`] paints every pass onto a full mask with the
//!   tiling routines and convolves whole canvases. Exact but slow; meant
//!   for small models and for checking the cell mode.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::linear::{Projection, SharedGroupedConv};
use crate::model::{ConvShareViT, EncoderBlock};
use crate::optics::{kernel_tiling, mixed_tiling, DeviceSpec, Fft2};
use crate::plan::{plan_inferences, InferencePlan, StageCounts};
use crate::tensor::{gelu, layer_norm, softmax, Precision, Tensor, LAYER_NORM_EPS};

pub const SIMULATION_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimulationMode {
    Cells,
    Canvas,
}

/// Many real-signal spectra of one transform size, stored as separate
/// real and imaginary planes.
struct Spectra {
    len: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl Spectra {
    fn with_capacity(len: usize, count: usize) -> Self {
        Spectra {
            len,
            re: Vec::with_capacity(len * count),
            im: Vec::with_capacity(len * count),
        }
    }

    fn push(&mut self, s: &[Complex64]) {
        self.re.extend(s.iter().map(|c| c.re));
        self.im.extend(s.iter().map(|c| c.im));
    }

    fn re(&self, i: usize) -> &[f64] {
        &self.re[i * self.len..][..self.len]
    }

    fn im(&self, i: usize) -> &[f64] {
        &self.im[i * self.len..][..self.len]
    }

    /// `Re Σ_u a_i(u) b_j(u)`.
    fn dot(&self, i: usize, other: &Spectra, j: usize) -> f64 {
        let (ar, ai, br, bi) = (self.re(i), self.im(i), other.re(j), other.im(j));
        let mut s = 0.0;
        for u in 0..self.len {
            s += ar[u] * br[u] - ai[u] * bi[u];
        }
        s
    }
}

/// Fourier-plane data for `h × h` tokens against `h × h` kernels.
struct CellFft {
    h: usize,
    fft: Fft2,
    /// Inverse-transform weights of the valid pixel `(h-1, h-1)`.
    readout: Vec<Complex64>,
}

impl CellFft {
    fn new(h: usize) -> Self {
        let l = 2 * h - 1;
        let p = (h - 1) as f64;
        let scale = 1.0 / (l * l) as f64;
        let readout = (0..l * l)
            .map(|i| {
                let (u, v) = ((i / l) as f64, (i % l) as f64);
                Complex64::from_polar(scale, std::f64::consts::TAU * (u + v) * p / l as f64)
            })
            .collect();
        CellFft {
            h,
            fft: Fft2::new(l, l),
            readout,
        }
    }

    fn inputs(&self, blocks: &[&[f64]]) -> Spectra {
        let l = 2 * self.h - 1;
        let mut s = Spectra::with_capacity(l * l, blocks.len());
        for b in blocks {
            s.push(&self.fft.spectrum(b, self.h, self.h, false));
        }
        s
    }

    /// Flipped kernels as they sit on the mask, folded with the readout.
    fn kernels(&self, blocks: &[&[f64]]) -> Spectra {
        let l = 2 * self.h - 1;
        let mut s = Spectra::with_capacity(l * l, blocks.len());
        for b in blocks {
            let mut k = self.fft.spectrum(b, self.h, self.h, true);
            for (x, r) in k.iter_mut().zip(&self.readout) {
                *x *= r;
            }
            s.push(&k);
        }
        s
    }
}

fn chunks_of(data: &[f64], size: usize) -> Vec<&[f64]> {
    data.chunks_exact(size).collect()
}

struct BlockSpectra {
    qkv: [Spectra; 3],
    expand: Spectra,
    /// Kernel `[m, j]` at index `j * H*W + m`.
    reduce: Spectra,
}

pub struct OpticalSimulator<'a> {
    model: &'a ConvShareViT,
    plan: InferencePlan,
    mode: SimulationMode,
    cell: CellFft,
    point: Fft2,
    spectra: Vec<BlockSpectra>,
}

/// Logits of one optical run and the passes it used.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    pub logits: Tensor,
    pub per_block: Vec<StageCounts>,
}

impl SimulationOutput {
    pub fn inferences(&self) -> usize {
        self.per_block.iter().map(StageCounts::total).sum()
    }
}

fn shared(p: &Projection) -> Result<&SharedGroupedConv> {
    match p {
        Projection::Shared(l) => Ok(l),
        Projection::Unshared(_) => config_err("optical simulation needs shared projections"),
    }
}

fn add_bias(values: &mut [f64], bias: Option<&Tensor>, period: usize) {
    if let Some(b) = bias {
        for (i, v) in values.iter_mut().enumerate() {
            *v += b.data()[i % period];
        }
    }
}

impl<'a> OpticalSimulator<'a> {
    /// Fails with a configuration error unless the model has one head,
    /// shared weights and valid padding, and with an infeasibility error
    /// naming the stage when the device is too small.
    pub fn new(model: &'a ConvShareViT, device: &DeviceSpec, mode: SimulationMode) -> Result<Self> {
        let plan = plan_inferences(model.config(), device)?;
        let h = model.config().embed_h;
        let cell = CellFft::new(h);
        let hw = h * h;
        let mut spectra = Vec::new();
        if mode == SimulationMode::Cells {
            for b in &model.blocks {
                let bank = |p: &Projection| -> Result<Spectra> {
                    Ok(cell.kernels(&chunks_of(shared(p)?.kernels().data(), hw)))
                };
                let r = b.mlp.ratio();
                let red = b.mlp.reduce.kernels().data();
                let reduce: Vec<&[f64]> = (0..r)
                    .flat_map(|j| (0..hw).map(move |m| &red[(m * r + j) * hw..][..hw]))
                    .collect();
                spectra.push(BlockSpectra {
                    qkv: [bank(&b.attn.wq)?, bank(&b.attn.wk)?, bank(&b.attn.wv)?],
                    expand: cell.kernels(&chunks_of(b.mlp.expand.kernels().data(), hw)),
                    reduce: cell.kernels(&reduce),
                });
            }
        } else {
            for b in &model.blocks {
                for p in [&b.attn.wq, &b.attn.wk, &b.attn.wv] {
                    shared(p)?;
                }
            }
        }
        Ok(OpticalSimulator {
            model,
            plan,
            mode,
            cell,
            point: Fft2::new(h, h),
            spectra,
        })
    }

    pub fn plan(&self) -> &InferencePlan {
        &self.plan
    }

    pub fn mode(&self) -> SimulationMode {
        self.mode
    }

    pub fn run(&self, image: &Tensor) -> Result<SimulationOutput> {
        let mut x = self.model.embed(image)?.to_precision(Precision::Double);
        let mut per_block = Vec::with_capacity(self.model.blocks.len());
        for (i, b) in self.model.blocks.iter().enumerate() {
            let (y, counts) = self.block(i, b, &x)?;
            x = y;
            per_block.push(counts);
        }
        Ok(SimulationOutput {
            logits: self.model.head(&x)?,
            per_block,
        })
    }

    fn block(&self, index: usize, b: &EncoderBlock, x: &Tensor) -> Result<(Tensor, StageCounts)> {
        let mut counts = StageCounts::default();
        let n1 = layer_norm(x, &b.norm1_gain, &b.norm1_offset, LAYER_NORM_EPS)?.output;
        let [q, k, v] = self.qkv(index, b, &n1, &mut counts.qkv)?;
        let d = b.attn.scale_dim();
        let scores = self.scores(&q, &k, &mut counts.scores)?.scale(1.0 / d.sqrt());
        let attn = softmax(&scores, 1)?;
        let a = self.weighted_sum(&attn, &v, &mut counts.weighted_sum)?;
        let mid = x.add(&a)?;
        let n2 = layer_norm(&mid, &b.norm2_gain, &b.norm2_offset, LAYER_NORM_EPS)?.output;
        let m = self.mlp(index, b, &n2, &mut counts.mlp)?;
        Ok((mid.add(&m)?, counts))
    }

    fn tokens(x: &Tensor) -> (usize, usize, Vec<&[f64]>) {
        let (t, h) = (x.shape()[0], x.shape()[1]);
        (t, h * h, chunks_of(x.data(), h * h))
    }

    /// Depthwise mixed tiling: row `o` correlates token `o / (3 H W)` with
    /// one kernel of the Q, K or V bank.
    fn qkv(&self, index: usize, b: &EncoderBlock, x: &Tensor, passes: &mut usize) -> Result<[Tensor; 3]> {
        let (t, hw, toks) = Self::tokens(x);
        let rows = 3 * t * hw;
        let mut out = vec![0.0; rows];
        let row_kernel = |o: usize| (o / (3 * hw), (o % (3 * hw)) / hw, o % hw);
        let banks: Vec<&Tensor> = [&b.attn.wq, &b.attn.wk, &b.attn.wv]
            .into_iter()
            .map(|p| shared(p).map(|l| l.kernels()))
            .collect::<Result<_>>()?;
        match self.mode {
            SimulationMode::Cells => {
                let xs = self.cell.inputs(&toks);
                let bs = &self.spectra[index].qkv;
                for chunk in (0..rows).collect::<Vec<_>>().chunks(self.plan.capacity) {
                    *passes += 1;
                    for &o in chunk {
                        let (tok, p, m) = row_kernel(o);
                        out[o] = xs.dot(tok, &bs[p], m);
                    }
                }
            }
            SimulationMode::Canvas => {
                let inputs = self.token_tensors(x)?;
                for chunk in (0..rows).collect::<Vec<_>>().chunks(self.plan.capacity) {
                    let mut dense = Tensor::zeros(&[chunk.len(), t, self.cell.h, self.cell.h]);
                    for (r, &o) in chunk.iter().enumerate() {
                        let (tok, p, m) = row_kernel(o);
                        dense.data_mut()[(r * t + tok) * hw..][..hw].copy_from_slice(&banks[p].data()[m * hw..][..hw]);
                    }
                    let (vals, plans) = mixed_tiling(&inputs, &dense, &self.device(), false)?;
                    *passes += plans.len();
                    for (&o, v) in chunk.iter().zip(vals) {
                        out[o] = v.data()[0];
                    }
                }
            }
        }
        let h = self.cell.h;
        let mut result = Vec::with_capacity(3);
        for (p, proj) in [&b.attn.wq, &b.attn.wk, &b.attn.wv].into_iter().enumerate() {
            let mut vals: Vec<f64> = (0..t).flat_map(|tok| out[tok * 3 * hw + p * hw..][..hw].to_vec()).collect();
            add_bias(&mut vals, proj.bias(), hw);
            result.push(Tensor::new(vec![t, h, h], vals)?);
        }
        let v = result.pop().unwrap();
        let k = result.pop().unwrap();
        let q = result.pop().unwrap();
        Ok([q, k, v])
    }

    /// Depthwise mixed tiling with the keys as kernels: row `i T + j`
    /// correlates query `i` with key `j`.
    fn scores(&self, q: &Tensor, k: &Tensor, passes: &mut usize) -> Result<Tensor> {
        let (t, hw, qs) = Self::tokens(q);
        let ks = chunks_of(k.data(), hw);
        let rows = t * t;
        let mut out = vec![0.0; rows];
        match self.mode {
            SimulationMode::Cells => {
                let qf = self.cell.inputs(&qs);
                let kf = self.cell.kernels(&ks);
                for chunk in (0..rows).collect::<Vec<_>>().chunks(self.plan.capacity) {
                    *passes += 1;
                    for &o in chunk {
                        out[o] = qf.dot(o / t, &kf, o % t);
                    }
                }
            }
            SimulationMode::Canvas => {
                let inputs = self.token_tensors(q)?;
                for chunk in (0..rows).collect::<Vec<_>>().chunks(self.plan.capacity) {
                    let mut dense = Tensor::zeros(&[chunk.len(), t, self.cell.h, self.cell.h]);
                    for (r, &o) in chunk.iter().enumerate() {
                        dense.data_mut()[(r * t + o / t) * hw..][..hw].copy_from_slice(ks[o % t]);
                    }
                    let (vals, plans) = mixed_tiling(&inputs, &dense, &self.device(), false)?;
                    *passes += plans.len();
                    for (&o, v) in chunk.iter().zip(vals) {
                        out[o] = v.data()[0];
                    }
                }
            }
        }
        Tensor::new(vec![t, t], out)
    }

    /// Mixed tiling with `1 × 1` kernels: row `i` holds the weights
    /// `A[i, ·]` and sums the weighted values on its centre cell.
    fn weighted_sum(&self, a: &Tensor, v: &Tensor, passes: &mut usize) -> Result<Tensor> {
        let (t, hw, vs) = Self::tokens(v);
        let h = self.cell.h;
        let mut out = vec![0.0; t * hw];
        match self.mode {
            SimulationMode::Cells => {
                let vf: Vec<Vec<Complex64>> = vs.iter().map(|x| self.point.spectrum(x, h, h, false)).collect();
                let rows: Vec<usize> = (0..t).collect();
                for chunk in rows.chunks(self.plan.pointwise_capacity) {
                    *passes += 1;
                    for &i in chunk {
                        let mut acc = vec![Complex64::new(0.0, 0.0); hw];
                        for (j, s) in vf.iter().enumerate() {
                            let w = a.data()[i * t + j];
                            for (x, y) in acc.iter_mut().zip(s) {
                                *x += y * w;
                            }
                        }
                        self.point.inverse(&mut acc);
                        for (o, c) in out[i * hw..][..hw].iter_mut().zip(&acc) {
                            *o = c.re;
                        }
                    }
                }
            }
            SimulationMode::Canvas => {
                let inputs = self.token_tensors(v)?;
                let (vals, plans) = mixed_tiling(&inputs, &a.reshape(&[t, t, 1, 1])?, &self.device(), false)?;
                *passes += plans.len();
                for (i, y) in vals.iter().enumerate() {
                    out[i * hw..][..hw].copy_from_slice(y.data());
                }
            }
        }
        Tensor::new(vec![t, h, h], out)
    }

    /// Kernel tiling, one token per pass group: every token meets all
    /// `r H W` expansion kernels, then each expanded token meets its slice
    /// of the reduction bank and the `r` partial maps are summed.
    fn mlp(&self, index: usize, b: &EncoderBlock, x: &Tensor, passes: &mut usize) -> Result<Tensor> {
        let (t, hw, toks) = Self::tokens(x);
        let h = self.cell.h;
        let r = b.mlp.ratio();
        let per_pass = self.plan.capacity * self.plan.capacity;
        let mut hidden = vec![0.0; t * r * hw];
        match self.mode {
            SimulationMode::Cells => {
                let xs = self.cell.inputs(&toks);
                let bank = &self.spectra[index].expand;
                for tok in 0..t {
                    for chunk in (0..r * hw).collect::<Vec<_>>().chunks(per_pass) {
                        *passes += 1;
                        for &m in chunk {
                            hidden[tok * r * hw + m] = xs.dot(tok, bank, m);
                        }
                    }
                }
            }
            SimulationMode::Canvas => {
                let kernels: Vec<Tensor> = chunks_of(b.mlp.expand.kernels().data(), hw)
                    .into_iter()
                    .map(|k| Tensor::new(vec![h, h], k.to_vec()))
                    .collect::<Result<_>>()?;
                for (tok, xt) in self.token_tensors(x)?.iter().enumerate() {
                    let (vals, plans) = kernel_tiling(xt, &kernels, &self.device())?;
                    *passes += plans.len();
                    for (m, v) in vals.iter().enumerate() {
                        hidden[tok * r * hw + m] = v.data()[0];
                    }
                }
            }
        }
        add_bias(&mut hidden, b.mlp.expand.bias(), r * hw);
        let act = gelu(&Tensor::new(vec![t * r, h, h], hidden)?);
        let acts = chunks_of(act.data(), hw);

        let mut out = vec![0.0; t * hw];
        match self.mode {
            SimulationMode::Cells => {
                let af = self.cell.inputs(&acts);
                let bank = &self.spectra[index].reduce;
                for (e, _) in acts.iter().enumerate() {
                    let (tok, j) = (e / r, e % r);
                    for chunk in (0..hw).collect::<Vec<_>>().chunks(per_pass) {
                        *passes += 1;
                        for &m in chunk {
                            out[tok * hw + m] += af.dot(e, bank, j * hw + m);
                        }
                    }
                }
            }
            SimulationMode::Canvas => {
                let red = b.mlp.reduce.kernels().data();
                for (e, a) in acts.iter().enumerate() {
                    let (tok, j) = (e / r, e % r);
                    let kernels: Vec<Tensor> = (0..hw)
                        .map(|m| Tensor::new(vec![h, h], red[(m * r + j) * hw..][..hw].to_vec()))
                        .collect::<Result<_>>()?;
                    let (vals, plans) = kernel_tiling(&Tensor::new(vec![h, h], a.to_vec())?, &kernels, &self.device())?;
                    *passes += plans.len();
                    for (m, v) in vals.iter().enumerate() {
                        out[tok * hw + m] += v.data()[0];
                    }
                }
            }
        }
        add_bias(&mut out, b.mlp.reduce.bias(), hw);
        Tensor::new(vec![t, h, h], out)
    }

    fn device(&self) -> DeviceSpec {
        self.plan.device
    }

    fn token_tensors(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let h = self.cell.h;
        chunks_of(x.data(), h * h)
            .into_iter()
            .map(|s| Tensor::new(vec![h, h], s.to_vec()))
            .collect()
    }
}

/// Optical versus electronic logits over a set of images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub mode: SimulationMode,
    pub images: usize,
    /// Largest `max |optical - electronic| / max |electronic|` over images.
    pub max_rel_deviation: f64,
    pub max_abs_deviation: f64,
    pub argmax_agreement: usize,
    pub inferences_per_image: usize,
    pub planned_inferences: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative logit deviation that counts as agreement.
pub const SIMULATION_TOLERANCE: f64 = 1e-6;

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Runs every image both ways. The model is evaluated in double precision.
pub fn compare_paths(
    model: &ConvShareViT,
    images: &[Tensor],
    device: &DeviceSpec,
    mode: SimulationMode,
) -> Result<SimulationReport> {
    let mut model = model.clone();
    model.set_precision(Precision::Double);
    let sim = OpticalSimulator::new(&model, device, mode)?;
    let (mut rel, mut abs, mut agree, mut inferences) = (0.0f64, 0.0f64, 0, 0);
    for img in images {
        let img = img.to_precision(Precision::Double);
        let e = model.forward(&img)?;
        let o = sim.run(&img)?;
        let d = o.logits.max_abs_diff(&e)?;
        let scale = e.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        abs = abs.max(d);
        rel = rel.max(if scale > 0.0 { d / scale } else { d });
        if argmax(o.logits.data()) == argmax(e.data()) {
            agree += 1;
        }
        inferences = o.inferences();
    }
    let planned = sim.plan().total;
    Ok(SimulationReport {
        schema_version: SIMULATION_SCHEMA_VERSION,
        mode,
        images: images.len(),
        max_rel_deviation: rel,
        max_abs_deviation: abs,
        argmax_agreement: agree,
        inferences_per_image: inferences,
        planned_inferences: planned,
        tolerance: SIMULATION_TOLERANCE,
        passed: rel < SIMULATION_TOLERANCE && agree == images.len() && inferences == planned,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PositionalKind};
    use crate::tensor::PaddingMode;
    use crate::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            channels: 1,
            patch_size: 4,
            embed_h: 4,
            embed_w: 4,
            heads: 1,
            depth: 2,
            mlp_ratio: 2,
            positional: PositionalKind::Trainable,
            num_classes: 3,
            weight_sharing: true,
            qkv_padding: PaddingMode::Valid,
            bias: true,
        }
    }

    fn images(rng: &mut ChaCha8Rng, n: usize, c: &ModelConfig) -> Vec<Tensor> {
        (0..n)
            .map(|_| Tensor::from_fn(&[c.channels, c.image_size, c.image_size], |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn cell_and_canvas_modes_match_the_electronic_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = tiny();
        let model = ConvShareViT::init(&c, &mut rng).unwrap();
        let imgs = images(&mut rng, 3, &c);
        // small device: several passes per stage
        let device = DeviceSpec::new(35, 1e3).unwrap();
        let plan = plan_inferences(&c, &device).unwrap();
        assert!(plan.per_block.qkv > 1 && plan.per_block.mlp > plan.tokens);
        let cells = compare_paths(&model, &imgs, &device, SimulationMode::Cells).unwrap();
        let canvas = compare_paths(&model, &imgs, &device, SimulationMode::Canvas).unwrap();
        for r in [&cells, &canvas] {
            assert!(r.passed, "{r:?}");
            assert!(r.max_rel_deviation < 1e-12);
            assert_eq!(r.inferences_per_image, plan.total);
        }
        let sim_a = OpticalSimulator::new(&model, &device, SimulationMode::Cells).unwrap();
        let sim_b = OpticalSimulator::new(&model, &device, SimulationMode::Canvas).unwrap();
        let (a, b) = (sim_a.run(&imgs[0]).unwrap(), sim_b.run(&imgs[0]).unwrap());
        assert!(a.logits.max_abs_diff(&b.logits).unwrap() < 1e-12);
        assert_eq!(a.per_block, b.per_block);
        assert_eq!(a.per_block[0], plan.per_block);
    }

    #[test]
    fn stage_counts_follow_the_plan_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = ModelConfig {
            bias: false,
            embed_h: 5,
            embed_w: 5,
            ..tiny()
        };
        let model = ConvShareViT::init(&c, &mut rng).unwrap();
        let device = DeviceSpec::new(45, 1e3).unwrap();
        let r = compare_paths(&model, &images(&mut rng, 2, &c), &device, SimulationMode::Cells).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn rejects_unsupported_models_and_small_devices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for c in [
            ModelConfig { heads: 4, ..tiny() },
            ModelConfig { weight_sharing: false, ..tiny() },
            ModelConfig { qkv_padding: PaddingMode::Same, ..tiny() },
        ] {
            let m = ConvShareViT::init(&c, &mut rng).unwrap();
            assert!(matches!(
                OpticalSimulator::new(&m, &DeviceSpec::reference(), SimulationMode::Cells),
                Err(Error::Config(_))
            ));
        }
        let m = ConvShareViT::init(&tiny(), &mut rng).unwrap();
        match OpticalSimulator::new(&m, &DeviceSpec::new(4, 1.0).unwrap(), SimulationMode::Cells) {
            Err(Error::Infeasible { stage, .. }) => assert_eq!(stage, "qkv"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn single_precision_models_are_simulated_in_double() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m = ConvShareViT::init(&tiny(), &mut rng).unwrap();
        m.set_precision(Precision::Single);
        let r = compare_paths(&m, &images(&mut rng, 1, &tiny()), &DeviceSpec::reference(), SimulationMode::Cells).unwrap();
        assert!(r.passed, "{r:?}");
    }
}
