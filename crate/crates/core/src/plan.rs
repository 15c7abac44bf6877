//! Optical pass counts and latency of a model on a 4f device.
//!
//! Per encoder block, with `n = capacity(R, H, H)`:
//!
//! | stage        | tiling                    | passes                                  |
//! |--------------|---------------------------|-----------------------------------------|
//! | qkv          | mixed, depthwise          | `⌈3·T·H·W / n⌉`                         |
//! | scores       | mixed, depthwise          | `⌈T² / n⌉`                              |
//! | weighted_sum | mixed, 1×1 kernels        | `⌈T / capacity(R, H, 1)⌉`               |
//! | mlp          | kernel, one input a pass  | `T·⌈r·H·W / n²⌉ + r·T·⌈H·W / n²⌉`        |
//!
//! Mixed tiling holds one input row of `T` tokens, so `T` may not exceed
//! the stage's capacity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;
use crate::optics::{capacity, DeviceSpec};
use crate::tensor::PaddingMode;

pub const PLAN_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub qkv: usize,
    pub scores: usize,
    pub weighted_sum: usize,
    pub mlp: usize,
}

impl StageCounts {
    pub fn total(&self) -> usize {
        self.qkv + self.scores + self.weighted_sum + self.mlp
    }

    pub fn stages(&self) -> [(&'static str, usize); 4] {
        [
            ("qkv", self.qkv),
            ("scores", self.scores),
            ("weighted_sum", self.weighted_sum),
            ("mlp", self.mlp),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferencePlan {
    pub schema_version: u32,
    pub device: DeviceSpec,
    pub blocks: usize,
    pub tokens: usize,
    pub token_extent: usize,
    pub mlp_ratio: usize,
    /// Channels per pass for token-sized kernels.
    pub capacity: usize,
    /// Channels per pass for 1×1 kernels.
    pub pointwise_capacity: usize,
    pub per_block: StageCounts,
    pub total: usize,
    pub latency_s: f64,
}

fn infeasible(stage: &str, reason: String) -> Error {
    Error::Infeasible {
        stage: stage.into(),
        reason,
    }
}

fn stage_capacity(stage: &str, r: usize, m: usize, n: usize) -> Result<usize> {
    capacity(r, m, n).map_err(|e| match e {
        Error::Infeasible { reason, .. } => infeasible(stage, reason),
        other => other,
    })
}

/// Pass counts for `config` on `device`.
///
/// Only the single-head, shared, valid-padding shape has this schedule;
/// other configurations are rejected.
pub fn plan_inferences(config: &ModelConfig, device: &DeviceSpec) -> Result<InferencePlan> {
    config.validate()?;
    device.validate()?;
    if config.heads != 1 || !config.weight_sharing || config.qkv_padding != PaddingMode::Valid {
        return config_err("planning needs one head, shared weights and valid padding");
    }
    if config.embed_h != config.embed_w {
        return config_err("planning needs square tokens");
    }
    let (t, h, r) = (config.tokens(), config.embed_h, config.mlp_ratio);
    let hw = h * h;
    let res = device.resolution;

    let n = stage_capacity("qkv", res, h, h)?;
    if t > n {
        return Err(infeasible("qkv", format!("{t} tokens exceed capacity {n}")));
    }
    let qkv = (3 * t * hw).div_ceil(n);
    let scores = (t * t).div_ceil(n);
    let n1 = stage_capacity("weighted_sum", res, h, 1)?;
    if t > n1 {
        return Err(infeasible("weighted_sum", format!("{t} tokens exceed capacity {n1}")));
    }
    let weighted_sum = t.div_ceil(n1);
    let mlp = t * (r * hw).div_ceil(n * n) + r * t * hw.div_ceil(n * n);

    let per_block = StageCounts {
        qkv,
        scores,
        weighted_sum,
        mlp,
    };
    let total = config.depth * per_block.total();
    Ok(InferencePlan {
        schema_version: PLAN_SCHEMA_VERSION,
        device: *device,
        blocks: config.depth,
        tokens: t,
        token_extent: h,
        mlp_ratio: r,
        capacity: n,
        pointwise_capacity: n1,
        per_block,
        total,
        latency_s: estimate_latency(total, device),
    })
}

/// Seconds for `inferences` passes, one per clock tick.
pub fn estimate_latency(inferences: usize, device: &DeviceSpec) -> f64 {
    inferences as f64 / device.clock_hz
}

/// Milliseconds to one decimal, e.g. `"2.8 ms"`.
pub fn format_latency(seconds: f64) -> String {
    format!("{:.1} ms", seconds * 1e3)
}

impl InferencePlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serialises")
    }

    /// One row per block and stage with running totals, then a total row.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let ms = |n: usize| estimate_latency(n, &self.device) * 1e3;
        writeln!(s, "{:<6} {:<13} {:>7} {:>11} {:>12}", "layer", "stage", "count", "cumulative", "latency").unwrap();
        let mut cum = 0;
        for b in 0..self.blocks {
            for (stage, n) in self.per_block.stages() {
                cum += n;
                writeln!(s, "{:<6} {:<13} {:>7} {:>11} {:>9.3} ms", b + 1, stage, n, cum, ms(cum)).unwrap();
            }
        }
        writeln!(
            s,
            "{:<6} {:<13} {:>7} {:>11} {:>9.3} ms",
            "total",
            "",
            self.total,
            cum,
            self.latency_s * 1e3
        )
        .unwrap();
        writeln!(
            s,
            "capacity {} (pointwise {}), {} per block, {} passes at {} Hz: {}",
            self.capacity,
            self.pointwise_capacity,
            self.per_block.total(),
            self.total,
            self.device.clock_hz,
            format_latency(self.latency_s)
        )
        .unwrap();
        s
    }
}
