//! Attention-cost accounting for two-stage prefill with prompt compression.
//!
//! Costs are unit-free attention-score counts: `L * H * d_k` times the number
//! of query-key products per head. Projection and feed-forward work is not
//! modeled.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub layers: u64,
    pub heads: u64,
    pub head_dim: u64,
    /// Prompt tokens.
    pub prompt_len: u64,
    /// Generated tokens.
    pub generated: u64,
    /// Depth ratio `L / l*` of the compressing pass.
    pub kappa1: f64,
    /// Compression ratio of the prompt.
    pub kappa2: f64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.prompt_len == 0 {
            return arg("layers, heads, head_dim and prompt length must be at least 1");
        }
        if !(self.kappa1 >= 1.0) || !(self.kappa2 >= 1.0) || !self.kappa2.is_finite() {
            return arg(format!(
                "kappa1 ({}) and kappa2 ({}) must be finite and at least 1",
                self.kappa1, self.kappa2
            ));
        }
        if self.kappa1 > self.layers as f64 {
            return arg(format!(
                "kappa1 {} exceeds the layer count {}",
                self.kappa1, self.layers
            ));
        }
        Ok(())
    }

    fn width(&self) -> f64 {
        (self.layers * self.heads * self.head_dim) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub prefill_base: f64,
    pub decode_base: f64,
    pub prefill_stage1: f64,
    pub prefill_stage2: f64,
    pub prefill_pipeline: f64,
    pub decode_compressed: f64,
    pub prefill_ratio: f64,
    /// `None` when nothing is generated (both decode costs are zero).
    pub decode_ratio: Option<f64>,
}

/// Full prefill: `L * H * d_k * N^2`.
pub fn cost_prefill(p: &CostParams) -> f64 {
    let n = p.prompt_len as f64;
    p.width() * n * n
}

/// Decoding `t` tokens against an `N`-token cache: `L * H * d_k * (N t + t^2 / 2)`.
pub fn cost_decode(p: &CostParams) -> f64 {
    let (n, t) = (p.prompt_len as f64, p.generated as f64);
    p.width() * (n * t + t * t / 2.0)
}

/// Prefill factor of the two-stage pipeline relative to one full prefill.
pub fn prefill_factor(kappa1: f64, kappa2: f64) -> f64 {
    1.0 / kappa1 + 1.0 / (kappa2 * kappa2)
}

/// True when compressing then prefilling is cheaper than a single full prefill.
pub fn check_speedup(kappa1: f64, kappa2: f64) -> bool {
    prefill_factor(kappa1, kappa2) < 1.0
}

pub fn cost_pipeline(p: &CostParams) -> Result<CostReport> {
    p.validate()?;
    let prefill_base = cost_prefill(p);
    let decode_base = cost_decode(p);
    let prefill_stage1 = prefill_base / p.kappa1;
    let prefill_stage2 = prefill_base / (p.kappa2 * p.kappa2);
    let prefill_pipeline = prefill_stage1 + prefill_stage2;
    let (n, t) = (p.prompt_len as f64, p.generated as f64);
    let decode_compressed = p.width() * (t * n / p.kappa2 + t * t / 2.0);
    Ok(CostReport {
        prefill_base,
        decode_base,
        prefill_stage1,
        prefill_stage2,
        prefill_pipeline,
        decode_compressed,
        prefill_ratio: prefill_pipeline / prefill_base,
        decode_ratio: (decode_base > 0.0).then(|| decode_compressed / decode_base),
    })
}

/// Parameter swept over an inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Kappa1,
    Kappa2,
    PromptLen,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub from: u64,
    pub to: u64,
}

impl std::str::FromStr for Sweep {
    type Err = String;

    /// `name=lo..hi`, e.g. `kappa2=1..8`.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (name, range) = s.split_once('=').ok_or("expected name=lo..hi")?;
        let axis = match name.trim() {
            "kappa1" => SweepAxis::Kappa1,
            "kappa2" => SweepAxis::Kappa2,
            "n" | "prompt_len" => SweepAxis::PromptLen,
            "t" | "generated" => SweepAxis::Generated,
            other => return Err(format!("unknown sweep parameter `{other}`")),
        };
        let (lo, hi) = range.split_once("..").ok_or("expected lo..hi")?;
        let from: u64 = lo.trim().parse().map_err(|e| format!("bad lower bound: {e}"))?;
        let to: u64 = hi.trim().parse().map_err(|e| format!("bad upper bound: {e}"))?;
        if from > to {
            return Err(format!("empty range {from}..{to}"));
        }
        Ok(Sweep { axis, from, to })
    }
}

/// Cartesian grid of `base` with every sweep applied.
pub fn sweep_grid(base: CostParams, sweeps: &[Sweep]) -> Vec<CostParams> {
    let mut grid = vec![base];
    for sweep in sweeps {
        grid = grid
            .into_iter()
            .flat_map(|p| {
                (sweep.from..=sweep.to).map(move |v| {
                    let mut q = p;
                    match sweep.axis {
                        SweepAxis::Kappa1 => q.kappa1 = v as f64,
                        SweepAxis::Kappa2 => q.kappa2 = v as f64,
                        SweepAxis::PromptLen => q.prompt_len = v,
                        SweepAxis::Generated => q.generated = v,
                    }
                    q
                })
            })
            .collect();
    }
    grid
}

/// One CSV row per grid point.
pub fn write_sweep_csv<W: Write>(grid: &[CostParams], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "kappa1",
        "kappa2",
        "n",
        "t",
        "prefill_base",
        "decode_base",
        "prefill_stage1",
        "prefill_stage2",
        "prefill_pipeline",
        "decode_compressed",
        "prefill_ratio",
        "decode_ratio",
    ])
    .map_err(crate::pilot::csv_err)?;
    for p in grid {
        let r = cost_pipeline(p)?;
        w.write_record([
            p.kappa1.to_string(),
            p.kappa2.to_string(),
            p.prompt_len.to_string(),
            p.generated.to_string(),
            r.prefill_base.to_string(),
            r.decode_base.to_string(),
            r.prefill_stage1.to_string(),
            r.prefill_stage2.to_string(),
            r.prefill_pipeline.to_string(),
            r.decode_compressed.to_string(),
            r.prefill_ratio.to_string(),
            r.decode_ratio.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(crate::pilot::csv_err)?;
    }
    w.flush()?;
    Ok(())
}
