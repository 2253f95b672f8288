//! A tiny deterministic decoder-only transformer used to produce attention
//! traces without an external runtime, plus a fabricator for traces with
//! planted attention patterns.
//!
//! Weights are drawn from a ChaCha8 stream seeded with `ModelConfig::seed`,
//! uniformly in `[-1/sqrt(d), 1/sqrt(d)]`, in this order: token embedding
//! (`vocab x d`), then for each layer the query, key, value and output
//! projections (`d x d` each), the feed-forward input (`d x 4d`) and output
//! (`4d x d`) matrices. Every matrix is filled row-major. There is no training.
//!
//! Each block is pre-normalized: `x += Attn(LN(x))`, then `x += FFN(LN(x))`,
//! with a parameter-free layer norm, GELU feed-forward, and sinusoidal
//! positions added to the embeddings.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::tokenizer;
use crate::trace::AttentionTrace;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Positional {
    #[default]
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub positional: Positional,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            num_heads: 4,
            head_dim: 16,
            vocab_size: tokenizer::VOCAB_SIZE,
            max_seq_len: 4096,
            seed: 0,
            positional: Positional::Sinusoidal,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.head_dim * self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.model_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.head_dim == 0 || self.vocab_size == 0 {
            return arg("num_layers, num_heads, head_dim and vocab_size must all be at least 1");
        }
        if self.max_seq_len == 0 {
            return arg("max_seq_len must be at least 1");
        }
        Ok(())
    }

    pub fn model_id(&self) -> String {
        format!(
            "reference-L{}-H{}-dk{}-seed{}",
            self.num_layers, self.num_heads, self.head_dim, self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub query: Array2<f64>,
    pub key: Array2<f64>,
    pub value: Array2<f64>,
    pub output: Array2<f64>,
    pub ffn_in: Array2<f64>,
    pub ffn_out: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ReferenceModel {
    config: ModelConfig,
    embedding: Array2<f64>,
    layers: Vec<LayerWeights>,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || (2.0 * rng.gen::<f64>() - 1.0) * bound)
}

/// Sinusoidal encoding: `sin(pos / 10000^(2i/d))` on even and `cos` on odd dims.
pub fn positional_encoding(pos: usize, dim: usize) -> Array1<f64> {
    Array1::from_shape_fn(dim, |j| {
        let pair = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

pub fn layer_norm(x: ArrayView1<f64>) -> Array1<f64> {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    x.mapv(|v| (v - mean) * scale)
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.raw_dim());
    for (src, mut dst) in x.axis_iter(Axis(0)).zip(out.axis_iter_mut(Axis(0))) {
        dst.assign(&layer_norm(src));
    }
    out
}

impl ReferenceModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embedding = uniform_matrix(&mut rng, config.vocab_size, d, bound);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                query: uniform_matrix(&mut rng, d, d, bound),
                key: uniform_matrix(&mut rng, d, d, bound),
                value: uniform_matrix(&mut rng, d, d, bound),
                output: uniform_matrix(&mut rng, d, d, bound),
                ffn_in: uniform_matrix(&mut rng, d, config.ffn_dim(), bound),
                ffn_out: uniform_matrix(&mut rng, config.ffn_dim(), d, bound),
            })
            .collect();
        Ok(ReferenceModel {
            config,
            embedding,
            layers,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn embedding(&self) -> &Array2<f64> {
        &self.embedding
    }

    pub fn layer(&self, index: usize) -> &LayerWeights {
        &self.layers[index]
    }

    /// Embedded input with positions added, `seq_len x d`.
    pub fn embed(&self, token_ids: &[u32]) -> Array2<f64> {
        let d = self.config.model_dim();
        let mut x = Array2::zeros((token_ids.len(), d));
        for (pos, (&id, mut row)) in token_ids.iter().zip(x.axis_iter_mut(Axis(0))).enumerate() {
            row.assign(&(&self.embedding.row(id as usize) + &positional_encoding(pos, d)));
        }
        x
    }

    /// Runs the prefill pass and captures the attention rows of the last
    /// `window` query positions for every head of each layer in `capture`.
    ///
    /// Blocks after the deepest captured layer cannot affect the captured
    /// rows, so they are not evaluated.
    pub fn prefill(&self, token_ids: &[u32], capture: &[usize], window: usize) -> Result<AttentionTrace> {
        let cfg = &self.config;
        let n = token_ids.len();
        if n == 0 {
            return arg("empty input sequence");
        }
        if n > cfg.max_seq_len {
            return Err(Error::Capacity {
                len: n,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&bad) = token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return arg(format!("token id {bad} outside vocabulary of {}", cfg.vocab_size));
        }
        if window == 0 || window > n {
            return arg(format!("window {window} not in [1, {n}]"));
        }
        let mut layers_present = capture.to_vec();
        layers_present.sort_unstable();
        layers_present.dedup();
        if let Some(&bad) = layers_present.iter().find(|&&l| l >= cfg.num_layers) {
            return arg(format!("capture layer {bad} outside [0, {})", cfg.num_layers));
        }

        let (h, dk) = (cfg.num_heads, cfg.head_dim);
        let block = window * n;
        let mut weights = vec![0.0f32; layers_present.len() * h * block];
        let mut x = self.embed(token_ids);
        let depth = layers_present.last().map_or(0, |&l| l + 1);
        let scale = 1.0 / (dk as f64).sqrt();

        for (l, lw) in self.layers.iter().enumerate().take(depth) {
            let slot = layers_present.binary_search(&l).ok();
            let xn = normalize_rows(&x);
            let q = xn.dot(&lw.query);
            let k = xn.dot(&lw.key);
            let v = xn.dot(&lw.value);
            let mut context = Array2::<f64>::zeros((n, cfg.model_dim()));

            for head in 0..h {
                let cols = s![.., head * dk..(head + 1) * dk];
                let (qh, kh, vh) = (q.slice(cols), k.slice(cols), v.slice(cols));
                let mut probs = vec![0.0f64; n];
                for i in 0..n {
                    let qi = qh.row(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        probs[j] = qi.dot(&kh.row(j)) * scale;
                        max = max.max(probs[j]);
                    }
                    let mut total = 0.0;
                    for p in &mut probs[..=i] {
                        *p = (*p - max).exp();
                        total += *p;
                    }
                    for p in &mut probs[..=i] {
                        *p /= total;
                    }
                    let mut ctx = context.slice_mut(s![i, head * dk..(head + 1) * dk]);
                    for (j, &p) in probs[..=i].iter().enumerate() {
                        ctx.scaled_add(p, &vh.row(j));
                    }
                    if let Some(slot) = slot {
                        if i + window >= n {
                            let row = i + window - n;
                            let start = (slot * h + head) * block + row * n;
                            for (dst, &p) in weights[start..start + i + 1].iter_mut().zip(&probs[..=i]) {
                                *dst = p as f32;
                            }
                        }
                    }
                }
            }
            x = x + context.dot(&lw.output);
            let hidden = normalize_rows(&x).dot(&lw.ffn_in).mapv(gelu);
            x = x + hidden.dot(&lw.ffn_out);
        }

        Ok(AttentionTrace {
            model_id: cfg.model_id(),
            num_layers: cfg.num_layers,
            num_heads: h,
            seq_len: n,
            window,
            layers_present,
            weights,
            token_ids: token_ids.to_vec(),
            token_texts: Some(token_ids.iter().map(|&id| tokenizer::id_text(id)).collect()),
        })
    }
}

/// Builds the model described by `config` and runs one prefill pass.
pub fn forward_prefill(
    token_ids: &[u32],
    config: &ModelConfig,
    capture: &[usize],
    window: usize,
) -> Result<AttentionTrace> {
    ReferenceModel::new(config.clone())?.prefill(token_ids, capture, window)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Background {
    #[default]
    UniformCausal,
}

/// A head whose final attention row puts `mass` on `targets`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentratedCell {
    pub layer: usize,
    pub head: usize,
    pub targets: Vec<usize>,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FabricationSpec {
    pub num_layers: usize,
    pub num_heads: usize,
    pub seq_len: usize,
    pub window: usize,
    #[serde(default)]
    pub cells: Vec<ConcentratedCell>,
    #[serde(default)]
    pub background: Background,
    /// Defaults to `i % 256` at position `i`.
    #[serde(default)]
    pub token_ids: Option<Vec<u32>>,
}

/// Builds a trace where every row is uniform over its causal prefix, except
/// the last row of each concentrated cell: `mass` spread evenly over the
/// targets and `1 - mass` evenly over the remaining positions.
pub fn fabricate_trace(spec: &FabricationSpec) -> Result<AttentionTrace> {
    let (l, h, n, w) = (spec.num_layers, spec.num_heads, spec.seq_len, spec.window);
    if l == 0 || h == 0 || n == 0 {
        return arg("fabricated trace needs at least one layer, head and token");
    }
    if w == 0 || w > n {
        return arg(format!("window {w} not in [1, {n}]"));
    }
    let token_ids = match &spec.token_ids {
        Some(ids) if ids.len() != n => {
            return arg(format!("{} token ids for sequence length {n}", ids.len()));
        }
        Some(ids) => ids.clone(),
        None => (0..n).map(|i| (i % 256) as u32).collect(),
    };

    let mut planted: Vec<Option<Vec<f64>>> = vec![None; l * h];
    for cell in &spec.cells {
        if cell.layer >= l || cell.head >= h {
            return arg(format!("cell ({}, {}) outside {l}x{h}", cell.layer, cell.head));
        }
        if !(cell.mass > 0.0 && cell.mass <= 1.0) {
            return arg(format!("mass {} not in (0, 1]", cell.mass));
        }
        let mut targets = cell.targets.clone();
        targets.sort_unstable();
        targets.dedup();
        if targets.is_empty() {
            return arg("concentrated cell has an empty target set");
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return arg(format!("target index {bad} outside [0, {n})"));
        }
        let rest = n - targets.len();
        if rest == 0 && cell.mass < 1.0 {
            return arg("targets cover the whole row, so the mass must be 1");
        }
        let on = cell.mass / targets.len() as f64;
        let off = if rest == 0 { 0.0 } else { (1.0 - cell.mass) / rest as f64 };
        let mut row = vec![off; n];
        for &t in &targets {
            row[t] = on;
        }
        let slot = &mut planted[cell.layer * h + cell.head];
        if slot.is_some() {
            return arg(format!("cell ({}, {}) planted twice", cell.layer, cell.head));
        }
        *slot = Some(row);
    }

    let mut weights = Vec::with_capacity(l * h * w * n);
    for layer in 0..l {
        for head in 0..h {
            for r in 0..w {
                let q = n - w + r;
                match &planted[layer * h + head] {
                    Some(row) if r + 1 == w => weights.extend(row.iter().map(|&p| p as f32)),
                    _ => {
                        let p = (1.0 / (q + 1) as f64) as f32;
                        weights.extend((0..n).map(|j| if j <= q { p } else { 0.0 }));
                    }
                }
            }
        }
    }

    Ok(AttentionTrace {
        model_id: "fabricated".to_string(),
        num_layers: l,
        num_heads: h,
        seq_len: n,
        window: w,
        layers_present: (0..l).collect(),
        weights,
        token_texts: Some(token_ids.iter().map(|&id| tokenizer::id_text(id)).collect()),
        token_ids,
    })
}
