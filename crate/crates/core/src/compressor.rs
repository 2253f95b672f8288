//! Token utility scoring with evaluator heads and budgeted token deletion.

use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::pilot::EvaluatorHeadSet;
use crate::trace::AttentionTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Average,
    Max,
}

/// Which model consumes the compressed prompt. Does not affect scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "UPPERCASE")]
pub enum InferenceMode {
    /// A different model runs on the compressed prompt.
    #[default]
    #[value(name = "emi")]
    Emi,
    /// The compressing model runs on its own compressed prompt.
    #[value(name = "nmi")]
    Nmi,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Budget {
    /// Keep exactly this many tokens.
    Tokens(usize),
    /// Keep `round(N / ratio)` tokens.
    Ratio(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionConfig {
    pub observation_window: usize,
    pub kernel: usize,
    pub pool: PoolKind,
    pub budget: Budget,
    pub protected_tail: usize,
    pub mode: InferenceMode,
}

impl CompressionConfig {
    /// Config with the tail protected up to the observation window.
    pub fn new(observation_window: usize, kernel: usize, budget: Budget) -> Self {
        CompressionConfig {
            observation_window,
            kernel,
            pool: PoolKind::Average,
            budget,
            protected_tail: observation_window,
            mode: InferenceMode::Emi,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.observation_window == 0 {
            return arg("observation window must be at least 1");
        }
        if self.kernel == 0 {
            return arg("pooling kernel must be at least 1");
        }
        match self.budget {
            Budget::Tokens(b) if b < self.protected_tail => arg(format!(
                "budget {b} is smaller than the protected tail {}",
                self.protected_tail
            )),
            Budget::Ratio(r) if !(r >= 1.0) || !r.is_finite() => {
                arg(format!("compression ratio {r} must be a finite number >= 1"))
            }
            _ => Ok(()),
        }
    }

    /// Token budget for a prompt of `n` tokens.
    pub fn resolve_budget(&self, n: usize) -> Result<usize> {
        self.validate()?;
        Ok(match self.budget {
            Budget::Tokens(b) => b,
            Budget::Ratio(r) => self.protected_tail.max((n as f64 / r).round() as usize),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtilityScores {
    pub values: Vec<f64>,
    pub heads_used: EvaluatorHeadSet,
    /// Sum of each head's window-averaged row before pooling, in head order.
    pub prepool_head_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedPrompt {
    pub retained_indices: Vec<usize>,
    pub retained_token_ids: Vec<u32>,
    pub retained_texts: Option<Vec<String>>,
    pub original_len: usize,
    pub achieved_kappa2: f64,
}

/// On-disk form of a compressed prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedPromptJson {
    pub retained_indices: Vec<usize>,
    pub original_len: usize,
    pub kappa2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl CompressedPrompt {
    pub fn len(&self) -> usize {
        self.retained_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.retained_indices.is_empty()
    }

    pub fn to_json(&self) -> CompressedPromptJson {
        CompressedPromptJson {
            retained_indices: self.retained_indices.clone(),
            original_len: self.original_len,
            kappa2: self.achieved_kappa2,
            text: render(self).ok(),
        }
    }
}

/// Same-length, stride-1 pooling over a centered window of nominal width
/// `kernel`. Windows are clipped at the edges; the average divides by the
/// number of in-range elements.
pub fn pool_1d(values: &[f64], kernel: usize, kind: PoolKind) -> Result<Vec<f64>> {
    if kernel == 0 {
        return arg("pooling kernel must be at least 1");
    }
    let left = (kernel - 1) / 2;
    let right = kernel - 1 - left;
    let n = values.len();
    Ok((0..n)
        .map(|i| {
            let window = &values[i.saturating_sub(left)..(i + right + 1).min(n)];
            match kind {
                PoolKind::Average => window.iter().sum::<f64>() / window.len() as f64,
                PoolKind::Max => window.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect())
}

/// Per head: average the last `observation_window` attention rows, pool the
/// result, then sum the pooled vectors over the heads in list order.
pub fn utility_scores(
    trace: &AttentionTrace,
    heads: &EvaluatorHeadSet,
    config: &CompressionConfig,
) -> Result<UtilityScores> {
    let n_o = config.observation_window;
    if n_o == 0 || config.kernel == 0 {
        return arg("observation window and kernel must be at least 1");
    }
    if trace.window < n_o {
        return arg(format!(
            "trace stores {} rows per head, observation window needs {n_o}",
            trace.window
        ));
    }
    if !trace.has_layer(heads.layer) {
        return Err(Error::Coverage(format!(
            "evaluator layer {} not captured (trace has layers {:?})",
            heads.layer, trace.layers_present
        )));
    }
    let n = trace.seq_len;
    let mut values = vec![0.0; n];
    let mut prepool_head_sums = Vec::with_capacity(heads.heads.len());
    for &head in &heads.heads {
        let block = trace.head_block(heads.layer, head).ok_or_else(|| {
            Error::Coverage(format!("head {head} outside the trace's {} heads", trace.num_heads))
        })?;
        let mut mean = vec![0.0f64; n];
        for row in block.chunks_exact(n).skip(trace.window - n_o) {
            for (m, &w) in mean.iter_mut().zip(row) {
                *m += w as f64;
            }
        }
        for m in &mut mean {
            *m /= n_o as f64;
        }
        prepool_head_sums.push(mean.iter().sum());
        for (v, p) in values.iter_mut().zip(pool_1d(&mean, config.kernel, config.pool)?) {
            *v += p;
        }
    }
    Ok(UtilityScores {
        values,
        heads_used: heads.clone(),
        prepool_head_sums,
    })
}

/// Indices kept under `budget`: the last `protected_tail` positions, then the
/// highest scores among the rest (ties to the lower index), ascending.
pub fn select_indices(scores: &[f64], budget: usize, protected_tail: usize) -> Result<Vec<usize>> {
    if budget < protected_tail {
        return arg(format!("budget {budget} is smaller than the protected tail {protected_tail}"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return arg(format!("utility score {bad} is not finite"));
    }
    let n = scores.len();
    if budget >= n {
        return Ok((0..n).collect());
    }
    let tail_start = n - protected_tail.min(n);
    let mut candidates: Vec<usize> = (0..tail_start).collect();
    candidates.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    candidates.truncate(budget - (n - tail_start));
    candidates.extend(tail_start..n);
    candidates.sort_unstable();
    Ok(candidates)
}

pub fn compress(
    token_ids: &[u32],
    token_texts: Option<&[String]>,
    scores: &UtilityScores,
    config: &CompressionConfig,
) -> Result<CompressedPrompt> {
    let n = token_ids.len();
    if scores.values.len() != n {
        return arg(format!("{} scores for {n} tokens", scores.values.len()));
    }
    if let Some(texts) = token_texts {
        if texts.len() != n {
            return arg(format!("{} token texts for {n} tokens", texts.len()));
        }
    }
    let budget = config.resolve_budget(n)?;
    let retained_indices = select_indices(&scores.values, budget, config.protected_tail)?;
    let kept = retained_indices.len();
    Ok(CompressedPrompt {
        retained_token_ids: retained_indices.iter().map(|&i| token_ids[i]).collect(),
        retained_texts: token_texts.map(|t| retained_indices.iter().map(|&i| t[i].clone()).collect()),
        original_len: n,
        achieved_kappa2: if kept == 0 { 1.0 } else { n as f64 / kept as f64 },
        retained_indices,
    })
}

/// Retained token texts joined in order.
pub fn render(prompt: &CompressedPrompt) -> Result<String> {
    prompt
        .retained_texts
        .as_ref()
        .map(|t| t.concat())
        .ok_or_else(|| Error::Capability("compressed prompt carries no token texts".into()))
}

/// Scores the trace with the evaluator heads and compresses its tokens.
/// Token texts come from the trace when it has them.
pub fn compress_pipeline(
    trace: &AttentionTrace,
    heads: &EvaluatorHeadSet,
    config: &CompressionConfig,
    token_ids: &[u32],
) -> Result<CompressedPrompt> {
    if token_ids.len() != trace.seq_len {
        return Err(Error::Mismatch(format!(
            "{} tokens for a trace of length {}",
            token_ids.len(),
            trace.seq_len
        )));
    }
    let scores = utility_scores(trace, heads, config)?;
    compress(token_ids, trace.token_texts.as_deref(), &scores, config)
}
