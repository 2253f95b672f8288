//! Evaluator-head prompt compression.
//!
//! A handful of attention heads in the early-to-middle layers of a decoder
//! (the evaluator heads) put most of their final-row attention on the tokens
//! a task depends on. This crate finds those heads from probe prompts with
//! known evidence, scores prompt tokens with their attention during prefill,
//! deletes the lowest-scoring tokens down to a budget, and accounts for the
//! attention cost saved.
//!
//! Modules:
//! - [`trace`]: attention traces and the `.ehpct` container
//! - [`reference`]: a small deterministic transformer that emits traces
//! - [`pilot`]: probe synthesis, evidence scores, head selection
//! - [`compressor`]: utility scores, pooling, budgeted deletion
//! - [`cost`]: prefill/decode attention cost model
//! - [`cli`]: the `ehpc` command

pub mod cli;
pub mod compressor;
pub mod cost;
pub mod error;
pub mod pilot;
pub mod presets;
pub mod reference;
pub mod tokenizer;
pub mod trace;

pub use compressor::{
    compress, compress_pipeline, pool_1d, render, utility_scores, Budget, CompressedPrompt, CompressionConfig,
    InferenceMode, PoolKind, UtilityScores,
};
pub use cost::{check_speedup, cost_decode, cost_pipeline, cost_prefill, CostParams, CostReport};
pub use error::{Error, Result};
pub use pilot::{
    accumulate_evidence, build_matrix, select_heads, synthesize_chain_case, synthesize_haystack, EvaluatorHeadSet,
    EvidenceScoreMatrix, PilotCase,
};
pub use presets::load_preset;
pub use reference::{fabricate_trace, forward_prefill, FabricationSpec, ModelConfig, ReferenceModel};
pub use trace::{read_trace, validate_trace, write_trace, AttentionTrace, Violation};
