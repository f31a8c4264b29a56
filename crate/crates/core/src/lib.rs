//! Block-attention inference engine.
//!
//! A desk-scale decoder-only transformer in which every prompt block
//! computes its KV states independently, keys are cached content-addressed
//! at zero-based rotary positions, cached keys are re-rotated to their
//! offsets at reuse time, and only the final (query) block attends across
//! all blocks. Ships with an analytic FLOPs accountant, a latency
//! benchmark harness and a synthetic retrieval-workload simulator.
//!
//! The numeric core (`tensor`, `rope`, `model`) is generic over the scalar
//! type via [`scalar::Scalar`]; the engine layer and the file formats are
//! `f32`, re-exported through the aliases below.

pub mod blocks;
pub mod engine;
pub mod flops;
pub mod kvcache;
pub mod mask;
pub mod model;
mod parallel;
pub mod ragsim;
pub mod rng;
pub mod rope;
pub mod scalar;
pub mod tensor;
pub mod verify;

/// Working-precision matrix.
pub type Matrix = tensor::Matrix<f32>;
/// Working-precision rotary parameters.
pub type RopeParams = rope::RopeParams<f32>;
/// Working-precision model parameters.
pub type Weights = model::Weights<f32>;
/// Working-precision per-layer KV arrays.
pub type LayerKV = model::LayerKV<f32>;
/// Working-precision forward output.
pub type ForwardOutput = model::ForwardOutput<f32>;

pub use blocks::{
    block_key, detokenize, segment_rag_prompt, segment_rag_prompt_with, tokenize, Block,
    BlockError, BlockKey, BlockRole, PromptLayout, PromptSpec, SegmentOptions, TokenId,
};
pub use engine::{
    argmax, bench_layout, build_block_mask, Engine, EngineError, GenerateResult, PrefillMode,
    PrefillResult, TtftStats,
};
pub use flops::{
    flops_block, flops_reduction_table, flops_vanilla, BlockAccounting, FlopsBreakdown,
    FlopsMode, FlopsReport, ReductionRow,
};
pub use kvcache::{BlockKvCache, CacheError, CacheStats, KVEntry};
pub use mask::AttentionMask;
pub use model::{init_weights, ModelConfig, ModelError, Persist};
pub use ragsim::{
    load_corpus, run_sim, synth_queries, Corpus, QueryStream, SimError, SimQuery, SimReport,
};
pub use rope::{rope_apply, rope_shift, rope_unapply, RopeError};
