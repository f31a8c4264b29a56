//! Analytic floating-point-operation accounting for prefill, parameterized
//! by any model geometry. Multiply-accumulate counts as 2 FLOPs.
//!
//! Two conventions coexist:
//!
//! - The *full* total counts everything a forward pass executes, including
//!   the sequence-quadratic attention score and value-mixing terms.
//! - The *linear* total counts only the projection, feed-forward and output
//!   head terms (the classic "2 x parameters x tokens" style estimate).
//!   Headline first-token FLOPs figures for large models are usually quoted
//!   under this convention, so the reduction table uses it for both columns.

use crate::model::ModelConfig;
use serde::Serialize;

/// Which prefill regime a report describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FlopsMode {
    Vanilla,
    BlockPaper,
    BlockExact,
}

/// How block-mode cross-attention over cached keys is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockAccounting {
    /// Final-block compute only; independent of the cached prefix length.
    Paper,
    /// Adds the query-over-cached-keys score and value terms.
    Exact,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FlopsBreakdown {
    pub qkv: u64,
    pub scores: u64,
    pub values: u64,
    pub out_proj: u64,
    pub ffn: u64,
    pub head: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.qkv + self.scores + self.values + self.out_proj + self.ffn + self.head
    }

    /// Projection/FFN/head terms only; excludes the quadratic attention
    /// score and value-mixing terms.
    pub fn linear_total(&self) -> u64 {
        self.qkv + self.out_proj + self.ffn + self.head
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlopsReport {
    pub mode: FlopsMode,
    pub prompt_len: usize,
    pub final_block_len: usize,
    pub total_flops: u64,
    pub breakdown: FlopsBreakdown,
}

fn breakdown_for(config: &ModelConfig, n: u64) -> FlopsBreakdown {
    let layers = config.n_layers as u64;
    let d = config.d_model as u64;
    let kv_dim = config.kv_dim() as u64;
    let heads = config.n_heads as u64;
    let hd = config.head_dim as u64;
    let ffn = config.d_ffn as u64;
    let vocab = config.vocab_size as u64;
    FlopsBreakdown {
        qkv: layers * 2 * n * d * (d + 2 * kv_dim),
        scores: layers * 2 * n * n * heads * hd,
        values: layers * 2 * n * n * heads * hd,
        out_proj: layers * 2 * n * d * d,
        ffn: layers * 6 * n * d * ffn,
        head: 2 * d * vocab,
    }
}

/// FLOPs to the first token for a causal forward over an `n`-token prompt.
pub fn flops_vanilla(config: &ModelConfig, n: usize) -> FlopsReport {
    assert!(n >= 1);
    let breakdown = breakdown_for(config, n as u64);
    FlopsReport {
        mode: FlopsMode::Vanilla,
        prompt_len: n,
        final_block_len: n,
        total_flops: breakdown.total(),
        breakdown,
    }
}

/// FLOPs to the first token for block-mode prefill with `n_cached` prompt
/// tokens already resident in the cache and an `n_final`-token final block.
pub fn flops_block(
    config: &ModelConfig,
    n_final: usize,
    n_cached: usize,
    accounting: BlockAccounting,
) -> FlopsReport {
    assert!(n_final >= 1);
    let mut breakdown = breakdown_for(config, n_final as u64);
    let mode = match accounting {
        BlockAccounting::Paper => FlopsMode::BlockPaper,
        BlockAccounting::Exact => {
            let layers = config.n_layers as u64;
            let cross = layers
                * 2
                * n_final as u64
                * n_cached as u64
                * config.n_heads as u64
                * config.head_dim as u64;
            breakdown.scores += cross;
            breakdown.values += cross;
            FlopsMode::BlockExact
        }
    };
    FlopsReport {
        mode,
        prompt_len: n_final + n_cached,
        final_block_len: n_final,
        total_flops: breakdown.total(),
        breakdown,
    }
}

/// Prompt lengths of the bundled reduction table.
pub const TABLE_LENGTHS: [usize; 8] = [50, 512, 1024, 2048, 4096, 8192, 16_384, 32_768];

/// Final-block (user input) length the table assumes.
pub const TABLE_USER_LEN: usize = 50;

/// Reference targets for the llama3-8b-shape profile: reduction percentages
/// at prompt lengths 512..32K, the vanilla FLOPs column, and the constant
/// block-mode FLOPs value.
pub const TARGET_REDUCTIONS_PCT: [f64; 7] = [90.1, 95.0, 97.5, 98.7, 99.3, 99.6, 99.8];
pub const TARGET_VANILLA_FLOPS: [f64; 8] =
    [7.5e11, 7.6e12, 1.5e13, 3.0e13, 6.1e13, 1.2e14, 2.45e14, 4.9e14];
pub const TARGET_BLOCK_FLOPS: f64 = 7.5e11;

pub const REDUCTION_TOLERANCE_PP: f64 = 0.5;
pub const FLOPS_RELATIVE_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, Serialize)]
pub struct ReductionRow {
    pub prompt_len: usize,
    pub vanilla_flops: u64,
    pub block_flops: u64,
    pub reduction_pct: f64,
}

/// First-token FLOPs of vanilla vs warm-cache block prefill across the
/// bundled prompt lengths, user input fixed at 50 tokens. Both columns use
/// linear-convention totals so the ratios match the reference targets.
pub fn flops_reduction_table(config: &ModelConfig) -> Vec<ReductionRow> {
    flops_reduction_table_with(config, BlockAccounting::Paper)
}

/// Reduction table under a chosen block accounting. Exact accounting adds
/// the query-over-cached-keys attention cost to the block column, so its
/// reductions are strictly smaller than paper accounting at every length.
pub fn flops_reduction_table_with(
    config: &ModelConfig,
    accounting: BlockAccounting,
) -> Vec<ReductionRow> {
    TABLE_LENGTHS
        .iter()
        .map(|&len| {
            let n_final = TABLE_USER_LEN.min(len);
            let n_cached = len - n_final;
            let vanilla = flops_vanilla(config, len).breakdown.linear_total();
            let base = flops_block(config, n_final, n_cached, BlockAccounting::Paper);
            let block = match accounting {
                BlockAccounting::Paper => base.breakdown.linear_total(),
                BlockAccounting::Exact => {
                    let exact = flops_block(config, n_final, n_cached, BlockAccounting::Exact);
                    let cross = (exact.breakdown.scores - base.breakdown.scores)
                        + (exact.breakdown.values - base.breakdown.values);
                    base.breakdown.linear_total() + cross
                }
            };
            let reduction_pct = (1.0 - block as f64 / vanilla as f64) * 100.0;
            ReductionRow { prompt_len: len, vanilla_flops: vanilla, block_flops: block, reduction_pct }
        })
        .collect()
}

/// CSV form of the reduction table (comment-versioned header).
pub fn reduction_table_csv(rows: &[ReductionRow]) -> String {
    let mut out = String::from("# blockattn csv v1\nprompt_len,vanilla_flops,block_flops,reduction_pct\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.3}\n",
            r.prompt_len, r.vanilla_flops, r.block_flops, r.reduction_pct
        ));
    }
    out
}

/// Checks a reduction table against the bundled targets. Returns per-row
/// failure descriptions (empty means everything is within tolerance).
pub fn check_reduction_table(rows: &[ReductionRow]) -> Vec<String> {
    let mut failures = Vec::new();
    if rows.len() != TABLE_LENGTHS.len() {
        failures.push(format!("expected {} rows, got {}", TABLE_LENGTHS.len(), rows.len()));
        return failures;
    }
    for (i, row) in rows.iter().enumerate() {
        let target_vanilla = TARGET_VANILLA_FLOPS[i];
        let rel = (row.vanilla_flops as f64 - target_vanilla).abs() / target_vanilla;
        if rel > FLOPS_RELATIVE_TOLERANCE {
            failures.push(format!(
                "len {}: vanilla flops {:.3e} deviates {:.1}% from target {target_vanilla:.2e}",
                row.prompt_len,
                row.vanilla_flops as f64,
                rel * 100.0
            ));
        }
        let block_rel = (row.block_flops as f64 - TARGET_BLOCK_FLOPS).abs() / TARGET_BLOCK_FLOPS;
        if block_rel > FLOPS_RELATIVE_TOLERANCE {
            failures.push(format!(
                "len {}: block flops {:.3e} deviates {:.1}% from target {TARGET_BLOCK_FLOPS:.2e}",
                row.prompt_len,
                row.block_flops as f64,
                block_rel * 100.0
            ));
        }
        if i > 0 {
            let target_red = TARGET_REDUCTIONS_PCT[i - 1];
            let dev = (row.reduction_pct - target_red).abs();
            if dev > REDUCTION_TOLERANCE_PP {
                failures.push(format!(
                    "len {}: reduction {:.2}% deviates {dev:.2}pp from target {target_red}%",
                    row.prompt_len, row.reduction_pct
                ));
            }
        }
    }
    failures
}
