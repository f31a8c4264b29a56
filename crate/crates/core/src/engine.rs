//! Prefill paths and decoding.
//!
//! Three ways to produce the first token's logits for a segmented prompt:
//!
//! - `prefill_vanilla`: one causal forward over the whole prompt.
//! - `prefill_block`: per-block KV from the content-addressed cache (encode
//!   on miss, write through), keys re-rotated from their zero-based storage
//!   positions to the block's offsets, then a single forward for the final
//!   block over the concatenated prefix.
//! - `prefill_monolithic_blockmask`: one forward over the whole prompt under
//!   the block visibility mask; serves as the oracle for the segmented path.
//!
//! Block-mode timing covers the full pipeline: lookup, repositioning, and
//! the final-block forward.

use crate::blocks::{block_key, BlockRole, PromptLayout, TokenId};
use crate::kvcache::{BlockKvCache, CacheError, KVEntry};
use crate::mask::AttentionMask;
use crate::model::{LayerKV, ModelConfig, ModelError, Persist, Weights};
use crate::rope::{rope_shift_inplace, rope_unapply_inplace};
use std::sync::Arc;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("prompt length {total} exceeds max positions {max}")]
    LengthOverflow { total: usize, max: usize },
    #[error("final block must be the query block")]
    FinalBlockNotQuery,
    #[error("cache is bound to a different model than this engine")]
    CacheModelMismatch,
    #[error("max_new must be >= 1")]
    MaxNewZero,
    #[error("measure_ttft needs repeats >= 3, got {0}")]
    RepeatsTooFew(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

/// Which prefill path feeds generation or benchmarking.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefillMode {
    Vanilla,
    Block { reencode_positions: bool },
    Monolithic,
}

impl PrefillMode {
    pub const BLOCK: PrefillMode = PrefillMode::Block { reencode_positions: true };
}

/// Output of one prefill: logits of the last prompt token, the full KV
/// stack over every prompt position, wall-clock timing, and block reuse
/// counters.
#[derive(Debug, Clone)]
pub struct PrefillResult {
    pub first_token_logits: Vec<f32>,
    pub kv: Vec<LayerKV<f32>>,
    pub timing: Duration,
    pub blocks_computed: usize,
    pub blocks_reused: usize,
}

/// Duration statistics over repeated timed runs.
#[derive(Debug, Clone)]
pub struct TtftStats {
    pub samples: Vec<Duration>,
}

impl TtftStats {
    pub fn min(&self) -> Duration {
        self.samples.iter().min().copied().unwrap_or_default()
    }

    pub fn median(&self) -> Duration {
        let mut sorted = self.samples.clone();
        sorted.sort();
        let n = sorted.len();
        if n == 0 {
            Duration::ZERO
        } else if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2
        }
    }

    pub fn mean(&self) -> Duration {
        if self.samples.is_empty() {
            Duration::ZERO
        } else {
            self.samples.iter().sum::<Duration>() / self.samples.len() as u32
        }
    }
}

/// Block visibility: tokens in a non-final block see only their own block
/// (causally); final-block tokens see everything before them.
pub fn build_block_mask(layout: &PromptLayout) -> AttentionMask {
    let n = layout.total_len();
    let final_block = layout.blocks().len() - 1;
    let mut block_of = vec![0usize; n];
    for b in 0..layout.blocks().len() {
        for p in layout.positions_of(b).expect("block index in range") {
            block_of[p] = b;
        }
    }
    AttentionMask::build(n, |i, j| {
        j <= i && (block_of[i] == final_block || block_of[i] == block_of[j])
    })
}

/// Inference engine over one immutable set of weights.
#[derive(Debug, Clone)]
pub struct Engine {
    weights: Arc<Weights<f32>>,
    config_fingerprint: [u8; 32],
    weights_fingerprint: [u8; 32],
}

impl Engine {
    pub fn new(weights: Arc<Weights<f32>>) -> Self {
        let config_fingerprint = weights.config().fingerprint();
        let weights_fingerprint = Persist::fingerprint(&*weights);
        Self { weights, config_fingerprint, weights_fingerprint }
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn weights(&self) -> &Weights<f32> {
        &self.weights
    }

    pub fn new_cache(&self, capacity_bytes: u64) -> BlockKvCache {
        BlockKvCache::new(capacity_bytes, self.config_fingerprint, self.weights_fingerprint)
    }

    fn check_len(&self, layout: &PromptLayout) -> Result<(), EngineError> {
        let total = layout.total_len();
        let max = self.config().max_positions;
        if total > max {
            return Err(EngineError::LengthOverflow { total, max });
        }
        Ok(())
    }

    /// Causal self-attention over the whole prompt.
    pub fn prefill_vanilla(&self, layout: &PromptLayout) -> Result<PrefillResult, EngineError> {
        self.check_len(layout)?;
        let start = Instant::now();
        let tokens = layout.all_tokens();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = AttentionMask::lower_triangular(tokens.len());
        let out = self.weights.forward_masked(&tokens, &positions, &mask)?;
        let first_token_logits = out.logits.row(tokens.len() - 1).to_vec();
        Ok(PrefillResult {
            first_token_logits,
            kv: out.kv,
            timing: start.elapsed(),
            blocks_computed: layout.blocks().len(),
            blocks_reused: 0,
        })
    }

    /// One forward over the whole prompt under the block mask; the
    /// training-side view of block attention and the oracle for
    /// [`Engine::prefill_block`].
    pub fn prefill_monolithic_blockmask(
        &self,
        layout: &PromptLayout,
    ) -> Result<PrefillResult, EngineError> {
        self.check_len(layout)?;
        let start = Instant::now();
        let tokens = layout.all_tokens();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = build_block_mask(layout);
        let out = self.weights.forward_masked(&tokens, &positions, &mask)?;
        let first_token_logits = out.logits.row(tokens.len() - 1).to_vec();
        Ok(PrefillResult {
            first_token_logits,
            kv: out.kv,
            timing: start.elapsed(),
            blocks_computed: layout.blocks().len(),
            blocks_reused: 0,
        })
    }

    /// Segmented prefill with cache reuse.
    ///
    /// Every non-final block is looked up by content key; misses are encoded
    /// in isolation and written through. Cached keys are stored zero-based,
    /// so each key row is rotated back to zero and forward to its offset in
    /// this layout (skipped entirely when `reencode_positions` is false,
    /// the ablation mode). The final block then attends the concatenated
    /// prefix plus itself, causally.
    pub fn prefill_block(
        &self,
        layout: &PromptLayout,
        cache: &mut BlockKvCache,
        reencode_positions: bool,
    ) -> Result<PrefillResult, EngineError> {
        self.check_len(layout)?;
        if layout.final_block().role != BlockRole::Query {
            return Err(EngineError::FinalBlockNotQuery);
        }
        if cache.config_fingerprint() != &self.config_fingerprint
            || cache.weights_fingerprint() != &self.weights_fingerprint
        {
            return Err(EngineError::CacheModelMismatch);
        }

        let start = Instant::now();
        let cfg = self.config();
        let kv_dim = cfg.kv_dim();
        let n_blocks = layout.blocks().len();
        let mut prefix: Vec<LayerKV<f32>> =
            (0..cfg.n_layers).map(|_| LayerKV::empty(kv_dim)).collect();
        let mut blocks_reused = 0;
        let mut blocks_computed = 1; // the final block is always computed

        for b in 0..n_blocks - 1 {
            let block = &layout.blocks()[b];
            let offset = layout.offsets()[b];
            let key = block_key(block);
            match cache.get(&key) {
                Some(entry) => {
                    blocks_reused += 1;
                    self.append_repositioned(&mut prefix, &entry.layers, offset, reencode_positions)?;
                }
                None => {
                    blocks_computed += 1;
                    let kv = self.weights.encode_block_kv(&block.tokens)?;
                    self.append_repositioned(&mut prefix, &kv, offset, reencode_positions)?;
                    let entry = KVEntry::new(
                        key,
                        kv,
                        self.config_fingerprint,
                        self.weights_fingerprint,
                    );
                    match cache.put(entry) {
                        Ok(()) => {}
                        // A cache too small for the entry degrades to
                        // recomputing it next time; not a prefill failure.
                        Err(CacheError::EntryTooLarge { .. }) => {}
                        Err(e) => return Err(e.into()),
                    }
                }
            }
        }

        let final_block = layout.final_block();
        let positions: Vec<usize> = layout.positions_of(n_blocks - 1).expect("final block").collect();
        let out = self.weights.forward_with_prefix(&final_block.tokens, &positions, &prefix)?;
        let first_token_logits = out.logits.row(final_block.len() - 1).to_vec();
        let timing = start.elapsed();

        let mut kv = prefix;
        for (full, new) in kv.iter_mut().zip(&out.kv) {
            full.append(new);
        }
        Ok(PrefillResult { first_token_logits, kv, timing, blocks_computed, blocks_reused })
    }

    fn append_repositioned(
        &self,
        prefix: &mut [LayerKV<f32>],
        block_kv: &[LayerKV<f32>],
        offset: usize,
        reencode_positions: bool,
    ) -> Result<(), EngineError> {
        let cfg = self.config();
        let hd = cfg.head_dim;
        let rope = self.weights.rope();
        for (dst, src) in prefix.iter_mut().zip(block_kv) {
            for t in 0..src.positions() {
                dst.append_row(src.k_row(t), src.v_row(t));
                if reencode_positions {
                    let row = dst.k_row_mut(dst.positions() - 1);
                    for g in 0..cfg.n_kv_heads {
                        let head = &mut row[g * hd..(g + 1) * hd];
                        rope_unapply_inplace(head, t, rope).map_err(ModelError::Rope)?;
                        rope_shift_inplace(head, offset + t, rope).map_err(ModelError::Rope)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn prefill(
        &self,
        layout: &PromptLayout,
        mode: PrefillMode,
        cache: &mut BlockKvCache,
    ) -> Result<PrefillResult, EngineError> {
        match mode {
            PrefillMode::Vanilla => self.prefill_vanilla(layout),
            PrefillMode::Monolithic => self.prefill_monolithic_blockmask(layout),
            PrefillMode::Block { reencode_positions } => {
                self.prefill_block(layout, cache, reencode_positions)
            }
        }
    }

    /// Greedy decoding after a prefill in the selected mode. Decoded tokens
    /// are ordinary causal continuation: each attends the full KV stack.
    pub fn generate(
        &self,
        layout: &PromptLayout,
        max_new: usize,
        mode: PrefillMode,
        cache: &mut BlockKvCache,
    ) -> Result<GenerateResult, EngineError> {
        if max_new == 0 {
            return Err(EngineError::MaxNewZero);
        }
        let prefill = self.prefill(layout, mode, cache)?;
        let mut kv = prefill.kv;
        let mut logits = prefill.first_token_logits.clone();
        let mut tokens = Vec::with_capacity(max_new);
        let mut pos = layout.total_len();
        loop {
            let next = argmax(&logits);
            tokens.push(next);
            if tokens.len() == max_new {
                break;
            }
            let out = self.weights.forward_with_prefix(&[next], &[pos], &kv)?;
            logits = out.logits.row(0).to_vec();
            for (full, new) in kv.iter_mut().zip(&out.kv) {
                full.append(new);
            }
            pos += 1;
        }
        Ok(GenerateResult {
            tokens,
            prefill_timing: prefill.timing,
            blocks_computed: prefill.blocks_computed,
            blocks_reused: prefill.blocks_reused,
        })
    }

    /// Wall-clock prefill latency: one untimed warm-up run (which also warms
    /// the cache for block mode), then `repeats` timed runs.
    pub fn measure_ttft(
        &self,
        layout: &PromptLayout,
        mode: PrefillMode,
        cache: &mut BlockKvCache,
        repeats: usize,
    ) -> Result<TtftStats, EngineError> {
        if repeats < 3 {
            return Err(EngineError::RepeatsTooFew(repeats));
        }
        self.prefill(layout, mode, cache)?;
        let mut samples = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let result = self.prefill(layout, mode, cache)?;
            samples.push(result.timing);
        }
        Ok(TtftStats { samples })
    }
}

#[derive(Debug, Clone)]
pub struct GenerateResult {
    pub tokens: Vec<TokenId>,
    pub prefill_timing: Duration,
    pub blocks_computed: usize,
    pub blocks_reused: usize,
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn argmax(logits: &[f32]) -> TokenId {
    let mut best = 0;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as TokenId
}

/// Deterministic synthetic layout for benchmarks: a query of `user_len`
/// bytes preceded by ~`passage_len`-byte passages filling up `total_len`.
pub fn bench_layout(
    total_len: usize,
    user_len: usize,
    passage_len: usize,
) -> Result<PromptLayout, crate::blocks::BlockError> {
    assert!(user_len >= 1 && passage_len >= 8 && total_len >= user_len);
    let filler = |tag: usize, len: usize| -> String {
        let head = format!("[{tag:05}] ");
        let mut s = String::with_capacity(len);
        s.push_str(&head);
        while s.len() < len {
            s.push((b'a' + (s.len() % 26) as u8) as char);
        }
        s.truncate(len);
        s
    };
    let mut remaining = total_len - user_len;
    let mut passages = Vec::new();
    let mut tag = 0;
    while remaining > 0 {
        let len = remaining.min(passage_len).max(8.min(remaining));
        passages.push(filler(tag, len.max(1)));
        remaining -= len;
        tag += 1;
    }
    let query = filler(99_999, user_len);
    crate::blocks::segment_rag_prompt("", &passages, &query)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::segment_rag_prompt;
    use crate::model::init_weights;
    use crate::rng::SplitMix64;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            d_ffn: 24,
            vocab_size: 260,
            rope_theta: 10_000.0,
            max_positions: 256,
        }
    }

    fn engine(seed: u64) -> Engine {
        Engine::new(Arc::new(init_weights(&tiny_config(), seed).unwrap()))
    }

    fn layout_abq() -> PromptLayout {
        segment_rag_prompt(
            "system: be brief",
            &["first passage body".into(), "second passage body text".into()],
            "what is in the passages?",
        )
        .unwrap()
    }

    #[test]
    fn block_mask_one_block_is_lower_triangular() {
        let layout = segment_rag_prompt("", &[], "abcde").unwrap();
        let mask = build_block_mask(&layout);
        assert_eq!(mask, AttentionMask::lower_triangular(5));
    }

    #[test]
    fn block_mask_rows_follow_block_rule() {
        // Blocks of lengths [2, 2, 1].
        let layout = segment_rag_prompt("", &["ab".into(), "cd".into()], "q").unwrap();
        let mask = build_block_mask(&layout);
        assert_eq!(mask.visible_in_row(2), vec![2]);
        assert_eq!(mask.visible_in_row(3), vec![2, 3]);
        assert_eq!(mask.visible_in_row(4), vec![0, 1, 2, 3, 4]);
        for i in 0..5 {
            assert!(mask.allowed(i, i));
        }
    }

    #[test]
    fn vanilla_equals_forward_masked_by_definition() {
        let eng = engine(1);
        let layout = layout_abq();
        let result = eng.prefill_vanilla(&layout).unwrap();
        let tokens = layout.all_tokens();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let direct = eng
            .weights()
            .forward_masked(&tokens, &positions, &AttentionMask::lower_triangular(tokens.len()))
            .unwrap();
        assert_eq!(result.first_token_logits, direct.logits.row(tokens.len() - 1));
        assert_eq!(result.blocks_reused, 0);
    }

    #[test]
    fn one_block_layout_all_paths_bit_identical() {
        for seed in 0..4 {
            let eng = engine(seed);
            let layout = segment_rag_prompt("", &[], "a single query block").unwrap();
            let mut cache = eng.new_cache(1 << 20);
            let vanilla = eng.prefill_vanilla(&layout).unwrap();
            let mono = eng.prefill_monolithic_blockmask(&layout).unwrap();
            let block = eng.prefill_block(&layout, &mut cache, true).unwrap();
            assert_eq!(vanilla.first_token_logits, mono.first_token_logits);
            assert_eq!(vanilla.first_token_logits, block.first_token_logits);
            assert_eq!(vanilla.kv, block.kv);
        }
    }

    #[test]
    fn cold_then_warm_cache_bit_identical() {
        let eng = engine(2);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 24);
        let cold = eng.prefill_block(&layout, &mut cache, true).unwrap();
        assert_eq!(cold.blocks_reused, 0);
        assert_eq!(cold.blocks_computed, 4);
        let warm = eng.prefill_block(&layout, &mut cache, true).unwrap();
        assert_eq!(warm.blocks_reused, 3);
        assert_eq!(warm.blocks_computed, 1);
        assert_eq!(cold.first_token_logits, warm.first_token_logits);
        assert_eq!(cold.kv, warm.kv);
    }

    #[test]
    fn segmented_matches_monolithic_oracle() {
        let eng = engine(3);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 24);
        let block = eng.prefill_block(&layout, &mut cache, true).unwrap();
        let mono = eng.prefill_monolithic_blockmask(&layout).unwrap();
        let max_diff = block
            .first_token_logits
            .iter()
            .zip(&mono.first_token_logits)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-4, "max diff {max_diff}");
    }

    #[test]
    fn permuted_passages_reuse_cache_and_match_oracle() {
        let eng = engine(4);
        let a = "alpha passage body".to_string();
        let b = "beta passage body!!".to_string();
        let ab = segment_rag_prompt("", &[a.clone(), b.clone()], "q?").unwrap();
        let ba = segment_rag_prompt("", &[b, a], "q?").unwrap();
        let mut cache = eng.new_cache(1 << 24);
        eng.prefill_block(&ab, &mut cache, true).unwrap();
        let swapped = eng.prefill_block(&ba, &mut cache, true).unwrap();
        assert_eq!(swapped.blocks_reused, 2, "both passages must come from cache");
        let oracle = eng.prefill_monolithic_blockmask(&ba).unwrap();
        let max_diff = swapped
            .first_token_logits
            .iter()
            .zip(&oracle.first_token_logits)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff <= 1e-4, "max diff {max_diff}");
    }

    #[test]
    fn skipping_reencode_diverges_for_displaced_blocks() {
        let eng = engine(5);
        let layout = segment_rag_prompt(
            "a rather long instruction preamble here",
            &["displaced passage content".into()],
            "q?",
        )
        .unwrap();
        let mut cache = eng.new_cache(1 << 24);
        let without = eng.prefill_block(&layout, &mut cache, false).unwrap();
        let oracle = eng.prefill_monolithic_blockmask(&layout).unwrap();
        let max_diff = without
            .first_token_logits
            .iter()
            .zip(&oracle.first_token_logits)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-6, "ablation should move the logits, got {max_diff}");
    }

    #[test]
    fn generate_first_token_is_argmax() {
        let eng = engine(6);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 24);
        for mode in [PrefillMode::Vanilla, PrefillMode::Monolithic, PrefillMode::BLOCK] {
            let prefill = eng.prefill(&layout, mode, &mut cache).unwrap();
            let gen = eng.generate(&layout, 1, mode, &mut cache).unwrap();
            assert_eq!(gen.tokens, vec![argmax(&prefill.first_token_logits)]);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let eng = engine(7);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 24);
        let a = eng.generate(&layout, 8, PrefillMode::BLOCK, &mut cache).unwrap();
        let b = eng.generate(&layout, 8, PrefillMode::BLOCK, &mut cache).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn block_and_monolithic_generate_identically() {
        let mut rng = SplitMix64::new(40);
        for trial in 0..3 {
            let eng = engine(100 + trial);
            let n_passages = 1 + rng.next_below(3) as usize;
            let passages: Vec<String> = (0..n_passages)
                .map(|i| format!("passage {i} with body {}", rng.next_u64()))
                .collect();
            let layout = segment_rag_prompt("inst", &passages, "ask me").unwrap();
            let mut cache = eng.new_cache(1 << 24);
            let mono = eng.generate(&layout, 8, PrefillMode::Monolithic, &mut cache).unwrap();
            let block = eng.generate(&layout, 8, PrefillMode::BLOCK, &mut cache).unwrap();
            assert_eq!(mono.tokens, block.tokens, "trial {trial}");
        }
    }

    #[test]
    fn max_new_zero_rejected() {
        let eng = engine(8);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 20);
        assert!(matches!(
            eng.generate(&layout, 0, PrefillMode::Vanilla, &mut cache),
            Err(EngineError::MaxNewZero)
        ));
    }

    #[test]
    fn length_overflow_rejected() {
        let eng = engine(9);
        let text = "x".repeat(300);
        let layout = segment_rag_prompt("", &[], &text).unwrap();
        assert!(matches!(
            eng.prefill_vanilla(&layout),
            Err(EngineError::LengthOverflow { total: 300, max: 256 })
        ));
    }

    #[test]
    fn cache_model_mismatch_rejected() {
        let eng = engine(10);
        let other = engine(11);
        let mut cache = other.new_cache(1 << 20);
        let layout = layout_abq();
        assert!(matches!(
            eng.prefill_block(&layout, &mut cache, true),
            Err(EngineError::CacheModelMismatch)
        ));
    }

    #[test]
    fn ttft_requires_three_repeats() {
        let eng = engine(12);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 20);
        assert!(matches!(
            eng.measure_ttft(&layout, PrefillMode::Vanilla, &mut cache, 2),
            Err(EngineError::RepeatsTooFew(2))
        ));
        let stats = eng.measure_ttft(&layout, PrefillMode::Vanilla, &mut cache, 3).unwrap();
        assert_eq!(stats.samples.len(), 3);
        assert!(stats.min() <= stats.median());
    }

    #[test]
    fn bench_layout_shapes() {
        let layout = bench_layout(512, 50, 128).unwrap();
        assert_eq!(layout.total_len(), 512);
        assert_eq!(layout.final_block().len(), 50);
        let only_query = bench_layout(50, 50, 128).unwrap();
        assert_eq!(only_query.blocks().len(), 1);
        assert_eq!(only_query.total_len(), 50);
    }

    #[test]
    fn argmax_ties_to_lowest_index() {
        assert_eq!(argmax(&[0.0, 1.0, 1.0]), 1);
        assert_eq!(argmax(&[2.0]), 0);
    }

    #[test]
    fn decode_position_overflow_is_an_error() {
        let eng = engine(14);
        // 250-token prompt + 10 decoded tokens exceeds max_positions 256.
        let text = "y".repeat(250);
        let layout = segment_rag_prompt("", &[], &text).unwrap();
        let mut cache = eng.new_cache(1 << 20);
        let err = eng.generate(&layout, 10, PrefillMode::Vanilla, &mut cache).unwrap_err();
        assert!(
            matches!(err, EngineError::Model(ModelError::Rope(_))),
            "expected position overflow, got {err}"
        );
    }

    #[test]
    fn cached_entries_honor_zero_position_convention() {
        // Keys stored by write-through are rotary-encoded with the block
        // starting at zero: a rotate-to-zero/rotate-back round trip
        // reproduces them, and re-encoding the source block reproduces the
        // entry bit-for-bit.
        let eng = engine(13);
        let layout = layout_abq();
        let mut cache = eng.new_cache(1 << 24);
        eng.prefill_block(&layout, &mut cache, true).unwrap();
        let cfg = eng.config().clone();
        let rope = eng.weights().rope().clone();
        for block in &layout.blocks()[..layout.blocks().len() - 1] {
            let entry = cache.get(&block_key(block)).expect("written through");
            for layer in &entry.layers {
                for t in 0..layer.positions() {
                    for g in 0..cfg.n_kv_heads {
                        let head = &layer.k_row(t)[g * cfg.head_dim..(g + 1) * cfg.head_dim];
                        let zeroed = crate::rope::rope_unapply(head, t, &rope).unwrap();
                        let back = crate::rope::rope_apply(&zeroed, t, &rope).unwrap();
                        for (a, b) in back.iter().zip(head) {
                            assert!((a - b).abs() < 1e-6);
                        }
                    }
                }
            }
            let reencoded = eng.weights().encode_block_kv(&block.tokens).unwrap();
            assert_eq!(entry.layers, reencoded, "re-encoding must reproduce the entry");
        }
    }
}
