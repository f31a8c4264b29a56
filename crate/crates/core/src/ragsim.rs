//! Synthetic retrieval workload generator and cache-economics simulator:
//! streams of queries reusing passages under a Zipf popularity law, with
//! per-query latency, hit-rate and FLOPs-saved reporting.

use crate::blocks::{block_key, segment_rag_prompt, BlockError};
use crate::engine::{Engine, EngineError};
use crate::flops::{flops_block, flops_vanilla, BlockAccounting};
use crate::kvcache::CacheStats;
use crate::model::ModelConfig;
use crate::rng::{stream_seed, SplitMix64};
use serde::Serialize;
use std::collections::{HashMap, HashSet};
use std::path::Path;
use thiserror::Error;

/// Instruction preamble used for every simulated query; constant across
/// queries so its block caches like a passage.
pub const SIM_INSTRUCTION: &str = "Answer the question using the retrieved passages.";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("corpus io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corpus line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("corpus line {line}: duplicate passage id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("query references unknown passage id {0:?}")]
    UnknownId(String),
    #[error("k = {k} exceeds corpus size {corpus}")]
    KTooLarge { k: usize, corpus: usize },
    #[error("corpus is empty; nothing to simulate")]
    EmptyCorpus,
    #[error("query {index}: {source}")]
    Query {
        index: usize,
        #[source]
        source: EngineError,
    },
    #[error(transparent)]
    Block(#[from] BlockError),
}

/// Retrieval corpus: ordered, uniquely identified passages.
#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<(String, String)>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<(String, String)>) -> Result<Self, SimError> {
        let mut index = HashMap::new();
        for (i, (id, text)) in passages.iter().enumerate() {
            if text.is_empty() {
                return Err(SimError::Parse { line: i + 1, msg: format!("passage {id:?} has empty text") });
            }
            if index.insert(id.clone(), i).is_some() {
                return Err(SimError::DuplicateId { id: id.clone(), line: i + 1 });
            }
        }
        Ok(Self { passages, index })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn id_at(&self, i: usize) -> &str {
        &self.passages[i].0
    }

    pub fn text_of(&self, id: &str) -> Result<&str, SimError> {
        self.index
            .get(id)
            .map(|&i| self.passages[i].1.as_str())
            .ok_or_else(|| SimError::UnknownId(id.to_string()))
    }
}

/// Parses a JSON-lines corpus: one `{"id": ..., "text": ...}` object per
/// line, order preserved.
pub fn load_corpus(path: &Path) -> Result<Corpus, SimError> {
    let raw = std::fs::read_to_string(path)?;
    parse_corpus(&raw)
}

pub fn parse_corpus(raw: &str) -> Result<Corpus, SimError> {
    #[derive(serde::Deserialize)]
    struct Line {
        id: String,
        text: String,
    }
    let mut passages = Vec::new();
    let mut seen = HashMap::new();
    for (lineno, line) in raw.lines().enumerate() {
        let line_num = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(line)
            .map_err(|e| SimError::Parse { line: line_num, msg: e.to_string() })?;
        if parsed.text.is_empty() {
            return Err(SimError::Parse { line: line_num, msg: format!("passage {:?} has empty text", parsed.id) });
        }
        if let Some(first) = seen.insert(parsed.id.clone(), line_num) {
            let _ = first;
            return Err(SimError::DuplicateId { id: parsed.id, line: line_num });
        }
        passages.push((parsed.id, parsed.text));
    }
    Corpus::new(passages)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimQuery {
    pub text: String,
    pub passage_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryStream {
    pub queries: Vec<SimQuery>,
}

/// Draws `n_queries` queries of `k` distinct passages each. Passage
/// popularity follows Zipf with exponent `zipf_s` over corpus rank
/// (`zipf_s = 0` is uniform). Identical seeds give identical streams.
pub fn synth_queries(
    corpus: &Corpus,
    n_queries: usize,
    k: usize,
    zipf_s: f64,
    seed: u64,
) -> Result<QueryStream, SimError> {
    if corpus.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    if k > corpus.len() {
        return Err(SimError::KTooLarge { k, corpus: corpus.len() });
    }
    assert!(zipf_s >= 0.0, "zipf exponent must be non-negative");

    // Cumulative rank weights; rank r (1-based) has weight r^-s.
    let mut cumulative = Vec::with_capacity(corpus.len());
    let mut acc = 0.0f64;
    for rank in 1..=corpus.len() {
        acc += (rank as f64).powf(-zipf_s);
        cumulative.push(acc);
    }
    let total = acc;

    let mut rng = SplitMix64::new(stream_seed(seed, 0x5149, 0));
    let mut queries = Vec::with_capacity(n_queries);
    for qi in 0..n_queries {
        let mut chosen = Vec::with_capacity(k);
        let mut seen = HashSet::with_capacity(k);
        while chosen.len() < k {
            let u = rng.next_unit_f64() * total;
            let idx = cumulative.partition_point(|&c| c < u).min(corpus.len() - 1);
            if seen.insert(idx) {
                chosen.push(corpus.id_at(idx).to_string());
            }
        }
        queries.push(SimQuery { text: format!("simulated question number {qi}"), passage_ids: chosen });
    }
    Ok(QueryStream { queries })
}

#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub version: u32,
    pub n_queries: usize,
    pub hit_rate: f64,
    pub flops_vanilla_total: u64,
    pub flops_block_total: u64,
    /// Encode FLOPs avoided by cache hits; block total plus this equals
    /// recompute-everything block-mode FLOPs exactly.
    pub flops_avoided_total: u64,
    /// Block-mode FLOPs had every block been recomputed each query.
    pub flops_scratch_total: u64,
    pub ttft_ms: Vec<f64>,
    pub cache_stats: CacheStats,
    pub correctness_sampled: usize,
    pub correctness_max_dev: f64,
}

/// Encode cost of one block in isolation: a causal forward without the
/// output head.
fn encode_flops(config: &ModelConfig, len: usize) -> u64 {
    let r = flops_vanilla(config, len);
    r.total_flops - r.breakdown.head
}

/// Runs the stream against a shared block cache, one query at a time.
///
/// Per-query FLOPs count only the blocks actually encoded on this query
/// (cache misses) plus the final block with its cross-attention over the
/// cached prefix. A random ~1% of queries is re-run under the monolithic
/// block-mask oracle and the worst logit deviation recorded. Numeric report
/// fields are deterministic given (stream, seed, capacity); only the
/// timing series varies run to run.
pub fn run_sim(
    corpus: &Corpus,
    stream: &QueryStream,
    engine: &Engine,
    cache_capacity: u64,
    seed: u64,
) -> Result<SimReport, SimError> {
    if corpus.is_empty() && !stream.queries.is_empty() {
        return Err(SimError::EmptyCorpus);
    }
    let config = engine.config().clone();
    let mut cache = engine.new_cache(cache_capacity);

    // Deterministic ~1% correctness sample.
    let mut sample_rng = SplitMix64::new(stream_seed(seed, 0x53414D, 1));
    let sample_every = 100usize;
    let sampled: HashSet<usize> = if stream.queries.is_empty() {
        HashSet::new()
    } else {
        let n_samples = stream.queries.len().div_ceil(sample_every);
        let mut s = HashSet::new();
        while s.len() < n_samples {
            s.insert(sample_rng.next_below(stream.queries.len() as u64) as usize);
        }
        s
    };

    let mut report = SimReport {
        version: 1,
        n_queries: stream.queries.len(),
        hit_rate: 0.0,
        flops_vanilla_total: 0,
        flops_block_total: 0,
        flops_avoided_total: 0,
        flops_scratch_total: 0,
        ttft_ms: Vec::with_capacity(stream.queries.len()),
        cache_stats: CacheStats::default(),
        correctness_sampled: 0,
        correctness_max_dev: 0.0,
    };

    for (qi, query) in stream.queries.iter().enumerate() {
        let passages: Vec<String> = query
            .passage_ids
            .iter()
            .map(|id| corpus.text_of(id).map(str::to_string))
            .collect::<Result<_, _>>()?;
        let layout = segment_rag_prompt(SIM_INSTRUCTION, &passages, &query.text)?;

        // Which non-final blocks will miss, before the prefill mutates the
        // cache. `contains` does not touch lookup statistics.
        let n_blocks = layout.blocks().len();
        let mut encode_cost = 0u64;
        let mut avoided_cost = 0u64;
        let mut scratch_cost = 0u64;
        for b in 0..n_blocks - 1 {
            let block = &layout.blocks()[b];
            let cost = encode_flops(&config, block.len());
            scratch_cost += cost;
            if cache.contains(&block_key(block)) {
                avoided_cost += cost;
            } else {
                encode_cost += cost;
            }
        }
        let final_len = layout.final_block().len();
        let cached_len = layout.total_len() - final_len;
        let final_cost =
            flops_block(&config, final_len, cached_len, BlockAccounting::Exact).total_flops;

        let result = engine
            .prefill_block(&layout, &mut cache, true)
            .map_err(|source| SimError::Query { index: qi, source })?;
        report.ttft_ms.push(result.timing.as_secs_f64() * 1e3);
        report.flops_block_total += encode_cost + final_cost;
        report.flops_avoided_total += avoided_cost;
        report.flops_scratch_total += scratch_cost + final_cost;
        report.flops_vanilla_total += flops_vanilla(&config, layout.total_len()).total_flops;

        if sampled.contains(&qi) {
            let oracle = engine
                .prefill_monolithic_blockmask(&layout)
                .map_err(|source| SimError::Query { index: qi, source })?;
            let dev = result
                .first_token_logits
                .iter()
                .zip(&oracle.first_token_logits)
                .map(|(a, b)| (a - b).abs() as f64)
                .fold(0.0f64, f64::max);
            report.correctness_sampled += 1;
            report.correctness_max_dev = report.correctness_max_dev.max(dev);
        }
    }

    report.cache_stats = cache.stats();
    report.hit_rate = report.cache_stats.hit_rate();
    Ok(report)
}

/// CSV of the per-query latency series (comment-versioned header).
pub fn ttft_series_csv(report: &SimReport) -> String {
    let mut out = String::from("# blockattn csv v1\nquery_index,ttft_ms\n");
    for (i, ms) in report.ttft_ms.iter().enumerate() {
        out.push_str(&format!("{i},{ms:.4}\n"));
    }
    out
}
