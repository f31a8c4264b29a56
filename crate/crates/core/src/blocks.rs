//! Prompt segmentation: split a retrieval prompt into blocks, assign roles
//! and token offsets, and derive stable content keys for the KV cache.

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use std::fmt;
use thiserror::Error;

/// Token id. The toy tokenizer is byte-level: id == byte value, with ids
/// 256..260 reserved for specials.
pub type TokenId = u32;

pub const BYTE_VOCAB: usize = 256;
pub const RESERVED_SPECIALS: usize = 4;

/// Byte-level tokenization; one token per byte of UTF-8 text.
pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Lossy inverse of [`tokenize`]; ids >= 256 are dropped.
pub fn detokenize(tokens: &[TokenId]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BlockError {
    #[error("query text must be non-empty")]
    EmptyQuery,
    #[error("passage {0} is empty")]
    EmptyPassage(usize),
    #[error("block index {index} out of range ({count} blocks)")]
    BlockIndexOutOfRange { index: usize, count: usize },
}

/// What a block contributes to the prompt. Part of the cache key, so an
/// identical string used in two roles never aliases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BlockRole {
    Instruction,
    Passage,
    Query,
}

impl BlockRole {
    fn key_byte(self) -> u8 {
        match self {
            BlockRole::Instruction => 0,
            BlockRole::Passage => 1,
            BlockRole::Query => 2,
        }
    }
}

/// One prompt segment: an instruction preamble, a retrieved passage, or the
/// user query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub role: BlockRole,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

impl Block {
    pub fn new(role: BlockRole, text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Self { role, text, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// 256-bit content digest of a block; position-independent cache address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey(pub [u8; 32]);

impl BlockKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BlockKey({}..)", &self.to_hex()[..16])
    }
}

impl fmt::Display for BlockKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 over `role byte || little-endian token ids`.
pub fn block_key(b: &Block) -> BlockKey {
    let mut hasher = Sha256::new();
    hasher.update([b.role.key_byte()]);
    for &t in &b.tokens {
        hasher.update(t.to_le_bytes());
    }
    BlockKey(hasher.finalize().into())
}

/// A segmented prompt: ordered blocks, per-block start offsets, total length.
/// Exactly one `Query` block, always last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
    total_len: usize,
}

impl PromptLayout {
    fn from_blocks(blocks: Vec<Block>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut total = 0;
        for b in &blocks {
            offsets.push(total);
            total += b.len();
        }
        Self { blocks, offsets, total_len: total }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn total_len(&self) -> usize {
        self.total_len
    }

    pub fn final_block(&self) -> &Block {
        self.blocks.last().expect("layout has a query block")
    }

    /// Token positions `[offset, offset + len)` occupied by block `i`.
    pub fn positions_of(&self, block_index: usize) -> Result<std::ops::Range<usize>, BlockError> {
        if block_index >= self.blocks.len() {
            return Err(BlockError::BlockIndexOutOfRange {
                index: block_index,
                count: self.blocks.len(),
            });
        }
        let start = self.offsets[block_index];
        Ok(start..start + self.blocks[block_index].len())
    }

    /// All block token sequences concatenated in layout order.
    pub fn all_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.total_len);
        for b in &self.blocks {
            out.extend_from_slice(&b.tokens);
        }
        out
    }
}

/// Options for [`segment_rag_prompt_with`]. `merge_instruction_into_query`
/// folds the instruction text into the query block instead of giving it a
/// cacheable block of its own.
#[derive(Debug, Clone, Copy, Default)]
pub struct SegmentOptions {
    pub merge_instruction_into_query: bool,
}

/// Segments `[instruction] + passages (order preserved) + query` into a
/// layout. Passage order is the caller's; this never reorders.
pub fn segment_rag_prompt(
    instruction: &str,
    passages: &[String],
    query: &str,
) -> Result<PromptLayout, BlockError> {
    segment_rag_prompt_with(instruction, passages, query, SegmentOptions::default())
}

pub fn segment_rag_prompt_with(
    instruction: &str,
    passages: &[String],
    query: &str,
    opts: SegmentOptions,
) -> Result<PromptLayout, BlockError> {
    if query.is_empty() {
        return Err(BlockError::EmptyQuery);
    }
    let mut blocks = Vec::with_capacity(passages.len() + 2);
    let mut query_text = String::new();
    if !instruction.is_empty() {
        if opts.merge_instruction_into_query {
            query_text.push_str(instruction);
        } else {
            blocks.push(Block::new(BlockRole::Instruction, instruction));
        }
    }
    for (i, p) in passages.iter().enumerate() {
        if p.is_empty() {
            return Err(BlockError::EmptyPassage(i));
        }
        blocks.push(Block::new(BlockRole::Passage, p.clone()));
    }
    query_text.push_str(query);
    blocks.push(Block::new(BlockRole::Query, query_text));
    Ok(PromptLayout::from_blocks(blocks))
}

/// JSON form accepted by the CLI: `{"instruction", "passages", "query"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSpec {
    #[serde(default)]
    pub instruction: String,
    #[serde(default)]
    pub passages: Vec<String>,
    pub query: String,
}

impl PromptSpec {
    pub fn layout(&self) -> Result<PromptLayout, BlockError> {
        segment_rag_prompt(&self.instruction, &self.passages, &self.query)
    }

    pub fn from_layout(layout: &PromptLayout) -> Self {
        let mut instruction = String::new();
        let mut passages = Vec::new();
        let mut query = String::new();
        for b in layout.blocks() {
            match b.role {
                BlockRole::Instruction => instruction = b.text.clone(),
                BlockRole::Passage => passages.push(b.text.clone()),
                BlockRole::Query => query = b.text.clone(),
            }
        }
        Self { instruction, passages, query }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::collections::HashSet;

    fn passages(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("passage number {i} body")).collect()
    }

    #[test]
    fn ten_passages_make_twelve_blocks() {
        let layout = segment_rag_prompt("You answer questions.", &passages(10), "who?").unwrap();
        assert_eq!(layout.blocks().len(), 12);
        assert_eq!(layout.final_block().role, BlockRole::Query);
        assert_eq!(layout.blocks()[0].role, BlockRole::Instruction);
    }

    #[test]
    fn degenerate_query_only_layout() {
        let layout = segment_rag_prompt("", &[], "q").unwrap();
        assert_eq!(layout.blocks().len(), 1);
        assert_eq!(layout.offsets(), &[0]);
        assert_eq!(layout.total_len(), 1);
    }

    #[test]
    fn empty_passage_list_with_instruction() {
        let layout = segment_rag_prompt("inst", &[], "q").unwrap();
        assert_eq!(layout.blocks().len(), 2);
    }

    #[test]
    fn empty_query_rejected() {
        assert_eq!(segment_rag_prompt("", &[], "").unwrap_err(), BlockError::EmptyQuery);
    }

    #[test]
    fn empty_passage_rejected() {
        let err =
            segment_rag_prompt("", &["ok".into(), String::new()], "q").unwrap_err();
        assert_eq!(err, BlockError::EmptyPassage(1));
    }

    #[test]
    fn permuted_passages_same_keys_different_offsets() {
        let ab = segment_rag_prompt("", &["aa".into(), "bbb".into()], "q").unwrap();
        let ba = segment_rag_prompt("", &["bbb".into(), "aa".into()], "q").unwrap();
        let keys_ab: HashSet<BlockKey> =
            ab.blocks()[..2].iter().map(block_key).collect();
        let keys_ba: HashSet<BlockKey> =
            ba.blocks()[..2].iter().map(block_key).collect();
        assert_eq!(keys_ab, keys_ba);
        // "aa" starts at 0 in one order and at 3 in the other.
        assert_eq!(ab.offsets(), &[0, 2, 5]);
        assert_eq!(ba.offsets(), &[0, 3, 5]);
    }

    #[test]
    fn key_is_position_independent() {
        let b = Block::new(BlockRole::Passage, "same text");
        // The key never sees offsets, only role and tokens.
        assert_eq!(block_key(&b), block_key(&b.clone()));
    }

    #[test]
    fn key_sensitive_to_single_byte() {
        let a = Block::new(BlockRole::Passage, "same text");
        let b = Block::new(BlockRole::Passage, "same texu");
        assert_ne!(block_key(&a), block_key(&b));
    }

    #[test]
    fn key_sensitive_to_role() {
        let a = Block::new(BlockRole::Passage, "same text");
        let b = Block::new(BlockRole::Instruction, "same text");
        assert_ne!(block_key(&a), block_key(&b));
    }

    #[test]
    fn frozen_key_vector() {
        let b = Block {
            role: BlockRole::Passage,
            text: String::new(),
            tokens: vec![1, 2, 3],
        };
        assert_eq!(
            block_key(&b).to_hex(),
            "bdb454834ad8fcea7018abb42bc3519eb3b7e2c8b766d79b1654d12cc312494d"
        );
    }

    #[test]
    fn positions_of_prefix_sums() {
        let layout =
            segment_rag_prompt("", &["abc".into(), "defg".into()], "hi").unwrap();
        assert_eq!(layout.positions_of(0).unwrap(), 0..3);
        assert_eq!(layout.positions_of(2).unwrap(), 7..9);
        assert_eq!(layout.total_len(), 9);
        let err = layout.positions_of(3).unwrap_err();
        assert_eq!(err, BlockError::BlockIndexOutOfRange { index: 3, count: 3 });
    }

    #[test]
    fn concatenated_tokens_reproduce_prompt() {
        let layout =
            segment_rag_prompt("inst", &["one".into(), "two".into()], "query").unwrap();
        let full = layout.all_tokens();
        assert_eq!(full, tokenize("instonetwoquery"));
        assert_eq!(full.len(), layout.total_len());
        let last = layout.blocks().len() - 1;
        assert_eq!(layout.positions_of(last).unwrap().end, layout.total_len());
    }

    #[test]
    fn no_key_collisions_on_random_blocks() {
        let mut rng = SplitMix64::new(99);
        let mut keys = HashSet::new();
        for _ in 0..10_000 {
            let len = 1 + rng.next_below(12) as usize;
            let text: String =
                (0..len).map(|_| (b'a' + rng.next_below(26) as u8) as char).collect();
            let role = match rng.next_below(3) {
                0 => BlockRole::Instruction,
                1 => BlockRole::Passage,
                _ => BlockRole::Query,
            };
            keys.insert(block_key(&Block::new(role, text)));
        }
        // Distinct (role, text) pairs may repeat in the draw; keys must not
        // collide beyond those repeats, so just require a healthy count.
        assert!(keys.len() > 9000, "{} unique keys", keys.len());
    }

    #[test]
    fn prompt_spec_round_trip() {
        let spec = PromptSpec {
            instruction: "be terse".into(),
            passages: vec!["alpha".into(), "beta".into()],
            query: "gamma?".into(),
        };
        let json = serde_json::to_string(&spec).unwrap();
        let parsed: PromptSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed, spec);
        let layout = parsed.layout().unwrap();
        assert_eq!(PromptSpec::from_layout(&layout), spec);
    }

    #[test]
    fn merge_instruction_option() {
        let opts = SegmentOptions { merge_instruction_into_query: true };
        let layout = segment_rag_prompt_with("inst ", &passages(2), "q", opts).unwrap();
        assert_eq!(layout.blocks().len(), 3);
        assert_eq!(layout.final_block().text, "inst q");
    }
}
