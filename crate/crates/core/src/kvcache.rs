//! Content-addressed store of zero-positioned block KV states with LRU
//! eviction, statistics, and bit-exact persistence.

use crate::blocks::BlockKey;
use crate::model::{hex, LayerKV, ModelConfig, Persist, Weights};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};
use thiserror::Error;

const CACHE_MAGIC: &[u8; 4] = b"BKV1";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("entry of {bytes} bytes exceeds total cache capacity {capacity}")]
    EntryTooLarge { bytes: u64, capacity: u64 },
    #[error("entry fingerprints do not match the cache's bound model")]
    EntryFingerprintMismatch,
    #[error("cache file {kind} fingerprint mismatch: file {file}, expected {expected}")]
    FileFingerprintMismatch { kind: &'static str, file: String, expected: String },
    #[error("not a cache file (bad magic at offset 0)")]
    BadMagic,
    #[error("cache file truncated or corrupt at byte offset {offset}")]
    Parse { offset: u64 },
    #[error("cache io: {0}")]
    Io(#[from] std::io::Error),
}

/// Cached KV states of one block, keys rotary-encoded as if the block
/// started at position zero so reuse needs only a forward rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct KVEntry {
    pub key: BlockKey,
    pub token_count: usize,
    pub layers: Vec<LayerKV<f32>>,
    pub config_fingerprint: [u8; 32],
    pub weights_fingerprint: [u8; 32],
}

impl KVEntry {
    pub fn new(
        key: BlockKey,
        layers: Vec<LayerKV<f32>>,
        config_fingerprint: [u8; 32],
        weights_fingerprint: [u8; 32],
    ) -> Self {
        let token_count = layers.first().map_or(0, |l| l.positions());
        debug_assert!(layers.iter().all(|l| l.positions() == token_count));
        Self { key, token_count, layers, config_fingerprint, weights_fingerprint }
    }

    /// Accounting size: key + token count + the f32 KV arrays.
    pub fn byte_size(&self) -> u64 {
        let array_bytes: usize =
            self.layers.iter().map(|l| (l.k().len() + l.v().len()) * 4).sum();
        (32 + 8 + array_bytes) as u64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct CacheStats {
    pub lookups: u64,
    pub hits: u64,
    pub evictions: u64,
    pub resident_bytes: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.lookups == 0 {
            0.0
        } else {
            self.hits as f64 / self.lookups as f64
        }
    }
}

#[derive(Debug, Default)]
struct Recency {
    seq: HashMap<BlockKey, u64>,
    counter: u64,
    stats: CacheStats,
}

/// LRU cache of [`KVEntry`] values bound to one (config, weights) pair.
///
/// Reads take `&self` and synchronize their recency/statistics update
/// internally; inserts take `&mut self`. Entries are handed out as
/// immutable `Arc` snapshots.
#[derive(Debug)]
pub struct BlockKvCache {
    capacity_bytes: u64,
    config_fingerprint: [u8; 32],
    weights_fingerprint: [u8; 32],
    entries: HashMap<BlockKey, Arc<KVEntry>>,
    recency: Mutex<Recency>,
}

impl BlockKvCache {
    pub fn new(capacity_bytes: u64, config_fingerprint: [u8; 32], weights_fingerprint: [u8; 32]) -> Self {
        Self {
            capacity_bytes,
            config_fingerprint,
            weights_fingerprint,
            entries: HashMap::new(),
            recency: Mutex::new(Recency::default()),
        }
    }

    pub fn for_model(capacity_bytes: u64, config: &ModelConfig, weights: &Weights<f32>) -> Self {
        Self::new(capacity_bytes, config.fingerprint(), Persist::fingerprint(weights))
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn stats(&self) -> CacheStats {
        self.recency.lock().unwrap().stats.clone()
    }

    pub fn config_fingerprint(&self) -> &[u8; 32] {
        &self.config_fingerprint
    }

    pub fn weights_fingerprint(&self) -> &[u8; 32] {
        &self.weights_fingerprint
    }

    /// Residency check that touches neither recency nor statistics.
    pub fn contains(&self, key: &BlockKey) -> bool {
        self.entries.contains_key(key)
    }

    /// Lookup by content key. A hit refreshes recency; hit or miss is
    /// recorded in the statistics either way.
    pub fn get(&self, key: &BlockKey) -> Option<Arc<KVEntry>> {
        let mut rec = self.recency.lock().unwrap();
        rec.stats.lookups += 1;
        match self.entries.get(key) {
            Some(entry) => {
                rec.stats.hits += 1;
                rec.counter += 1;
                let counter = rec.counter;
                rec.seq.insert(*key, counter);
                Some(Arc::clone(entry))
            }
            None => None,
        }
    }

    /// Inserts an entry, evicting least-recently-used entries until it fits.
    /// Re-inserting an existing key refreshes recency without duplicating.
    pub fn put(&mut self, entry: KVEntry) -> Result<(), CacheError> {
        if entry.config_fingerprint != self.config_fingerprint
            || entry.weights_fingerprint != self.weights_fingerprint
        {
            return Err(CacheError::EntryFingerprintMismatch);
        }
        let size = entry.byte_size();
        if size > self.capacity_bytes {
            return Err(CacheError::EntryTooLarge { bytes: size, capacity: self.capacity_bytes });
        }
        let key = entry.key;
        let rec = self.recency.get_mut().unwrap();
        if self.entries.contains_key(&key) {
            rec.counter += 1;
            let counter = rec.counter;
            rec.seq.insert(key, counter);
            return Ok(());
        }
        while rec.stats.resident_bytes + size > self.capacity_bytes {
            let lru = rec
                .seq
                .iter()
                .min_by_key(|&(_, &s)| s)
                .map(|(k, _)| *k)
                .expect("resident bytes imply at least one entry");
            let evicted = self.entries.remove(&lru).expect("seq tracks entries");
            rec.seq.remove(&lru);
            rec.stats.resident_bytes -= evicted.byte_size();
            rec.stats.evictions += 1;
        }
        rec.counter += 1;
        let counter = rec.counter;
        rec.seq.insert(key, counter);
        rec.stats.resident_bytes += size;
        self.entries.insert(key, Arc::new(entry));
        Ok(())
    }

    /// Removes every entry and zeroes residency (statistics counters for
    /// lookups/hits/evictions are preserved).
    pub fn purge(&mut self) {
        self.entries.clear();
        let rec = self.recency.get_mut().unwrap();
        rec.seq.clear();
        rec.stats.resident_bytes = 0;
    }

    /// Keys in recency order, least recently used first.
    fn keys_lru_order(&self) -> Vec<BlockKey> {
        let rec = self.recency.lock().unwrap();
        let mut keys: Vec<(u64, BlockKey)> = rec.seq.iter().map(|(k, &s)| (s, *k)).collect();
        keys.sort();
        keys.into_iter().map(|(_, k)| k).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), CacheError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CACHE_MAGIC);
        buf.extend_from_slice(&self.config_fingerprint);
        buf.extend_from_slice(&self.weights_fingerprint);
        let keys = self.keys_lru_order();
        buf.extend_from_slice(&(keys.len() as u64).to_le_bytes());
        for key in keys {
            let entry = &self.entries[&key];
            buf.extend_from_slice(entry.key.as_bytes());
            buf.extend_from_slice(&(entry.token_count as u64).to_le_bytes());
            buf.extend_from_slice(&(entry.layers.len() as u64).to_le_bytes());
            let kv_dim = entry.layers.first().map_or(0, |l| l.kv_dim());
            buf.extend_from_slice(&(kv_dim as u64).to_le_bytes());
            for layer in &entry.layers {
                for &v in layer.k() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for &v in layer.v() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    /// Loads a cache saved by [`BlockKvCache::save`], refusing files whose
    /// fingerprints do not match the expected model. Statistics are zeroed;
    /// recency order is reproduced from the file.
    pub fn load(
        path: &Path,
        capacity_bytes: u64,
        expected_config: &[u8; 32],
        expected_weights: &[u8; 32],
    ) -> Result<Self, CacheError> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let mut offset = 0usize;

        let take = |offset: &mut usize, len: usize| -> Result<&[u8], CacheError> {
            if *offset + len > bytes.len() {
                return Err(CacheError::Parse { offset: *offset as u64 });
            }
            let out = &bytes[*offset..*offset + len];
            *offset += len;
            Ok(out)
        };
        let take_u64 = |offset: &mut usize| -> Result<u64, CacheError> {
            let raw = take(offset, 8)?;
            Ok(u64::from_le_bytes(raw.try_into().unwrap()))
        };

        if take(&mut offset, 4)? != CACHE_MAGIC {
            return Err(CacheError::BadMagic);
        }
        let file_config: [u8; 32] = take(&mut offset, 32)?.try_into().unwrap();
        let file_weights: [u8; 32] = take(&mut offset, 32)?.try_into().unwrap();
        if &file_config != expected_config {
            return Err(CacheError::FileFingerprintMismatch {
                kind: "config",
                file: hex(&file_config),
                expected: hex(expected_config),
            });
        }
        if &file_weights != expected_weights {
            return Err(CacheError::FileFingerprintMismatch {
                kind: "weights",
                file: hex(&file_weights),
                expected: hex(expected_weights),
            });
        }

        let count = take_u64(&mut offset)?;
        let mut cache = Self::new(capacity_bytes, file_config, file_weights);
        for _ in 0..count {
            let key = BlockKey(take(&mut offset, 32)?.try_into().unwrap());
            let token_count = take_u64(&mut offset)? as usize;
            let n_layers = take_u64(&mut offset)? as usize;
            let kv_dim = take_u64(&mut offset)? as usize;
            let mut layers = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let len = token_count * kv_dim;
                let read_f32s = |offset: &mut usize| -> Result<Vec<f32>, CacheError> {
                    let raw = take(offset, len * 4)?;
                    Ok(raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect())
                };
                let k = read_f32s(&mut offset)?;
                let v = read_f32s(&mut offset)?;
                layers.push(LayerKV::from_parts(kv_dim, k, v));
            }
            let entry = KVEntry::new(key, layers, file_config, file_weights);
            cache.put(entry)?;
        }
        if offset != bytes.len() {
            return Err(CacheError::Parse { offset: offset as u64 });
        }
        // Persisted caches carry no statistics.
        let rec = cache.recency.get_mut().unwrap();
        let resident = rec.stats.resident_bytes;
        rec.stats = CacheStats { resident_bytes: resident, ..CacheStats::default() };
        Ok(cache)
    }
}

/// Reads just the (config, weights) fingerprints from a cache file header,
/// for inspection without a bound model.
pub fn read_cache_fingerprints(path: &Path) -> Result<([u8; 32], [u8; 32]), CacheError> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 4 + 32 + 32];
    file.read_exact(&mut header).map_err(|_| CacheError::Parse { offset: 0 })?;
    if &header[..4] != CACHE_MAGIC {
        return Err(CacheError::BadMagic);
    }
    Ok((header[4..36].try_into().unwrap(), header[36..68].try_into().unwrap()))
}
