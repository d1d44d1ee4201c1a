//! Three-segment KV storage with a block-level fast-tier cache.
//!
//! Per (layer, kv head) the sequence is split into pinned initial tokens,
//! a ring of the most recent tokens (both on the fast tier), and the middle
//! tokens living on the slow tier. Middle tokens are grouped into blocks of
//! `block_size` by position: block `(id - n_init) / block_size`.
//!
//! The fast-tier cache tracks residency of middle blocks. Cached blocks are
//! byte-identical copies of slow-tier data, so the store keeps one copy and
//! the cache holds only residency and policy metadata.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pq::PqIndex;
use crate::shape::{ModelShape, SegmentConfig};

pub const DEFAULT_BLOCK_SIZE: usize = 128;
pub const DEFAULT_K_CACHE: usize = 32;

/// Bytes per stored element in transfer accounting (FP16).
pub const ELEMENT_BYTES: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct KvEntry {
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvictionPolicy {
    #[default]
    Lru,
    Lfu,
}

impl FromStr for EvictionPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lru" => Ok(Self::Lru),
            "lfu" => Ok(Self::Lfu),
            other => Err(Error::InvalidSpec(format!(
                "unknown eviction policy {other:?}"
            ))),
        }
    }
}

impl fmt::Display for EvictionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Lru => "lru",
            Self::Lfu => "lfu",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheConfig {
    pub block_size: usize,
    /// Fast-tier cache capacity in tokens, per (layer, kv head).
    pub capacity_tokens: usize,
    pub policy: EvictionPolicy,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
            capacity_tokens: 4096,
            policy: EvictionPolicy::Lru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub requests: u64,
}

impl CacheStats {
    pub fn hit_rate(&self) -> f64 {
        if self.requests == 0 {
            0.0
        } else {
            self.hits as f64 / self.requests as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FetchReport {
    pub entries: Vec<KvEntry>,
    pub hits: usize,
    pub misses: usize,
    pub bytes_from_slow_tier: usize,
    /// Blocks admitted by the post-fetch cache update, in admission order.
    pub admitted: Vec<usize>,
    /// Blocks evicted by the update, in eviction order.
    pub evicted: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub step: u64,
    pub layer: usize,
    pub kv_head: usize,
    pub block_id: usize,
    pub hit: bool,
}

#[derive(Debug, Clone, Copy)]
struct BlockMeta {
    last_used: u64,
    uses: u64,
}

/// Residency bookkeeping for one head's fast-tier cache.
#[derive(Debug, Clone)]
pub struct BlockCache {
    cfg: CacheConfig,
    resident: BTreeMap<usize, BlockMeta>,
    clock: u64,
    stats: CacheStats,
}

impl BlockCache {
    pub fn new(cfg: CacheConfig) -> Self {
        Self {
            cfg,
            resident: BTreeMap::new(),
            clock: 0,
            stats: CacheStats::default(),
        }
    }

    pub fn capacity_blocks(&self) -> usize {
        self.cfg.capacity_tokens / self.cfg.block_size
    }

    /// Occupancy in tokens; every resident block is charged a full block.
    pub fn occupancy(&self) -> usize {
        self.resident.len() * self.cfg.block_size
    }

    pub fn contains(&self, block: usize) -> bool {
        self.resident.contains_key(&block)
    }

    pub fn resident_blocks(&self) -> Vec<usize> {
        self.resident.keys().copied().collect()
    }

    pub fn stats(&self) -> CacheStats {
        self.stats
    }

    /// Looks up each distinct block once, in first-appearance order, and
    /// returns whether it hit.
    pub fn lookup(&mut self, blocks: &[usize]) -> Vec<(usize, bool)> {
        self.clock += 1;
        let mut out = Vec::new();
        for &b in blocks {
            if out.iter().any(|&(seen, _)| seen == b) {
                continue;
            }
            let hit = match self.resident.get_mut(&b) {
                Some(meta) => {
                    meta.last_used = self.clock;
                    meta.uses += 1;
                    true
                }
                None => false,
            };
            self.stats.requests += 1;
            if hit {
                self.stats.hits += 1;
            } else {
                self.stats.misses += 1;
            }
            out.push((b, hit));
        }
        out
    }

    /// Admits `ranked` blocks in order. Blocks in `ranked` are never chosen
    /// as victims; admission stops once no other block can be evicted.
    pub fn admit(&mut self, ranked: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let mut admitted = Vec::new();
        let mut evicted = Vec::new();
        let cap = self.capacity_blocks();
        for &b in ranked {
            if self.resident.contains_key(&b) {
                continue;
            }
            if cap == 0 {
                break;
            }
            if self.resident.len() >= cap {
                match self.victim(ranked) {
                    Some(v) => {
                        self.resident.remove(&v);
                        evicted.push(v);
                    }
                    None => break,
                }
            }
            self.resident.insert(
                b,
                BlockMeta {
                    last_used: self.clock,
                    uses: 1,
                },
            );
            admitted.push(b);
        }
        (admitted, evicted)
    }

    fn victim(&self, protected: &[usize]) -> Option<usize> {
        let candidates = self.resident.iter().filter(|(b, _)| !protected.contains(b));
        match self.cfg.policy {
            EvictionPolicy::Lru => candidates.min_by_key(|(&b, m)| (m.last_used, b)),
            EvictionPolicy::Lfu => candidates.min_by_key(|(&b, m)| (m.uses, m.last_used, b)),
        }
        .map(|(&b, _)| b)
    }
}

/// The `k_cache` blocks holding the most requested tokens, ties toward the
/// lower block id.
pub fn rank_blocks(blocks_of_tokens: &[usize], k_cache: usize) -> Vec<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &b in blocks_of_tokens {
        *counts.entry(b).or_default() += 1;
    }
    let mut ranked: Vec<(usize, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k_cache).map(|(b, _)| b).collect()
}

/// One (layer, kv head) slice of the store.
#[derive(Debug, Clone)]
pub struct HeadStore {
    head_dim: usize,
    seg: SegmentConfig,
    block_size: usize,
    init: Vec<KvEntry>,
    local: VecDeque<(usize, KvEntry)>,
    middle: BTreeMap<usize, KvEntry>,
    next_id: usize,
    cache: BlockCache,
}

impl HeadStore {
    fn new(head_dim: usize, seg: SegmentConfig, cache: CacheConfig) -> Self {
        Self {
            head_dim,
            seg,
            block_size: cache.block_size,
            init: Vec::new(),
            local: VecDeque::new(),
            middle: BTreeMap::new(),
            next_id: 0,
            cache: BlockCache::new(cache),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Total tokens held across the three segments.
    pub fn len(&self) -> usize {
        self.next_id
    }

    pub fn is_empty(&self) -> bool {
        self.next_id == 0
    }

    pub fn init_entries(&self) -> &[KvEntry] {
        &self.init
    }

    pub fn local_entries(&self) -> impl Iterator<Item = &KvEntry> {
        self.local.iter().map(|(_, e)| e)
    }

    pub fn local_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.local.iter().map(|(id, _)| *id)
    }

    pub fn middle_len(&self) -> usize {
        self.middle.len()
    }

    /// Middle token ids in ascending order.
    pub fn middle_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.middle.keys().copied()
    }

    pub fn middle_entry(&self, id: usize) -> Result<&KvEntry> {
        self.middle.get(&id).ok_or(Error::UnknownToken(id))
    }

    /// Middle keys flattened in ascending id order.
    pub fn middle_keys(&self) -> Vec<f32> {
        self.middle
            .values()
            .flat_map(|e| e.key.iter().copied())
            .collect()
    }

    /// Every token's entry in id order.
    pub fn all_entries(&self) -> Vec<&KvEntry> {
        self.init
            .iter()
            .chain(self.middle.values())
            .chain(self.local_entries())
            .collect()
    }

    pub fn middle_block_count(&self) -> usize {
        self.middle.len().div_ceil(self.block_size)
    }

    pub fn block_of(&self, id: usize) -> usize {
        (id - self.seg.n_init) / self.block_size
    }

    pub fn cache(&self) -> &BlockCache {
        &self.cache
    }

    fn offload_prefill(&mut self, keys: &[f32], values: &[f32]) -> Result<()> {
        let d = self.head_dim;
        if keys.len() != values.len() || !keys.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch(format!(
                "keys ({}) and values ({}) must be equal multiples of head_dim {d}",
                keys.len(),
                values.len()
            )));
        }
        let s = keys.len() / d;
        if s < self.seg.pinned() {
            return Err(Error::SegmentOverflow(format!(
                "{s} tokens cannot hold n_init {} + n_local {}",
                self.seg.n_init, self.seg.n_local
            )));
        }
        if !self.is_empty() {
            return Err(Error::SegmentOverflow(
                "head already holds a prefill".into(),
            ));
        }
        let local_start = s - self.seg.n_local;
        for (id, (k, v)) in keys.chunks_exact(d).zip(values.chunks_exact(d)).enumerate() {
            let entry = KvEntry {
                key: k.to_vec(),
                value: v.to_vec(),
            };
            if id < self.seg.n_init {
                self.init.push(entry);
            } else if id < local_start {
                self.middle.insert(id, entry);
            } else {
                self.local.push_back((id, entry));
            }
        }
        self.next_id = s;
        Ok(())
    }

    fn evict_local_append(&mut self, entry: KvEntry, index: &mut PqIndex) -> Result<usize> {
        if entry.key.len() != self.head_dim || entry.value.len() != self.head_dim {
            return Err(Error::DimensionMismatch(
                "new entry width != head_dim".into(),
            ));
        }
        let (id, evicted) = self.local.pop_front().ok_or(Error::LocalEmpty)?;
        let code = index.encode_one(&evicted.key)?;
        index.append_code(&code)?;
        self.middle.insert(id, evicted);
        self.local.push_back((self.next_id, entry));
        self.next_id += 1;
        Ok(id)
    }

    fn fetch_topk(
        &mut self,
        token_ids: &[usize],
        k_cache: usize,
    ) -> Result<(FetchReport, Vec<(usize, bool)>)> {
        let mut entries = Vec::with_capacity(token_ids.len());
        for &id in token_ids {
            entries.push(self.middle_entry(id)?.clone());
        }
        let blocks: Vec<usize> = token_ids.iter().map(|&id| self.block_of(id)).collect();
        let looked_up = self.cache.lookup(&blocks);
        let hits = looked_up.iter().filter(|(_, h)| *h).count();
        let misses = looked_up.len() - hits;
        let missed_tokens = blocks
            .iter()
            .filter(|b| looked_up.iter().any(|(x, hit)| x == *b && !hit))
            .count();
        let bytes_from_slow_tier = missed_tokens * 2 * self.head_dim * ELEMENT_BYTES;
        let (admitted, evicted) = self.cache.admit(&rank_blocks(&blocks, k_cache));
        Ok((
            FetchReport {
                entries,
                hits,
                misses,
                bytes_from_slow_tier,
                admitted,
                evicted,
            },
            looked_up,
        ))
    }
}

/// KV storage for every (layer, kv head) of a model.
#[derive(Debug, Clone)]
pub struct KvStore {
    num_kv_heads: usize,
    heads: Vec<HeadStore>,
    step: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl KvStore {
    pub fn new(shape: &ModelShape, seg: SegmentConfig, cache: CacheConfig) -> Result<Self> {
        if seg.n_local == 0 {
            return Err(Error::DimensionMismatch("n_local must be >= 1".into()));
        }
        if cache.block_size == 0 {
            return Err(Error::DimensionMismatch("block_size must be >= 1".into()));
        }
        let n = shape.num_layers * shape.num_kv_heads;
        Ok(Self {
            num_kv_heads: shape.num_kv_heads,
            heads: (0..n)
                .map(|_| HeadStore::new(shape.head_dim, seg, cache))
                .collect(),
            step: 0,
            trace: None,
        })
    }

    /// Starts recording every block lookup.
    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    /// Sets the decode step stamped on subsequent trace records.
    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    fn slot(&self, layer: usize, kv_head: usize) -> Result<usize> {
        let len = self.heads.len();
        if kv_head >= self.num_kv_heads {
            return Err(Error::OutOfRange {
                index: kv_head,
                len: self.num_kv_heads,
            });
        }
        let slot = layer * self.num_kv_heads + kv_head;
        if slot >= len {
            return Err(Error::OutOfRange {
                index: layer,
                len: len / self.num_kv_heads,
            });
        }
        Ok(slot)
    }

    pub fn head(&self, layer: usize, kv_head: usize) -> Result<&HeadStore> {
        Ok(&self.heads[self.slot(layer, kv_head)?])
    }

    pub fn offload_prefill(
        &mut self,
        layer: usize,
        kv_head: usize,
        keys: &[f32],
        values: &[f32],
    ) -> Result<()> {
        let slot = self.slot(layer, kv_head)?;
        self.heads[slot].offload_prefill(keys, values)
    }

    /// Moves the oldest local token to the middle segment (encoding it into
    /// `index`) and appends `entry` as the newest local token. Returns the
    /// evicted token id.
    pub fn evict_local_append(
        &mut self,
        layer: usize,
        kv_head: usize,
        entry: KvEntry,
        index: &mut PqIndex,
    ) -> Result<usize> {
        let slot = self.slot(layer, kv_head)?;
        self.heads[slot].evict_local_append(entry, index)
    }

    pub fn fetch_topk(
        &mut self,
        layer: usize,
        kv_head: usize,
        token_ids: &[usize],
        k_cache: usize,
    ) -> Result<FetchReport> {
        let slot = self.slot(layer, kv_head)?;
        let (report, looked_up) = self.heads[slot].fetch_topk(token_ids, k_cache)?;
        if let Some(trace) = self.trace.as_mut() {
            trace.extend(looked_up.into_iter().map(|(block_id, hit)| TraceRecord {
                step: self.step,
                layer,
                kv_head,
                block_id,
                hit,
            }));
        }
        Ok(report)
    }

    /// `(hit_rate, occupancy_tokens)` for one head.
    pub fn cache_stats(&self, layer: usize, kv_head: usize) -> Result<(f64, usize)> {
        let cache = self.head(layer, kv_head)?.cache();
        Ok((cache.stats().hit_rate(), cache.occupancy()))
    }

    /// Sum of per-head cache capacities in tokens.
    pub fn total_cache_capacity(&self) -> usize {
        self.heads
            .iter()
            .map(|h| h.cache.capacity_blocks() * h.block_size)
            .sum()
    }
}

/// Writes trace records as CSV: `step,layer,kv_head,block_id,hit`.
pub fn write_trace_csv<W: Write>(w: W, records: &[TraceRecord]) -> Result<()> {
    let mut out = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w);
    out.write_record(["step", "layer", "kv_head", "block_id", "hit"])?;
    for r in records {
        out.write_record([
            r.step.to_string(),
            r.layer.to_string(),
            r.kv_head.to_string(),
            r.block_id.to_string(),
            u8::from(r.hit).to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
