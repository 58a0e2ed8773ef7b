//! Simulated external-memory storage.
//!
//! A [`BlockStore`] models a disk of fixed-size blocks of `B` words plus a
//! bounded main memory of `M` words. Every block transfer goes through
//! [`read_block`](BlockStore::read_block) / [`write_block`](BlockStore::write_block)
//! and increments an I/O counter; nothing else touches the counters. The
//! memory budget is enforced through explicit [`pin`](BlockStore::pin) /
//! [`unpin`](BlockStore::unpin) accounting so tests can prove an algorithm's
//! working set stays within `M`.
//!
//! Allocation metadata (the free list, counters) is bookkeeping and lives
//! outside the `M`-word budget; allocating a block is not an I/O.
//!
//! # Persistence format
//!
//! [`BlockStore::dump`] writes the store as a flat little-endian stream:
//!
//! ```text
//! magic    8 bytes  b"XPQSTOR1"
//! n        u64      model parameter N (max live keys)
//! b        u64      block size in words
//! m        u64      memory budget in words
//! w        u64      word size in bits
//! slots    u64      number of block slots (allocated + freed)
//! reads    u64      I/O counter snapshot
//! writes   u64      I/O counter snapshot
//! allocs   u64      allocation counter snapshot
//! free_len u64      length of the free list
//! free[i]  u64      free block ids, oldest first
//! per slot:
//!   tag    u64      1 = allocated (followed by b words LE), 0 = hole
//! ```
//!
//! [`BlockStore::load`] restores a byte-identical store; round-tripping is
//! covered by tests.

use std::io::{self, Read, Write};

use thiserror::Error;

/// One machine word of the model. Keys and priorities each occupy one word.
pub type Word = u64;

/// Parameters of the external-memory model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelParams {
    /// Maximum number of live keys; keys are integers in `1..=n`.
    pub n: u64,
    /// Block capacity in words.
    pub b: usize,
    /// Main-memory capacity in words.
    pub m: usize,
    /// Word size in bits.
    pub w: u32,
}

impl ModelParams {
    /// Desk-scale defaults: N = 2^16, B = 64, M = 2^14, w = 64.
    pub fn desk() -> Self {
        ModelParams {
            n: 1 << 16,
            b: 64,
            m: 1 << 14,
            w: 64,
        }
    }

    /// Checks the model invariants: `B >= 2`, `M >= B`, and keys in `1..=N`
    /// must fit one word with a bit to spare (`w >= ceil(log2 N) + 1`).
    ///
    /// `fanout`, when known, additionally requires `M > B * fanout` so the
    /// queue's per-procedure working set has room.
    pub fn validate(&self, fanout: Option<usize>) -> Result<(), EmxError> {
        if self.b < 2 {
            return Err(EmxError::BadParams("block size must be at least 2 words"));
        }
        if self.m < self.b {
            return Err(EmxError::BadParams("memory must hold at least one block"));
        }
        if self.n == 0 {
            return Err(EmxError::BadParams("key universe must be non-empty"));
        }
        let need_bits = 64 - (self.n.saturating_sub(1)).leading_zeros() + 1;
        if self.w < need_bits || self.w > 64 {
            return Err(EmxError::BadParams("word size too small for key universe"));
        }
        if let Some(t) = fanout {
            if self.m <= self.b * t {
                return Err(EmxError::BadParams("memory must exceed B * fanout"));
            }
        }
        Ok(())
    }
}

/// Opaque handle to an allocated block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockId(pub u32);

/// Monotone I/O counters for one session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IoStats {
    pub reads: u64,
    pub writes: u64,
    pub allocs: u64,
}

impl IoStats {
    /// Total block transfers (reads plus writes).
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }

    /// Component-wise difference since `earlier`.
    pub fn since(&self, earlier: IoStats) -> IoStats {
        IoStats {
            reads: self.reads - earlier.reads,
            writes: self.writes - earlier.writes,
            allocs: self.allocs - earlier.allocs,
        }
    }
}

/// How memory-budget violations are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BudgetPolicy {
    /// Over-budget pins return [`EmxError::BudgetExceeded`].
    #[default]
    Enforce,
    /// Pins are tracked (peak recorded) but never rejected. Used for
    /// backends whose node size intentionally exceeds `M`.
    Track,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmxError {
    #[error("invalid model parameters: {0}")]
    BadParams(&'static str),
    #[error("block {0:?} is not allocated")]
    Unallocated(BlockId),
    #[error("block payload must be exactly {expected} words, got {got}")]
    WrongLength { expected: usize, got: usize },
    #[error("disk capacity of {0} blocks exhausted")]
    DiskFull(usize),
    #[error("memory budget exceeded: pinned {pinned} + {requested} > {budget} words")]
    BudgetExceeded {
        pinned: usize,
        requested: usize,
        budget: usize,
    },
    #[error("store image is corrupt: {0}")]
    BadImage(&'static str),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for EmxError {
    fn from(e: io::Error) -> Self {
        EmxError::Io(e.to_string())
    }
}

/// Receipt for a pinned span of working memory. Return it to
/// [`BlockStore::unpin`] when the span is released.
#[derive(Debug)]
#[must_use = "pinned memory must be released via unpin"]
pub struct PinToken {
    words: usize,
}

impl PinToken {
    pub fn words(&self) -> usize {
        self.words
    }
}

/// Simulated disk of `B`-word blocks with I/O counting and an `M`-word
/// memory budget.
#[derive(Debug)]
pub struct BlockStore {
    params: ModelParams,
    policy: BudgetPolicy,
    max_blocks: Option<usize>,
    blocks: Vec<Option<Box<[Word]>>>,
    free: Vec<BlockId>,
    stats: IoStats,
    pinned: usize,
    peak_pinned: usize,
}

impl BlockStore {
    pub fn new(params: ModelParams, policy: BudgetPolicy) -> Self {
        BlockStore {
            params,
            policy,
            max_blocks: None,
            blocks: Vec::new(),
            free: Vec::new(),
            stats: IoStats::default(),
            pinned: 0,
            peak_pinned: 0,
        }
    }

    /// Caps the disk at `max` block slots; further allocations fail.
    pub fn with_disk_cap(mut self, max: usize) -> Self {
        self.max_blocks = Some(max);
        self
    }

    pub fn params(&self) -> ModelParams {
        self.params
    }

    pub fn block_words(&self) -> usize {
        self.params.b
    }

    /// Returns a fresh zeroed block, reusing freed ids oldest-first.
    /// Allocation is metadata bookkeeping, not an I/O.
    pub fn alloc_block(&mut self) -> Result<BlockId, EmxError> {
        let id = if self.free.is_empty() {
            if let Some(cap) = self.max_blocks {
                if self.blocks.len() >= cap {
                    return Err(EmxError::DiskFull(cap));
                }
            }
            let id = BlockId(self.blocks.len() as u32);
            self.blocks.push(None);
            id
        } else {
            self.free.remove(0)
        };
        self.blocks[id.0 as usize] = Some(vec![0; self.params.b].into_boxed_slice());
        self.stats.allocs += 1;
        Ok(id)
    }

    /// Releases a block; its id may be handed out again by `alloc_block`.
    pub fn free_block(&mut self, id: BlockId) -> Result<(), EmxError> {
        let slot = self
            .blocks
            .get_mut(id.0 as usize)
            .ok_or(EmxError::Unallocated(id))?;
        if slot.take().is_none() {
            return Err(EmxError::Unallocated(id));
        }
        self.free.push(id);
        Ok(())
    }

    /// Transfers one block from disk to memory; counts one read.
    pub fn read_block(&mut self, id: BlockId) -> Result<&[Word], EmxError> {
        self.stats.reads += 1;
        self.blocks
            .get(id.0 as usize)
            .and_then(|s| s.as_deref())
            .ok_or(EmxError::Unallocated(id))
    }

    /// Transfers one block from memory to disk; counts one write.
    /// `data` must be exactly `B` words.
    pub fn write_block(&mut self, id: BlockId, data: &[Word]) -> Result<(), EmxError> {
        if data.len() != self.params.b {
            return Err(EmxError::WrongLength {
                expected: self.params.b,
                got: data.len(),
            });
        }
        let slot = self
            .blocks
            .get_mut(id.0 as usize)
            .and_then(|s| s.as_deref_mut())
            .ok_or(EmxError::Unallocated(id))?;
        slot.copy_from_slice(data);
        self.stats.writes += 1;
        Ok(())
    }

    /// Inspects a block without counting an I/O. For verification tooling
    /// (invariant checkers, dumps) only; the algorithms under test never
    /// call this.
    pub fn peek_block(&self, id: BlockId) -> Result<&[Word], EmxError> {
        self.blocks
            .get(id.0 as usize)
            .and_then(|s| s.as_deref())
            .ok_or(EmxError::Unallocated(id))
    }

    /// Reserves `words` of the memory budget.
    pub fn pin(&mut self, words: usize) -> Result<PinToken, EmxError> {
        if self.policy == BudgetPolicy::Enforce && self.pinned + words > self.params.m {
            return Err(EmxError::BudgetExceeded {
                pinned: self.pinned,
                requested: words,
                budget: self.params.m,
            });
        }
        self.pinned += words;
        self.peak_pinned = self.peak_pinned.max(self.pinned);
        Ok(PinToken { words })
    }

    /// Releases a reservation made by [`pin`](Self::pin).
    pub fn unpin(&mut self, token: PinToken) {
        debug_assert!(token.words <= self.pinned);
        self.pinned -= token.words;
    }

    pub fn pinned_words(&self) -> usize {
        self.pinned
    }

    /// Largest number of words simultaneously pinned so far.
    pub fn peak_pinned(&self) -> usize {
        self.peak_pinned
    }

    pub fn snapshot_stats(&self) -> IoStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = IoStats::default();
    }

    pub fn allocated_blocks(&self) -> usize {
        self.blocks.iter().filter(|s| s.is_some()).count()
    }

    /// Serializes the store to `out` in the documented little-endian layout.
    pub fn dump(&self, out: &mut dyn Write) -> Result<(), EmxError> {
        out.write_all(b"XPQSTOR1")?;
        let header = [
            self.params.n,
            self.params.b as u64,
            self.params.m as u64,
            u64::from(self.params.w),
            self.blocks.len() as u64,
            self.stats.reads,
            self.stats.writes,
            self.stats.allocs,
            self.free.len() as u64,
        ];
        for word in header {
            out.write_all(&word.to_le_bytes())?;
        }
        for id in &self.free {
            out.write_all(&u64::from(id.0).to_le_bytes())?;
        }
        for slot in &self.blocks {
            match slot {
                Some(data) => {
                    out.write_all(&1u64.to_le_bytes())?;
                    for word in data.iter() {
                        out.write_all(&word.to_le_bytes())?;
                    }
                }
                None => out.write_all(&0u64.to_le_bytes())?,
            }
        }
        Ok(())
    }

    /// Restores a store serialized by [`dump`](Self::dump).
    pub fn load(input: &mut dyn Read, policy: BudgetPolicy) -> Result<Self, EmxError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"XPQSTOR1" {
            return Err(EmxError::BadImage("bad magic"));
        }
        let word = |input: &mut dyn Read| -> Result<u64, EmxError> {
            let mut buf = [0u8; 8];
            input.read_exact(&mut buf)?;
            Ok(u64::from_le_bytes(buf))
        };
        let n = word(input)?;
        let b = word(input)? as usize;
        let m = word(input)? as usize;
        let w = word(input)? as u32;
        let slots = word(input)? as usize;
        let reads = word(input)?;
        let writes = word(input)?;
        let allocs = word(input)?;
        let free_len = word(input)? as usize;
        let params = ModelParams { n, b, m, w };
        params.validate(None)?;
        let mut free = Vec::with_capacity(free_len);
        for _ in 0..free_len {
            free.push(BlockId(word(input)? as u32));
        }
        let mut blocks = Vec::with_capacity(slots);
        for _ in 0..slots {
            let tag = word(input)?;
            match tag {
                0 => blocks.push(None),
                1 => {
                    let mut data = vec![0u64; b];
                    for slot in data.iter_mut() {
                        *slot = word(input)?;
                    }
                    blocks.push(Some(data.into_boxed_slice()));
                }
                _ => return Err(EmxError::BadImage("bad slot tag")),
            }
        }
        Ok(BlockStore {
            params,
            policy,
            max_blocks: None,
            blocks,
            free,
            stats: IoStats {
                reads,
                writes,
                allocs,
            },
            pinned: 0,
            peak_pinned: 0,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParams {
        ModelParams {
            n: 256,
            b: 4,
            m: 64,
            w: 64,
        }
    }

    #[test]
    fn fresh_store_allocates_zeroed_distinct_blocks() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        let b = store.alloc_block().unwrap();
        assert_eq!(a, BlockId(0));
        assert_ne!(a, b);
        assert_eq!(store.snapshot_stats().allocs, 2);
        assert_eq!(store.read_block(a).unwrap(), &[0, 0, 0, 0]);
        assert_eq!(store.snapshot_stats().reads, 1);
    }

    #[test]
    fn read_your_writes_and_last_writer_wins() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        let b = store.alloc_block().unwrap();
        store.write_block(a, &[1, 2, 3, 4]).unwrap();
        store.write_block(b, &[9, 9, 9, 9]).unwrap();
        store.write_block(a, &[5, 6, 7, 8]).unwrap();
        assert_eq!(store.read_block(a).unwrap(), &[5, 6, 7, 8]);
        assert_eq!(store.read_block(b).unwrap(), &[9, 9, 9, 9]);
    }

    #[test]
    fn counters_are_exact() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        store.reset_stats();
        for _ in 0..3 {
            store.read_block(a).unwrap();
        }
        for _ in 0..2 {
            store.write_block(a, &[0; 4]).unwrap();
        }
        // Pure computation and peeks leave the counters alone.
        store.peek_block(a).unwrap();
        let stats = store.snapshot_stats();
        assert_eq!((stats.reads, stats.writes, stats.allocs), (3, 2, 0));
    }

    #[test]
    fn stats_equal_sum_of_per_op_deltas() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        store.reset_stats();
        let mut accumulated = IoStats::default();
        let script: [(bool, u64); 5] = [(true, 0), (false, 0), (true, 0), (true, 0), (false, 0)];
        for (is_read, _) in script {
            let before = store.snapshot_stats();
            if is_read {
                store.read_block(a).unwrap();
            } else {
                store.write_block(a, &[0; 4]).unwrap();
            }
            let delta = store.snapshot_stats().since(before);
            accumulated.reads += delta.reads;
            accumulated.writes += delta.writes;
            accumulated.allocs += delta.allocs;
        }
        assert_eq!(accumulated, store.snapshot_stats());
        assert_eq!(accumulated.total(), 5);
    }

    #[test]
    fn freed_ids_are_reused_via_free_list_replay() {
        // Oracle: replay the same alloc/free script against a plain
        // first-in-first-out free list and require identical id sequences.
        // Script entries: Some(i) frees the i-th allocated id, None allocates.
        let script = [None, None, None, Some(1), None, Some(0), None, None];
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let mut model_free: Vec<u32> = Vec::new();
        let mut model_next = 0u32;
        let mut got = Vec::new();
        let mut want = Vec::new();
        for step in script {
            match step {
                None => {
                    got.push(store.alloc_block().unwrap().0);
                    want.push(if model_free.is_empty() {
                        let id = model_next;
                        model_next += 1;
                        id
                    } else {
                        model_free.remove(0)
                    });
                }
                Some(i) => {
                    store.free_block(BlockId(got[i])).unwrap();
                    model_free.push(got[i]);
                }
            }
        }
        assert_eq!(got, want);
    }

    #[test]
    fn double_free_and_bad_reads_fault() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        store.free_block(a).unwrap();
        assert_eq!(store.free_block(a), Err(EmxError::Unallocated(a)));
        assert_eq!(store.read_block(a).unwrap_err(), EmxError::Unallocated(a));
        assert!(matches!(
            store.write_block(BlockId(99), &[0; 4]),
            Err(EmxError::Unallocated(_))
        ));
    }

    #[test]
    fn wrong_length_write_is_a_contract_violation() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        assert_eq!(
            store.write_block(a, &[1, 2, 3]),
            Err(EmxError::WrongLength {
                expected: 4,
                got: 3
            })
        );
    }

    #[test]
    fn disk_cap_exhausts() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce).with_disk_cap(2);
        store.alloc_block().unwrap();
        store.alloc_block().unwrap();
        assert_eq!(store.alloc_block(), Err(EmxError::DiskFull(2)));
    }

    #[test]
    fn pin_budget_boundary() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let m = store.params().m;
        let tok = store.pin(m).unwrap();
        assert!(matches!(store.pin(1), Err(EmxError::BudgetExceeded { .. })));
        store.unpin(tok);
        let tok = store.pin(1).unwrap();
        assert_eq!(store.pinned_words(), 1);
        store.unpin(tok);
        assert_eq!(store.pinned_words(), 0);
        assert_eq!(store.peak_pinned(), m);
    }

    #[test]
    fn track_policy_records_but_never_rejects() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Track);
        let tok = store.pin(10_000).unwrap();
        assert_eq!(store.peak_pinned(), 10_000);
        store.unpin(tok);
    }

    #[test]
    fn dump_load_round_trip_is_byte_exact() {
        let mut store = BlockStore::new(small(), BudgetPolicy::Enforce);
        let a = store.alloc_block().unwrap();
        let b = store.alloc_block().unwrap();
        let c = store.alloc_block().unwrap();
        store.write_block(a, &[1, 2, 3, 4]).unwrap();
        store.write_block(c, &[7, 0, 0, 9]).unwrap();
        store.free_block(b).unwrap();

        let mut image = Vec::new();
        store.dump(&mut image).unwrap();
        let restored = BlockStore::load(&mut image.as_slice(), BudgetPolicy::Enforce).unwrap();
        let mut image2 = Vec::new();
        restored.dump(&mut image2).unwrap();
        assert_eq!(image, image2);
        assert_eq!(restored.peek_block(a).unwrap(), &[1, 2, 3, 4]);
        assert_eq!(restored.snapshot_stats(), store.snapshot_stats());
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::desk().validate(Some(4)).is_ok());
        let bad = ModelParams {
            n: 256,
            b: 1,
            m: 64,
            w: 64,
        };
        assert!(bad.validate(None).is_err());
        let tight_w = ModelParams {
            n: 256,
            b: 4,
            m: 64,
            w: 8,
        };
        // 256 needs ceil(log2 256) + 1 = 9 bits.
        assert!(tight_w.validate(None).is_err());
        let ok_w = ModelParams {
            n: 256,
            b: 4,
            m: 64,
            w: 9,
        };
        assert!(ok_w.validate(None).is_ok());
    }
}
