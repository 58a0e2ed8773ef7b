//! Deletable approximate-membership filter.
//!
//! Each tree node keeps one of these to record which keys its list holds, so
//! signal routing can decide "does this child contain key k?" without reading
//! the child's list from disk. The structure answers membership with false
//! positives only: a key that was inserted (and not deleted as many times)
//! always queries true; an absent key queries true with probability at most
//! epsilon.
//!
//! Construction: a bucketed fingerprint table. Keys hash to one of the
//! 4-slot buckets; a slot stores a fingerprint of `ceil(log2(1/eps)) + 3`
//! bits plus a 2-bit duplicate counter. Inserts that find their bucket full
//! (or their counter saturated) go to a small spill list, which preserves the
//! no-false-negative guarantee unconditionally. Multiset semantics: inserting
//! a key twice requires deleting it twice.
//!
//! # Serialized layout
//!
//! The filter serializes into a fixed region of
//! [`Filter::region_words`] words:
//!
//! ```text
//! word 0   capacity
//! word 1   epsilon (f64 bits)
//! word 2   hash seed
//! word 3   current multiset size
//! word 4   spill length
//! then     table: buckets * 4 slots of (fp_bits + 2) bits, bit-packed LE
//! then     spill entries, one word each: count<<56 | bucket<<32 | fingerprint
//! ```
//!
//! Only the occupied spill prefix is meaningful; round-tripping is covered
//! by tests.

use std::collections::HashMap;

use thiserror::Error;

use crate::emx::Word;

const BUCKET_SLOTS: usize = 4;
const HEADER_WORDS: usize = 5;
/// Slot counters encode multiplicities 1..=4; further copies spill.
const SLOT_MAX_COUNT: u64 = 4;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FilterError {
    #[error("filter spill region saturated (capacity {0})")]
    Overflow(usize),
    #[error("rebuild input exceeds filter capacity region")]
    TooManyKeys,
    #[error("invalid filter parameters: {0}")]
    BadParams(&'static str),
}

/// Sizing parameters for a [`Filter`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterParams {
    /// Maximum steady-state number of keys.
    pub capacity: usize,
    /// Target false-positive probability, in (0, 1).
    pub epsilon: f64,
    /// Hash seed; rebuilds may re-randomize it.
    pub seed: u64,
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), FilterError> {
        if self.capacity == 0 {
            return Err(FilterError::BadParams("capacity must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(FilterError::BadParams("epsilon must be in (0, 1)"));
        }
        Ok(())
    }

    /// Fingerprint width: `ceil(log2(1/eps)) + 3` bits.
    pub fn fingerprint_bits(&self) -> u32 {
        let core = (1.0 / self.epsilon).log2().ceil() as u32;
        (core + 3).clamp(4, 32)
    }

    fn buckets(&self) -> usize {
        // ~1.25x capacity in slots keeps the table load around 0.8 even
        // while a node transiently overflows.
        (self.capacity * 5).div_ceil(4 * BUCKET_SLOTS).max(1)
    }

    fn spill_capacity(&self) -> usize {
        (self.capacity / 4).max(8)
    }

    fn table_words(&self) -> usize {
        let slot_bits = self.fingerprint_bits() as usize + 2;
        (self.buckets() * BUCKET_SLOTS * slot_bits).div_ceil(64)
    }
}

fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Bucketed fingerprint table with spill list; see the module docs.
#[derive(Debug, Clone)]
pub struct Filter {
    params: FilterParams,
    fp_bits: u32,
    buckets: usize,
    table: Vec<u64>,
    spill: Vec<u64>,
    count: u64,
    /// Exact key multiset kept alongside the approximate table when
    /// verification hooks are enabled. Never serialized; never consulted by
    /// the production query path.
    shadow: Option<HashMap<u64, u32>>,
}

impl Filter {
    pub fn new(params: FilterParams) -> Result<Self, FilterError> {
        params.validate()?;
        Ok(Filter {
            fp_bits: params.fingerprint_bits(),
            buckets: params.buckets(),
            table: vec![0; params.table_words()],
            spill: Vec::new(),
            count: 0,
            shadow: None,
            params,
        })
    }

    /// Total reserved footprint in words, spill region included.
    pub fn region_words(params: &FilterParams) -> usize {
        HEADER_WORDS + params.table_words() + params.spill_capacity()
    }

    /// Reserved footprint in bits, for space-bound checks.
    pub fn region_bits(params: &FilterParams) -> usize {
        Self::region_words(params) * 64
    }

    pub fn params(&self) -> &FilterParams {
        &self.params
    }

    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Enables the exact shadow multiset (verification hooks).
    pub fn enable_shadow(&mut self) {
        if self.shadow.is_none() {
            self.shadow = Some(HashMap::new());
        }
    }

    pub fn take_shadow(&mut self) -> Option<HashMap<u64, u32>> {
        self.shadow.take()
    }

    pub fn set_shadow(&mut self, shadow: Option<HashMap<u64, u32>>) {
        self.shadow = shadow;
    }

    /// Exact membership according to the shadow, if one is attached.
    pub fn shadow_contains(&self, key: u64) -> Option<bool> {
        self.shadow.as_ref().map(|s| s.contains_key(&key))
    }

    fn slot_bits(&self) -> usize {
        self.fp_bits as usize + 2
    }

    fn hash(&self, key: u64) -> (usize, u64) {
        let h = mix64(key ^ self.params.seed);
        let bucket = ((h >> 32) % self.buckets as u64) as usize;
        let mut fp = h & ((1u64 << self.fp_bits) - 1);
        if fp == 0 {
            fp = 1;
        }
        (bucket, fp)
    }

    fn get_slot(&self, index: usize) -> u64 {
        let slot_bits = self.slot_bits();
        let bit = index * slot_bits;
        let (word, off) = (bit / 64, bit % 64);
        let mask = (1u128 << slot_bits) - 1;
        let lo = self.table[word] as u128 >> off;
        let hi = if off + slot_bits > 64 {
            (self.table[word + 1] as u128) << (64 - off)
        } else {
            0
        };
        ((lo | hi) & mask) as u64
    }

    fn set_slot(&mut self, index: usize, value: u64) {
        let slot_bits = self.slot_bits();
        let bit = index * slot_bits;
        let (word, off) = (bit / 64, bit % 64);
        let mask = (1u64 << slot_bits) - 1;
        debug_assert!(value <= mask);
        self.table[word] &= !(mask << off);
        self.table[word] |= value << off;
        if off + slot_bits > 64 {
            let spill_bits = off + slot_bits - 64;
            let hi_mask = (1u64 << spill_bits) - 1;
            self.table[word + 1] &= !hi_mask;
            self.table[word + 1] |= value >> (64 - off);
        }
    }

    fn slot_fp(&self, slot: u64) -> u64 {
        slot >> 2
    }

    fn slot_count(&self, slot: u64) -> u64 {
        if slot == 0 {
            0
        } else {
            (slot & 3) + 1
        }
    }

    fn make_slot(&self, fp: u64, count: u64) -> u64 {
        debug_assert!((1..=SLOT_MAX_COUNT).contains(&count));
        (fp << 2) | (count - 1)
    }

    fn spill_entry(bucket: usize, fp: u64, count: u64) -> u64 {
        (count << 56) | ((bucket as u64) << 32) | fp
    }

    fn spill_parts(entry: u64) -> (usize, u64, u64) {
        (
            ((entry >> 32) & 0xff_ffff) as usize,
            entry & 0xffff_ffff,
            entry >> 56,
        )
    }

    /// Records one multiplicity of `key`. The key queries true afterwards.
    pub fn insert(&mut self, key: u64) -> Result<(), FilterError> {
        let (bucket, fp) = self.hash(key);
        let base = bucket * BUCKET_SLOTS;
        let mut free = None;
        let mut placed = false;
        for i in base..base + BUCKET_SLOTS {
            let slot = self.get_slot(i);
            if slot == 0 {
                if free.is_none() {
                    free = Some(i);
                }
            } else if self.slot_fp(slot) == fp {
                let c = self.slot_count(slot);
                if c < SLOT_MAX_COUNT {
                    self.set_slot(i, self.make_slot(fp, c + 1));
                    placed = true;
                }
                break;
            }
        }
        if !placed {
            if let Some(i) = free {
                self.set_slot(i, self.make_slot(fp, 1));
                placed = true;
            }
        }
        if !placed {
            // Bucket full or counter saturated: spill.
            let mut found = false;
            for entry in self.spill.iter_mut() {
                let (b, f, c) = Self::spill_parts(*entry);
                if b == bucket && f == fp {
                    if c == 0xff {
                        return Err(FilterError::Overflow(self.params.spill_capacity()));
                    }
                    *entry = Self::spill_entry(bucket, fp, c + 1);
                    found = true;
                    break;
                }
            }
            if !found {
                if self.spill.len() >= self.params.spill_capacity() {
                    return Err(FilterError::Overflow(self.params.spill_capacity()));
                }
                self.spill.push(Self::spill_entry(bucket, fp, 1));
            }
        }
        self.count += 1;
        if let Some(shadow) = self.shadow.as_mut() {
            *shadow.entry(key).or_insert(0) += 1;
        }
        Ok(())
    }

    /// Removes one multiplicity of `key`. The caller guarantees the key was
    /// inserted at least as many times as deleted; deleting an absent key is
    /// a contract violation caught by the shadow in debug builds and a
    /// memory-safe no-op otherwise.
    pub fn delete(&mut self, key: u64) {
        if let Some(shadow) = self.shadow.as_mut() {
            match shadow.get_mut(&key) {
                Some(c) if *c > 1 => *c -= 1,
                Some(_) => {
                    shadow.remove(&key);
                }
                None => debug_assert!(false, "filter delete of absent key {key}"),
            }
        }
        let (bucket, fp) = self.hash(key);
        // Spill copies first, so slot-resident copies survive longest.
        for i in 0..self.spill.len() {
            let (b, f, c) = Self::spill_parts(self.spill[i]);
            if b == bucket && f == fp {
                if c > 1 {
                    self.spill[i] = Self::spill_entry(bucket, fp, c - 1);
                } else {
                    self.spill.swap_remove(i);
                }
                self.count = self.count.saturating_sub(1);
                return;
            }
        }
        let base = bucket * BUCKET_SLOTS;
        for i in base..base + BUCKET_SLOTS {
            let slot = self.get_slot(i);
            if slot != 0 && self.slot_fp(slot) == fp {
                let c = self.slot_count(slot);
                if c > 1 {
                    self.set_slot(i, self.make_slot(fp, c - 1));
                } else {
                    self.set_slot(i, 0);
                }
                self.count = self.count.saturating_sub(1);
                return;
            }
        }
        debug_assert!(self.shadow.is_some(), "filter delete missed: key {key}");
    }

    /// Approximate membership: true for every present key, and true with
    /// probability at most epsilon for an absent one.
    pub fn query(&self, key: u64) -> bool {
        let (bucket, fp) = self.hash(key);
        let base = bucket * BUCKET_SLOTS;
        for i in base..base + BUCKET_SLOTS {
            let slot = self.get_slot(i);
            if slot != 0 && self.slot_fp(slot) == fp {
                return true;
            }
        }
        self.spill
            .iter()
            .any(|&e| {
                let (b, f, _) = Self::spill_parts(e);
                b == bucket && f == fp
            })
    }

    /// Builds a fresh filter containing exactly the multiset `keys`.
    pub fn rebuild(
        params: FilterParams,
        keys: impl IntoIterator<Item = u64>,
        keep_shadow: bool,
    ) -> Result<Self, FilterError> {
        let mut filter = Filter::new(params)?;
        if keep_shadow {
            filter.enable_shadow();
        }
        for (inserted, key) in keys.into_iter().enumerate() {
            // The spill region is sized for 2x capacity transients; beyond
            // that the caller has lost track of its sizing contract.
            if inserted >= params.capacity * 2 + 2 {
                return Err(FilterError::TooManyKeys);
            }
            filter.insert(key)?;
        }
        Ok(filter)
    }

    /// Serializes header, table, and occupied spill prefix.
    pub fn to_words(&self) -> Vec<Word> {
        let mut out = Vec::with_capacity(HEADER_WORDS + self.table.len() + self.spill.len());
        out.push(self.params.capacity as u64);
        out.push(self.params.epsilon.to_bits());
        out.push(self.params.seed);
        out.push(self.count);
        out.push(self.spill.len() as u64);
        out.extend_from_slice(&self.table);
        out.extend_from_slice(&self.spill);
        out
    }

    /// Occupied word count computed from the five header words alone, so a
    /// loader can fetch exactly the meaningful prefix.
    pub fn occupied_words_from_header(header: &[Word]) -> usize {
        debug_assert!(header.len() >= HEADER_WORDS);
        let params = FilterParams {
            capacity: header[0] as usize,
            epsilon: f64::from_bits(header[1]),
            seed: header[2],
        };
        let spill_len = header[4] as usize;
        HEADER_WORDS + params.table_words() + spill_len
    }

    /// Restores a filter serialized by [`to_words`](Self::to_words). The
    /// slice may extend past the occupied prefix (region padding).
    pub fn from_words(words: &[Word]) -> Result<Self, FilterError> {
        if words.len() < HEADER_WORDS {
            return Err(FilterError::BadParams("filter image truncated"));
        }
        let params = FilterParams {
            capacity: words[0] as usize,
            epsilon: f64::from_bits(words[1]),
            seed: words[2],
        };
        params.validate()?;
        let count = words[3];
        let spill_len = words[4] as usize;
        let table_words = params.table_words();
        if words.len() < HEADER_WORDS + table_words + spill_len {
            return Err(FilterError::BadParams("filter image truncated"));
        }
        let table = words[HEADER_WORDS..HEADER_WORDS + table_words].to_vec();
        let spill =
            words[HEADER_WORDS + table_words..HEADER_WORDS + table_words + spill_len].to_vec();
        Ok(Filter {
            fp_bits: params.fingerprint_bits(),
            buckets: params.buckets(),
            table,
            spill,
            count,
            shadow: None,
            params,
        })
    }
}
