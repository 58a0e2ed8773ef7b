//! On-disk node layout.
//!
//! Every non-root node owns four block-aligned regions, allocated once at
//! construction (the tree is static):
//!
//! ```text
//! meta    word 0: boundary, stored bitwise-complemented so freshly
//!                 allocated (zeroed) nodes decode to the +inf initial state
//!         word 1: list length      word 2: signal-buffer length
//!         word 3: todo length      words 4..: todo signals, 2 words each
//! filter  serialized membership filter (see filter module docs)
//! sig     signal buffer, 2 words per signal (internal nodes only)
//! list    entries, 2 words per entry: key word then priority word
//! ```
//!
//! A signal occupies exactly two words: the key word carries the
//! update/delete tag in its spare top bit (the model guarantees
//! `w >= ceil(log2 N) + 1`, so keys never reach it), and the second word is
//! the priority (zero for deletes). Buffers and lists store only their
//! occupied prefix; words past the recorded lengths are stale.

use crate::emx::{BlockId, BlockStore, Word};
use crate::filter::{Filter, FilterParams};
use crate::oracle::NodeSnapshot;

use super::{Entry, PqError, Signal, Topology, TreeConfig, NodeId, ROOT, INF};

/// Tag bit marking a signal's key word as an update.
const UPDATE_BIT: u64 = 1 << 63;
/// Words in the meta header before the todo signals begin.
pub(crate) const META_HEADER_WORDS: usize = 4;

pub(crate) fn encode_signal(sig: Signal) -> (Word, Word) {
    match sig {
        Signal::Delete { key } => (key, 0),
        Signal::Update { key, priority } => (key | UPDATE_BIT, priority),
    }
}

pub(crate) fn decode_signal(key_word: Word, priority_word: Word) -> Signal {
    if key_word & UPDATE_BIT != 0 {
        Signal::Update {
            key: key_word & !UPDATE_BIT,
            priority: priority_word,
        }
    } else {
        Signal::Delete { key: key_word }
    }
}

/// Block handles for one disk node.
#[derive(Debug, Clone, Default)]
pub(crate) struct NodeRegions {
    pub meta: Vec<BlockId>,
    pub filter: Vec<BlockId>,
    pub sig: Vec<BlockId>,
    pub list: Vec<BlockId>,
}

/// Region sizing plus the per-node block handles.
#[derive(Debug)]
pub(crate) struct NodeLayout {
    pub b: usize,
    /// Capacity limits (not transient slack): list 2tB, sig tB, todo B.
    pub list_limit: usize,
    pub sig_limit: usize,
    pub todo_limit: usize,
    /// Allocated slots, with room for the bounded transients the procedures
    /// create before overflow handling runs.
    pub list_cap: usize,
    pub sig_cap: usize,
    pub filter_region: usize,
    pub filter_capacity: usize,
    pub epsilon: f64,
    tree_seed: u64,
    regions: Vec<NodeRegions>,
}

impl NodeLayout {
    pub fn allocate(
        store: &mut BlockStore,
        topo: &Topology,
        cfg: &TreeConfig,
    ) -> Result<Self, PqError> {
        let b = cfg.params.b;
        let t = cfg.t;
        let tb = t * b;
        let list_limit = 2 * tb;
        let sig_limit = tb;
        let todo_limit = b;
        let list_cap = list_limit + b + 4;
        let sig_cap = sig_limit + 2;
        let todo_cap = todo_limit + 2;
        // The filter summarizes the list keys plus keys whose entries were
        // folded into the todo buffer in transit, so it must absorb both
        // at their transient worst.
        let filter_capacity = list_cap + todo_cap;
        let probe = FilterParams {
            capacity: filter_capacity,
            epsilon: cfg.epsilon,
            seed: 0,
        };
        let filter_region = Filter::region_words(&probe);

        let meta_words = META_HEADER_WORDS + 2 * todo_cap;
        let sig_words = 2 * sig_cap;
        let list_words = 2 * list_cap;

        let mut regions = Vec::with_capacity(topo.node_count());
        for id in 0..topo.node_count() {
            if id == ROOT {
                regions.push(NodeRegions::default());
                continue;
            }
            let mut alloc_region = |words: usize| -> Result<Vec<BlockId>, PqError> {
                let blocks = words.div_ceil(b);
                let mut ids = Vec::with_capacity(blocks);
                for _ in 0..blocks {
                    ids.push(store.alloc_block()?);
                }
                Ok(ids)
            };
            let meta = alloc_region(meta_words)?;
            let filter = alloc_region(filter_region)?;
            let sig = if topo.is_leaf(id) {
                Vec::new()
            } else {
                alloc_region(sig_words)?
            };
            let list = alloc_region(list_words)?;
            regions.push(NodeRegions {
                meta,
                filter,
                sig,
                list,
            });
        }
        Ok(NodeLayout {
            b,
            list_limit,
            sig_limit,
            todo_limit,
            list_cap,
            sig_cap,
            filter_region,
            filter_capacity,
            epsilon: cfg.epsilon,
            tree_seed: cfg.seed,
            regions,
        })
    }

    pub fn regions(&self, id: NodeId) -> &NodeRegions {
        &self.regions[id]
    }

    /// Filter parameters for a (re)build of `node`'s filter. The seed mixes
    /// the tree seed, node id, and a rebuild epoch so re-randomization after
    /// observed clustering stays reproducible.
    pub fn filter_params(&self, node: NodeId, epoch: u64) -> FilterParams {
        let mut seed = self.tree_seed ^ (node as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        seed ^= epoch.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
        FilterParams {
            capacity: self.filter_capacity,
            epsilon: self.epsilon,
            seed,
        }
    }
}

/// Reads `words[range]` of a region through uncounted peeks.
fn peek_range(
    store: &BlockStore,
    blocks: &[BlockId],
    start_word: usize,
    len_words: usize,
    b: usize,
) -> Result<Vec<Word>, PqError> {
    let mut out = Vec::with_capacity(len_words);
    if len_words == 0 {
        return Ok(out);
    }
    let first_block = start_word / b;
    let last_block = (start_word + len_words - 1) / b;
    for (block_idx, block) in blocks
        .iter()
        .enumerate()
        .take(last_block + 1)
        .skip(first_block)
    {
        let data = store.peek_block(*block)?;
        let lo = start_word.max(block_idx * b) - block_idx * b;
        let hi = (start_word + len_words).min((block_idx + 1) * b) - block_idx * b;
        out.extend_from_slice(&data[lo..hi]);
    }
    Ok(out)
}

fn decode_pairs<T>(words: &[Word], decode: impl Fn(Word, Word) -> T) -> Vec<T> {
    words
        .chunks_exact(2)
        .map(|pair| decode(pair[0], pair[1]))
        .collect()
}

/// Decodes a full node without touching the I/O counters.
pub(crate) fn peek_node(
    store: &BlockStore,
    layout: &NodeLayout,
    id: NodeId,
) -> Result<NodeSnapshot, PqError> {
    let regions = layout.regions(id);
    let header = peek_range(store, &regions.meta, 0, META_HEADER_WORDS, layout.b)?;
    let boundary = !header[0];
    let list_len = header[1] as usize;
    let sig_len = header[2] as usize;
    let todo_len = header[3] as usize;
    let todo_words = peek_range(
        store,
        &regions.meta,
        META_HEADER_WORDS,
        2 * todo_len,
        layout.b,
    )?;
    let sig_words = if sig_len == 0 {
        Vec::new()
    } else {
        peek_range(store, &regions.sig, 0, 2 * sig_len, layout.b)?
    };
    let list_words = peek_range(store, &regions.list, 0, 2 * list_len, layout.b)?;
    Ok(NodeSnapshot {
        boundary,
        list: decode_pairs(&list_words, |k, p| Entry {
            key: k,
            priority: p,
        }),
        sig: decode_pairs(&sig_words, decode_signal),
        todo: decode_pairs(&todo_words, decode_signal),
    })
}

pub(crate) fn peek_filter(
    store: &BlockStore,
    layout: &NodeLayout,
    id: NodeId,
) -> Result<Filter, PqError> {
    let regions = layout.regions(id);
    let words = peek_range(store, &regions.filter, 0, layout.filter_region, layout.b)?;
    if words[0] == 0 {
        // Never-written region: the node's filter is still in its fresh
        // empty state.
        return Ok(Filter::new(layout.filter_params(id, 0))?);
    }
    Ok(Filter::from_words(&words)?)
}

pub(crate) fn peek_filter_words(
    store: &BlockStore,
    layout: &NodeLayout,
    id: NodeId,
) -> Result<usize, PqError> {
    Ok(peek_filter(store, layout, id)?.to_words().len())
}

/// Sanity check used by debug assertions: entries stay strictly below the
/// sentinel and keys below the tag bit.
pub(crate) fn entry_encodable(entry: &Entry) -> bool {
    entry.priority < INF && entry.key & UPDATE_BIT == 0
}
