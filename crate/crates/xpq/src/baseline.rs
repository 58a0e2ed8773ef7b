//! Baseline backend: the classic external-memory tournament tree.
//!
//! A binary tree with `ceil(N/M)` leaves; keys `(i-1)*M+1 ..= i*M` belong to
//! leaf `i`. Every node stores up to `M` entries plus (for internal nodes) a
//! signal buffer of `M` words (`M/2` two-word signals); the root lives in
//! memory. There are no membership filters and no todo buffers: pushing a
//! signal buffer down loads both children's full entry lists and applies or
//! forwards each signal directly, which is why a push costs on the order of
//! `M/B` I/Os. Boundary values and the descending `(priority, key)` list
//! order match the tree queue so the two backends compare like for like.
//!
//! Node regions on disk: `[boundary (complemented), list_len, sig_len]`
//! header, then the signal pairs, then the entry pairs.

use std::collections::BTreeMap;

use crate::emx::{BlockId, BlockStore, BudgetPolicy, IoStats, ModelParams, Word};
use crate::pq::{
    decode_signal_words, encode_signal_words, entry_cmp_desc, Entry, PqError, PriorityCodec,
    Signal, Topology, INF,
};

const HEADER_WORDS: usize = 3;
const ROOT: usize = 0;

#[derive(Debug, Clone, Default)]
struct BaseNode {
    boundary: u64,
    list: Vec<Entry>,
    sig: Vec<Signal>,
}

/// Binary tournament-tree priority queue over the shared block-store model.
pub struct KTreeQueue {
    store: BlockStore,
    topo: Topology,
    codec: PriorityCodec,
    /// Max entries per node; restore procedures target half of this.
    node_cap: usize,
    sig_cap: usize,
    regions: Vec<Vec<BlockId>>,
    root: BaseNode,
    known_empty: bool,
}

impl KTreeQueue {
    pub fn new(params: ModelParams) -> Result<Self, PqError> {
        params.validate(None)?;
        let node_cap = params.m.max(4);
        let sig_cap = (params.m / 2).max(2);
        // Fat nodes exceed the M-word budget by design; track, don't enforce.
        let mut store = BlockStore::new(params, BudgetPolicy::Track);
        let topo = Topology::new(params.n, 2, node_cap as u64);
        // Transient slack: a child can absorb a full push before its own
        // restore procedure runs.
        let region_words = HEADER_WORDS + 2 * (sig_cap + 2) + 2 * (2 * node_cap + 4);
        let mut regions = Vec::with_capacity(topo.node_count());
        for id in 0..topo.node_count() {
            if id == ROOT {
                regions.push(Vec::new());
                continue;
            }
            let blocks = region_words.div_ceil(params.b);
            let mut ids = Vec::with_capacity(blocks);
            for _ in 0..blocks {
                ids.push(store.alloc_block()?);
            }
            regions.push(ids);
        }
        Ok(KTreeQueue {
            store,
            topo,
            codec: PriorityCodec::for_universe(params.n),
            node_cap,
            sig_cap,
            regions,
            root: BaseNode {
                boundary: INF,
                list: Vec::new(),
                sig: Vec::new(),
            },
            known_empty: true,
        })
    }

    pub fn io_stats(&self) -> IoStats {
        self.store.snapshot_stats()
    }

    pub fn reset_io_stats(&mut self) {
        self.store.reset_stats()
    }

    pub fn peak_pinned(&self) -> usize {
        self.store.peak_pinned()
    }

    pub fn pin_words(&mut self, words: usize) -> Result<crate::emx::PinToken, PqError> {
        Ok(self.store.pin(words)?)
    }

    pub fn unpin_words(&mut self, token: crate::emx::PinToken) {
        self.store.unpin(token)
    }

    fn check_key(&self, key: u64) -> Result<(), PqError> {
        let n = self.store.params().n;
        if key == 0 || key > n {
            return Err(PqError::KeyOutOfRange { key, n });
        }
        Ok(())
    }

    // ---- node i/o --------------------------------------------------------

    fn read_node(&mut self, id: usize) -> Result<BaseNode, PqError> {
        debug_assert_ne!(id, ROOT);
        let b = self.store.params().b;
        let blocks = &self.regions[id];
        let header_blocks = HEADER_WORDS.div_ceil(b);
        let mut words: Vec<Word> = Vec::new();
        for blk in blocks.iter().take(header_blocks) {
            words.extend_from_slice(self.store.read_block(*blk)?);
        }
        let boundary = !words[0];
        let list_len = words[1] as usize;
        let sig_len = words[2] as usize;
        let occupied = HEADER_WORDS + 2 * sig_len + 2 * list_len;
        let total_blocks = occupied.div_ceil(b);
        for blk in blocks.iter().take(total_blocks).skip(header_blocks) {
            words.extend_from_slice(self.store.read_block(*blk)?);
        }
        let mut sig = Vec::with_capacity(sig_len);
        for i in 0..sig_len {
            let base = HEADER_WORDS + 2 * i;
            sig.push(decode_signal_words(words[base], words[base + 1]));
        }
        let mut list = Vec::with_capacity(list_len);
        for i in 0..list_len {
            let base = HEADER_WORDS + 2 * sig_len + 2 * i;
            list.push(Entry {
                key: words[base],
                priority: words[base + 1],
            });
        }
        Ok(BaseNode {
            boundary,
            list,
            sig,
        })
    }

    fn write_node(&mut self, id: usize, node: &BaseNode) -> Result<(), PqError> {
        debug_assert_ne!(id, ROOT);
        let b = self.store.params().b;
        let mut words: Vec<Word> =
            Vec::with_capacity(HEADER_WORDS + 2 * node.sig.len() + 2 * node.list.len());
        words.push(!node.boundary);
        words.push(node.list.len() as u64);
        words.push(node.sig.len() as u64);
        for sig in &node.sig {
            let (a, z) = encode_signal_words(*sig);
            words.push(a);
            words.push(z);
        }
        for e in &node.list {
            words.push(e.key);
            words.push(e.priority);
        }
        let blocks = &self.regions[id];
        for (i, chunk) in words.chunks(b).enumerate() {
            let mut content = vec![0u64; b];
            content[..chunk.len()].copy_from_slice(chunk);
            self.store.write_block(blocks[i], &content)?;
        }
        Ok(())
    }

    // ---- public operations -------------------------------------------------

    pub fn max_priority(&self) -> u64 {
        self.codec.max_priority()
    }

    pub fn update(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        self.check_key(key)?;
        if priority > self.codec.max_priority() {
            return Err(PqError::InvalidPriority(priority));
        }
        let priority = self.codec.compose(key, priority);
        self.known_empty = false;
        if let Some(pos) = self.root.list.iter().position(|e| e.key == key) {
            if priority < self.root.list[pos].priority {
                self.root.list.remove(pos);
                sorted_insert(&mut self.root.list, Entry { key, priority });
            }
            return Ok(());
        }
        if priority > self.root.boundary {
            self.root.sig.push(Signal::Update { key, priority });
            if self.root.sig.len() > self.sig_cap {
                self.push_signal(ROOT)?;
            }
            return Ok(());
        }
        sorted_insert(&mut self.root.list, Entry { key, priority });
        self.root.sig.push(Signal::Delete { key });
        if self.root.sig.len() > self.sig_cap {
            self.push_signal(ROOT)?;
        }
        if self.root.list.len() > self.node_cap {
            self.empty_list(ROOT)?;
        }
        Ok(())
    }

    pub fn delete(&mut self, key: u64) -> Result<(), PqError> {
        self.check_key(key)?;
        if self.known_empty {
            return Ok(());
        }
        if let Some(pos) = self.root.list.iter().position(|e| e.key == key) {
            self.root.list.remove(pos);
            if self.root.list.is_empty() {
                self.fill_up(ROOT)?;
            }
        } else {
            self.root.sig.push(Signal::Delete { key });
            if self.root.sig.len() > self.sig_cap {
                self.push_signal(ROOT)?;
            }
        }
        Ok(())
    }

    pub fn extract_min(&mut self) -> Result<Option<Entry>, PqError> {
        if self.known_empty {
            return Ok(None);
        }
        if self.root.list.is_empty() {
            self.fill_up(ROOT)?;
        }
        let Some(&entry) = self.root.list.last() else {
            self.known_empty = true;
            return Ok(None);
        };
        self.delete(entry.key)?;
        Ok(Some(Entry {
            key: entry.key,
            priority: self.codec.raw(entry.priority),
        }))
    }

    pub fn apply(
        &mut self,
        op: &crate::trace::TraceOp,
    ) -> Result<Option<Option<Entry>>, PqError> {
        match *op {
            crate::trace::TraceOp::Update { key, priority } => {
                self.update(key, priority)?;
                Ok(None)
            }
            crate::trace::TraceOp::Delete { key } => {
                self.delete(key)?;
                Ok(None)
            }
            crate::trace::TraceOp::ExtractMin => Ok(Some(self.extract_min()?)),
        }
    }

    // ---- procedures ----------------------------------------------------------

    /// Loads each child wholesale and applies or forwards the buffered
    /// signals in arrival order.
    fn push_signal(&mut self, v: usize) -> Result<(), PqError> {
        let signals = if v == ROOT {
            std::mem::take(&mut self.root.sig)
        } else {
            let mut node = self.read_node(v)?;
            let sigs = std::mem::take(&mut node.sig);
            self.write_node(v, &node)?;
            sigs
        };
        let children: Vec<usize> = self.topo.children(v).collect();
        if children.is_empty() {
            return Ok(());
        }
        let mut by_child: BTreeMap<usize, Vec<Signal>> = BTreeMap::new();
        for sig in signals {
            by_child
                .entry(self.topo.child_toward(v, sig.key()))
                .or_default()
                .push(sig);
        }
        for (c, sigs) in by_child {
            let leaf = self.topo.is_leaf(c);
            let mut node = self.read_node(c)?;
            for sig in sigs {
                match sig {
                    Signal::Delete { key } => {
                        if let Some(pos) = node.list.iter().position(|e| e.key == key) {
                            node.list.remove(pos);
                        }
                        // Stale copies may live deeper; the delete keeps
                        // going regardless.
                        if !leaf {
                            node.sig.push(sig);
                        }
                    }
                    Signal::Update { key, priority } => {
                        if let Some(pos) = node.list.iter().position(|e| e.key == key) {
                            if priority < node.list[pos].priority {
                                node.list.remove(pos);
                                sorted_insert(&mut node.list, Entry { key, priority });
                            }
                        } else if priority <= node.boundary || leaf {
                            sorted_insert(&mut node.list, Entry { key, priority });
                            if leaf && priority > node.boundary {
                                node.boundary = priority;
                            }
                            if !leaf {
                                node.sig.push(Signal::Delete { key });
                            }
                        } else {
                            node.sig.push(sig);
                        }
                    }
                }
            }
            let list_over = node.list.len() > self.node_cap;
            let list_empty = node.list.is_empty();
            let sig_over = node.sig.len() > self.sig_cap;
            self.write_node(c, &node)?;
            if sig_over {
                self.push_signal(c)?;
            }
            if list_over {
                self.empty_list(c)?;
            } else if list_empty && !leaf {
                self.fill_up(c)?;
            }
        }
        Ok(())
    }

    /// Restores an overflowing list to half capacity by merging the largest
    /// entries into the children.
    fn empty_list(&mut self, v: usize) -> Result<(), PqError> {
        if self.topo.children(v).is_empty() {
            return Ok(());
        }
        self.push_signal(v)?;
        let target = (self.node_cap / 2).max(1);
        let excess: Vec<Entry> = if v == ROOT {
            drain_excess(&mut self.root, target)
        } else {
            let mut node = self.read_node(v)?;
            let excess = drain_excess(&mut node, target);
            self.write_node(v, &node)?;
            excess
        };
        if excess.is_empty() {
            return Ok(());
        }
        let mut by_child: BTreeMap<usize, Vec<Entry>> = BTreeMap::new();
        for e in excess {
            by_child
                .entry(self.topo.child_toward(v, e.key))
                .or_default()
                .push(e);
        }
        for (c, entries) in by_child {
            let mut node = self.read_node(c)?;
            // A fully drained child may hold a stale-low bound; arriving
            // entries lift it so the downward boundary ordering stays true.
            let batch_max = entries[0].priority;
            node.boundary = node.boundary.max(batch_max);
            for e in entries {
                sorted_insert(&mut node.list, e);
            }
            let over = node.list.len() > self.node_cap;
            self.write_node(c, &node)?;
            if over {
                self.empty_list(c)?;
            }
        }
        Ok(())
    }

    /// Refills a drained list with the globally smallest entries of the
    /// children, pulling deeper levels up as children empty. A child whose
    /// list runs dry mid-selection is refilled before anything larger is
    /// taken from its siblings, so deeper minima are never skipped.
    fn fill_up(&mut self, v: usize) -> Result<(), PqError> {
        let children: Vec<usize> = self.topo.children(v).collect();
        if children.is_empty() {
            return Ok(());
        }
        self.push_signal(v)?;
        let target = (self.node_cap / 2).max(1);
        let mut given_up = vec![false; children.len()];
        loop {
            let have = if v == ROOT {
                self.root.list.len()
            } else {
                self.read_node(v)?.list.len()
            };
            if have >= target {
                break;
            }
            // Restore any internal child whose list is empty so every
            // subtree's minimum is visible before selecting.
            let mut restored = false;
            for (i, &c) in children.iter().enumerate() {
                if given_up[i] || self.topo.is_leaf(c) {
                    continue;
                }
                if self.read_node(c)?.list.is_empty() {
                    self.fill_up(c)?;
                    if self.read_node(c)?.list.is_empty() {
                        given_up[i] = true;
                    } else {
                        restored = true;
                    }
                }
            }
            // Load the children lists and take global minima until the
            // target is met or a contributing child runs dry.
            let mut nodes: Vec<BaseNode> = Vec::with_capacity(children.len());
            for &c in &children {
                nodes.push(self.read_node(c)?);
            }
            let mut collected: Vec<Entry> = Vec::new();
            let mut need = target - have;
            let mut stop_for_refill = false;
            while need > 0 && !stop_for_refill {
                let best = (0..children.len())
                    .filter_map(|i| {
                        nodes[i]
                            .list
                            .last()
                            .map(|e| ((e.priority, e.key), i))
                    })
                    .min();
                let Some((_, i)) = best else {
                    break;
                };
                collected.push(nodes[i].list.pop().unwrap());
                need -= 1;
                if nodes[i].list.is_empty() && !self.topo.is_leaf(children[i]) && !given_up[i] {
                    // Its deeper levels may hold smaller entries than the
                    // siblings' current minima.
                    stop_for_refill = true;
                }
            }
            for (i, node) in nodes.iter().enumerate() {
                self.write_node(children[i], node)?;
            }
            if collected.is_empty() && !restored {
                break;
            }
            let raise = collected.last().map(|e| e.priority);
            if v == ROOT {
                for e in collected {
                    sorted_insert(&mut self.root.list, e);
                }
                if let Some(m) = raise {
                    self.root.boundary = self.root.boundary.max(m);
                }
            } else {
                let mut node = self.read_node(v)?;
                for e in collected {
                    sorted_insert(&mut node.list, e);
                }
                if let Some(m) = raise {
                    node.boundary = node.boundary.max(m);
                }
                self.write_node(v, &node)?;
            }
        }
        Ok(())
    }
}

fn drain_excess(node: &mut BaseNode, target: usize) -> Vec<Entry> {
    if node.list.len() <= target {
        return Vec::new();
    }
    let excess: Vec<Entry> = node.list.drain(0..node.list.len() - target).collect();
    if let Some(first) = node.list.first() {
        node.boundary = first.priority;
    }
    excess
}

fn sorted_insert(list: &mut Vec<Entry>, entry: Entry) {
    match list.binary_search_by(|probe| entry_cmp_desc(probe, &entry)) {
        Ok(_) => debug_assert!(false, "duplicate key in baseline node"),
        Err(pos) => list.insert(pos, entry),
    }
}

