//! Per-operation working context.
//!
//! Procedures never touch the block store directly; they load node
//! components through this cache, mutate them in memory, and the context
//! writes back exactly the blocks whose content changed when the public
//! operation finishes (or earlier, at explicit release points that bound the
//! pinned working set).
//!
//! Components load at block granularity: full prefixes for metadata and
//! whole-list work, block-aligned tail windows for appends and for the
//! smallest-priority-first streaming that fill-up does. Every block read
//! pins `B` words of the memory budget until the owning buffer is flushed.
//!
//! I/O attribution: each of the four internal procedures opens a frame;
//! reads count against the frame that issues them, and each buffer's
//! eventual writes count against the frame that last dirtied it. Nested
//! procedure invocations therefore never inherit their caller's traffic,
//! which is what the per-invocation cost assertions measure.

use std::collections::HashMap;

use crate::emx::{BlockId, PinToken, Word};
use crate::filter::Filter;

use super::node::{decode_signal, encode_signal, META_HEADER_WORDS};
use super::{Entry, NodeId, PqError, ProcKind, Signal, TreeEvent, XpqQueue, ROOT};

const NO_FRAME: usize = usize::MAX;

/// Copyable two-word item: list entries and buffer signals.
pub(crate) trait PairItem: Copy {
    fn enc(self) -> (Word, Word);
    fn dec(a: Word, b: Word) -> Self;
}

impl PairItem for Entry {
    fn enc(self) -> (Word, Word) {
        debug_assert!(super::node::entry_encodable(&self));
        (self.key, self.priority)
    }
    fn dec(a: Word, b: Word) -> Self {
        Entry {
            key: a,
            priority: b,
        }
    }
}

impl PairItem for Signal {
    fn enc(self) -> (Word, Word) {
        encode_signal(self)
    }
    fn dec(a: Word, b: Word) -> Self {
        decode_signal(a, b)
    }
}

#[derive(Debug, Default)]
struct BufCommon {
    /// Raw block contents as first loaded, keyed by block index within the
    /// region. Flush compares against these and skips unchanged blocks.
    pristine: HashMap<usize, Vec<Word>>,
    pins: Vec<PinToken>,
    dirty: bool,
    dirtier: usize,
}

struct MetaBuf {
    boundary: u64,
    list_len: usize,
    sig_len: usize,
    todo: Vec<Signal>,
    common: BufCommon,
}

/// Tail window over a two-word-item array: covers items `first..len` where
/// `2 * first` is block-aligned. Supports backward extension (loading
/// earlier blocks), tail pops, and tail pushes.
struct PairBuf<T: PairItem> {
    first: usize,
    items: Vec<T>,
    common: BufCommon,
}

impl<T: PairItem> PairBuf<T> {
    fn len(&self) -> usize {
        self.first + self.items.len()
    }
}

struct FilterBuf {
    filter: Filter,
    /// Built in memory (rebuild or unformatted region): nothing was read,
    /// so flush writes the whole occupied prefix.
    fresh: bool,
    common: BufCommon,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct FrameRec {
    pub kind: ProcKind,
    pub reads: u64,
    pub writes: u64,
}

/// Mutable borrow bundle over the queue for one public operation.
pub(crate) struct Ctx<'a> {
    pub q: &'a mut XpqQueue,
    metas: HashMap<NodeId, MetaBuf>,
    sigs: HashMap<NodeId, PairBuf<Signal>>,
    lists: HashMap<NodeId, PairBuf<Entry>>,
    filters: HashMap<NodeId, FilterBuf>,
    frames: Vec<FrameRec>,
    stack: Vec<usize>,
}

impl<'a> Ctx<'a> {
    pub fn new(q: &'a mut XpqQueue) -> Self {
        Ctx {
            q,
            metas: HashMap::new(),
            sigs: HashMap::new(),
            lists: HashMap::new(),
            filters: HashMap::new(),
            frames: Vec::new(),
            stack: Vec::new(),
        }
    }

    // ---- shared knobs -------------------------------------------------

    pub fn b(&self) -> usize {
        self.q.layout.b
    }

    pub fn fanout(&self) -> usize {
        self.q.cfg.t
    }

    pub fn list_limit(&self) -> usize {
        self.q.layout.list_limit
    }

    pub fn sig_limit(&self) -> usize {
        self.q.layout.sig_limit
    }

    pub fn todo_limit(&self) -> usize {
        self.q.layout.todo_limit
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        self.q.topo.is_leaf(node)
    }

    pub fn children(&self, node: NodeId) -> std::ops::Range<NodeId> {
        self.q.topo.children(node)
    }

    pub fn child_toward(&self, node: NodeId, key: u64) -> NodeId {
        self.q.topo.child_toward(node, key)
    }

    pub fn emit(&mut self, event: TreeEvent) {
        if let Some(observer) = self.q.observer.as_mut() {
            observer(event);
        }
    }

    pub fn sabotage_skip_delete_forward(&self) -> bool {
        self.q.sabotage_skip_delete_forward
    }

    // ---- frames --------------------------------------------------------

    pub fn begin_proc(&mut self, kind: ProcKind) {
        self.frames.push(FrameRec {
            kind,
            reads: 0,
            writes: 0,
        });
        self.stack.push(self.frames.len() - 1);
    }

    pub fn end_proc(&mut self) {
        self.stack.pop();
    }

    fn current_frame(&self) -> usize {
        *self.stack.last().unwrap_or(&NO_FRAME)
    }

    fn charge_write_to(frames: &mut [FrameRec], frame: usize, blocks: u64) {
        if frame != NO_FRAME {
            frames[frame].writes += blocks;
        }
    }

    // ---- raw block helpers ----------------------------------------------

    /// Reads region blocks `range` (skipping ones already pristine), pinning
    /// each newly loaded block.
    fn load_blocks(
        store: &mut crate::emx::BlockStore,
        frames: &mut [FrameRec],
        stack: &[usize],
        common: &mut BufCommon,
        region: &[BlockId],
        range: std::ops::Range<usize>,
    ) -> Result<(), PqError> {
        let b = store.block_words();
        for idx in range {
            if common.pristine.contains_key(&idx) {
                continue;
            }
            let data = store.read_block(region[idx])?.to_vec();
            if let Some(&frame) = stack.last() {
                frames[frame].reads += 1;
            }
            common.pins.push(store.pin(b)?);
            common.pristine.insert(idx, data);
        }
        Ok(())
    }

    fn pristine_words(common: &BufCommon, range: std::ops::Range<usize>, b: usize) -> Vec<Word> {
        let mut out = Vec::with_capacity(range.len() * b);
        for idx in range {
            out.extend_from_slice(&common.pristine[&idx]);
        }
        out
    }

    // ---- meta ----------------------------------------------------------

    fn meta_loaded(&mut self, node: NodeId) -> Result<&mut MetaBuf, PqError> {
        debug_assert_ne!(node, ROOT, "the root has no disk meta");
        if !self.metas.contains_key(&node) {
            let b = self.b();
            let region = &self.q.layout.regions(node).meta;
            let mut common = BufCommon::default();
            // Header first; it tells us how much todo tail to fetch.
            let header_blocks = META_HEADER_WORDS.div_ceil(b);
            Self::load_blocks(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                &mut common,
                region,
                0..header_blocks,
            )?;
            let header = Self::pristine_words(&common, 0..header_blocks, b);
            let boundary = !header[0];
            let list_len = header[1] as usize;
            let sig_len = header[2] as usize;
            let todo_len = header[3] as usize;
            let occupied = META_HEADER_WORDS + 2 * todo_len;
            let blocks = occupied.div_ceil(b);
            Self::load_blocks(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                &mut common,
                region,
                header_blocks..blocks,
            )?;
            let words = Self::pristine_words(&common, 0..blocks, b);
            let todo = words[META_HEADER_WORDS..occupied]
                .chunks_exact(2)
                .map(|p| Signal::dec(p[0], p[1]))
                .collect();
            self.metas.insert(
                node,
                MetaBuf {
                    boundary,
                    list_len,
                    sig_len,
                    todo,
                    common,
                },
            );
        }
        Ok(self.metas.get_mut(&node).unwrap())
    }

    pub fn boundary(&mut self, node: NodeId) -> Result<u64, PqError> {
        if node == ROOT {
            return Ok(self.q.root.boundary);
        }
        Ok(self.meta_loaded(node)?.boundary)
    }

    pub fn set_boundary(&mut self, node: NodeId, value: u64) -> Result<(), PqError> {
        if node == ROOT {
            self.q.root.boundary = value;
            return Ok(());
        }
        let frame = self.current_frame();
        let meta = self.meta_loaded(node)?;
        meta.boundary = value;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(())
    }

    pub fn list_len(&mut self, node: NodeId) -> Result<usize, PqError> {
        if node == ROOT {
            return Ok(self.q.root.list.len());
        }
        Ok(self.meta_loaded(node)?.list_len)
    }

    pub fn sig_len(&mut self, node: NodeId) -> Result<usize, PqError> {
        if node == ROOT {
            return Ok(self.q.root.sig.len());
        }
        Ok(self.meta_loaded(node)?.sig_len)
    }

    pub fn todo_len(&mut self, node: NodeId) -> Result<usize, PqError> {
        if node == ROOT {
            return Ok(0);
        }
        Ok(self.meta_loaded(node)?.todo.len())
    }

    /// Runs `f` over the node's todo buffer; treats it as mutated.
    pub fn with_todo<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut Vec<Signal>) -> R,
    ) -> Result<R, PqError> {
        debug_assert_ne!(node, ROOT, "the root has no todo buffer");
        let frame = self.current_frame();
        let meta = self.meta_loaded(node)?;
        let out = f(&mut meta.todo);
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        if meta.todo.iter().any(|s| s.is_update()) {
            self.q.live_hint[node] = true;
        }
        Ok(out)
    }

    pub fn todo_has_update(&mut self, node: NodeId, key: u64) -> Result<bool, PqError> {
        if node == ROOT {
            return Ok(false);
        }
        Ok(self
            .meta_loaded(node)?
            .todo
            .iter()
            .any(|s| s.is_update() && s.key() == key))
    }

    pub fn todo_has_delete(&mut self, node: NodeId, key: u64) -> Result<bool, PqError> {
        if node == ROOT {
            return Ok(false);
        }
        Ok(self
            .meta_loaded(node)?
            .todo
            .iter()
            .any(|s| !s.is_update() && s.key() == key))
    }

    pub fn todo_has_any_update(&mut self, node: NodeId) -> Result<bool, PqError> {
        if node == ROOT {
            return Ok(false);
        }
        Ok(self.meta_loaded(node)?.todo.iter().any(|s| s.is_update()))
    }

    /// Smallest `(priority, key)` among the node's todo updates.
    pub fn todo_min_update(&mut self, node: NodeId) -> Result<Option<(u64, u64)>, PqError> {
        if node == ROOT {
            return Ok(None);
        }
        Ok(self
            .meta_loaded(node)?
            .todo
            .iter()
            .filter_map(|s| match *s {
                Signal::Update { key, priority } => Some((priority, key)),
                _ => None,
            })
            .min())
    }

    // ---- subtree liveness hints -----------------------------------------

    /// May `node`'s subtree hold any entry or pending update? False is a
    /// guarantee of emptiness; true is conservative.
    pub fn hint_live(&self, node: NodeId) -> bool {
        self.q.live_hint.get(node).copied().unwrap_or(true)
    }

    pub fn set_hint(&mut self, node: NodeId, live: bool) {
        if node != ROOT {
            self.q.live_hint[node] = live;
        }
    }

    // ---- pair windows (signal buffers and lists) ------------------------

    fn window_load<T: PairItem>(
        store: &mut crate::emx::BlockStore,
        frames: &mut [FrameRec],
        stack: &[usize],
        region: &[BlockId],
        len: usize,
        from_item: usize,
    ) -> Result<PairBuf<T>, PqError> {
        let b = store.block_words();
        let first_block = (2 * from_item) / b;
        let first = first_block * b / 2;
        let end_block = (2 * len).div_ceil(b);
        let mut common = BufCommon::default();
        Self::load_blocks(store, frames, stack, &mut common, region, first_block..end_block)?;
        let words = Self::pristine_words(&common, first_block..end_block, b);
        let skip = 2 * first - first_block * b;
        let take = 2 * (len - first);
        let items = words[skip..skip + take]
            .chunks_exact(2)
            .map(|p| T::dec(p[0], p[1]))
            .collect();
        Ok(PairBuf {
            first,
            items,
            common,
        })
    }

    fn window_extend<T: PairItem>(
        store: &mut crate::emx::BlockStore,
        frames: &mut [FrameRec],
        stack: &[usize],
        region: &[BlockId],
        buf: &mut PairBuf<T>,
        to_item: usize,
    ) -> Result<(), PqError> {
        if to_item >= buf.first {
            return Ok(());
        }
        let b = store.block_words();
        let new_first_block = (2 * to_item) / b;
        let old_first_block = (2 * buf.first) / b;
        Self::load_blocks(
            store,
            frames,
            stack,
            &mut buf.common,
            region,
            new_first_block..old_first_block,
        )?;
        let words = Self::pristine_words(&buf.common, new_first_block..old_first_block, b);
        let new_first = new_first_block * b / 2;
        let mut prefix: Vec<T> = words
            .chunks_exact(2)
            .map(|p| T::dec(p[0], p[1]))
            .collect();
        debug_assert_eq!(prefix.len(), buf.first - new_first);
        prefix.append(&mut buf.items);
        buf.items = prefix;
        buf.first = new_first;
        Ok(())
    }

    /// Keeps the windowed buffer's pin count in step with the blocks its
    /// in-memory span covers (appends may grow past what was loaded).
    fn window_repin<T: PairItem>(
        store: &mut crate::emx::BlockStore,
        buf: &mut PairBuf<T>,
    ) -> Result<(), PqError> {
        let b = store.block_words();
        let first_block = (2 * buf.first) / b;
        let end_block = (2 * buf.len()).div_ceil(b);
        let span = end_block.saturating_sub(first_block);
        while buf.common.pins.len() < span {
            buf.common.pins.push(store.pin(b)?);
        }
        Ok(())
    }

    // ---- signal buffers ------------------------------------------------

    /// Takes every signal out of `node`'s signal buffer, leaving it empty.
    pub fn take_sig(&mut self, node: NodeId) -> Result<Vec<Signal>, PqError> {
        if node == ROOT {
            return Ok(std::mem::take(&mut self.q.root.sig));
        }
        let frame = self.current_frame();
        let sig_len = self.meta_loaded(node)?.sig_len;
        if !self.sigs.contains_key(&node) {
            let region = &self.q.layout.regions(node).sig;
            let buf = Self::window_load::<Signal>(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                region,
                sig_len,
                0,
            )?;
            self.sigs.insert(node, buf);
        }
        let buf = self.sigs.get_mut(&node).unwrap();
        Self::window_extend(
            &mut self.q.store,
            &mut self.frames,
            &self.stack,
            &self.q.layout.regions(node).sig,
            buf,
            0,
        )?;
        let out = std::mem::take(&mut buf.items);
        buf.first = 0;
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        let meta = self.meta_loaded(node)?;
        meta.sig_len = 0;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(out)
    }

    /// Appends one signal; returns the new buffer length.
    pub fn sig_append(&mut self, node: NodeId, signal: Signal) -> Result<usize, PqError> {
        if node == ROOT {
            self.q.root.sig.push(signal);
            return Ok(self.q.root.sig.len());
        }
        let frame = self.current_frame();
        let sig_len = self.meta_loaded(node)?.sig_len;
        if !self.sigs.contains_key(&node) {
            let region = &self.q.layout.regions(node).sig;
            let buf = Self::window_load::<Signal>(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                region,
                sig_len,
                sig_len,
            )?;
            self.sigs.insert(node, buf);
        }
        let buf = self.sigs.get_mut(&node).unwrap();
        buf.items.push(signal);
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        let new_len = buf.len();
        Self::window_repin(&mut self.q.store, buf)?;
        if signal.is_update() {
            self.q.live_hint[node] = true;
        }
        let meta = self.meta_loaded(node)?;
        meta.sig_len = new_len;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(new_len)
    }

    // ---- lists -----------------------------------------------------------

    fn list_loaded(&mut self, node: NodeId, from_item: usize) -> Result<(), PqError> {
        let list_len = self.meta_loaded(node)?.list_len;
        if !self.lists.contains_key(&node) {
            let region = &self.q.layout.regions(node).list;
            let buf = Self::window_load::<Entry>(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                region,
                list_len,
                from_item.min(list_len),
            )?;
            self.lists.insert(node, buf);
        }
        if from_item < self.lists[&node].first {
            let buf = self.lists.get_mut(&node).unwrap();
            Self::window_extend(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                &self.q.layout.regions(node).list,
                buf,
                from_item,
            )?;
        }
        Ok(())
    }

    /// Runs `f` on the full list; treats it as mutated and syncs the length.
    pub fn with_list_full<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut Vec<Entry>) -> R,
    ) -> Result<R, PqError> {
        if node == ROOT {
            return Ok(f(&mut self.q.root.list));
        }
        let frame = self.current_frame();
        self.list_loaded(node, 0)?;
        let buf = self.lists.get_mut(&node).unwrap();
        let out = f(&mut buf.items);
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        let new_len = buf.len();
        Self::window_repin(&mut self.q.store, buf)?;
        if new_len > 0 {
            self.q.live_hint[node] = true;
        }
        let meta = self.meta_loaded(node)?;
        meta.list_len = new_len;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(out)
    }

    /// Appends entries at the list tail without loading the rest of the
    /// list. Returns the new length.
    pub fn list_append(&mut self, node: NodeId, entries: &[Entry]) -> Result<usize, PqError> {
        if node == ROOT {
            self.q.root.list.extend_from_slice(entries);
            return Ok(self.q.root.list.len());
        }
        let frame = self.current_frame();
        let list_len = self.meta_loaded(node)?.list_len;
        if !self.lists.contains_key(&node) {
            let region = &self.q.layout.regions(node).list;
            let buf = Self::window_load::<Entry>(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                region,
                list_len,
                list_len,
            )?;
            self.lists.insert(node, buf);
        }
        let buf = self.lists.get_mut(&node).unwrap();
        buf.items.extend_from_slice(entries);
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        let new_len = buf.len();
        Self::window_repin(&mut self.q.store, buf)?;
        if new_len > 0 {
            self.q.live_hint[node] = true;
        }
        let meta = self.meta_loaded(node)?;
        meta.list_len = new_len;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(new_len)
    }

    /// Last (lexicographically smallest) entry, widening the tail window by
    /// about `B` entries per refill, streaming-style.
    pub fn list_peek_tail(&mut self, node: NodeId) -> Result<Option<Entry>, PqError> {
        if node == ROOT {
            return Ok(self.q.root.list.last().copied());
        }
        let list_len = self.meta_loaded(node)?.list_len;
        if list_len == 0 {
            return Ok(None);
        }
        let chunk = self.b().max(2);
        self.list_loaded(node, list_len.saturating_sub(1))?;
        if self.lists[&node].items.is_empty() {
            let target = self.lists[&node].first.saturating_sub(chunk);
            self.list_loaded(node, target)?;
        }
        Ok(self.lists[&node].items.last().copied())
    }

    /// Consumes the tail entry. Shrinks the list; costs no write by itself
    /// (surviving entries keep their disk positions).
    pub fn list_pop_tail(&mut self, node: NodeId) -> Result<Option<Entry>, PqError> {
        if node == ROOT {
            return Ok(self.q.root.list.pop());
        }
        let out = self.list_peek_tail(node)?;
        if out.is_none() {
            return Ok(None);
        }
        let frame = self.current_frame();
        let buf = self.lists.get_mut(&node).unwrap();
        buf.items.pop();
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        let new_len = buf.len();
        let meta = self.meta_loaded(node)?;
        meta.list_len = new_len;
        meta.common.dirty = true;
        meta.common.dirtier = frame;
        Ok(out)
    }

    // ---- filters ---------------------------------------------------------

    fn filter_loaded(&mut self, node: NodeId) -> Result<(), PqError> {
        debug_assert_ne!(node, ROOT);
        if self.filters.contains_key(&node) {
            return Ok(());
        }
        let b = self.b();
        let region = &self.q.layout.regions(node).filter;
        let mut common = BufCommon::default();
        // Enough blocks to see the header, then the occupied prefix.
        let header_blocks = 5usize.div_ceil(b).min(region.len());
        Self::load_blocks(
            &mut self.q.store,
            &mut self.frames,
            &self.stack,
            &mut common,
            region,
            0..header_blocks,
        )?;
        let header = Self::pristine_words(&common, 0..header_blocks, b);
        let (filter, fresh) = if header[0] == 0 {
            // Unformatted region: still the fresh empty filter.
            let mut filter = Filter::new(self.q.layout.filter_params(node, 0))?;
            if self.q.verify_hooks {
                filter.enable_shadow();
            }
            (filter, true)
        } else {
            let occupied = Filter::occupied_words_from_header(&header[..5]);
            let blocks = occupied.div_ceil(b);
            Self::load_blocks(
                &mut self.q.store,
                &mut self.frames,
                &self.stack,
                &mut common,
                region,
                header_blocks..blocks,
            )?;
            let words = Self::pristine_words(&common, 0..blocks, b);
            let mut filter = Filter::from_words(&words)?;
            if self.q.verify_hooks {
                let shadow = self.q.shadow_bank.remove(&node).unwrap_or_default();
                filter.set_shadow(Some(shadow));
            }
            (filter, false)
        };
        // The whole region stays resident while in use.
        let region_blocks = self.q.layout.filter_region.div_ceil(b);
        while common.pins.len() < region_blocks {
            common.pins.push(self.q.store.pin(b)?);
        }
        self.filters.insert(
            node,
            FilterBuf {
                filter,
                fresh,
                common,
            },
        );
        Ok(())
    }

    /// Runs `f` on the node's filter; treats it as mutated.
    pub fn with_filter<R>(
        &mut self,
        node: NodeId,
        f: impl FnOnce(&mut Filter) -> R,
    ) -> Result<R, PqError> {
        if node == ROOT {
            return Ok(f(&mut self.q.root.filter));
        }
        let frame = self.current_frame();
        self.filter_loaded(node)?;
        let buf = self.filters.get_mut(&node).unwrap();
        let out = f(&mut buf.filter);
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        Ok(out)
    }

    /// Read-only filter probe with the verification hooks applied: counts
    /// the query, optionally injects a forced positive, and classifies
    /// false positives against the shadow. Returns `(answer, was_fp)`.
    pub fn filter_query_hooked(&mut self, node: NodeId, key: u64) -> Result<(bool, bool), PqError> {
        self.q.filter_query_count += 1;
        let injected = self
            .q
            .fp_inject_every
            .is_some_and(|n| self.q.filter_query_count.is_multiple_of(n));
        let (raw, truth) = if node == ROOT {
            (
                self.q.root.filter.query(key),
                self.q.root.filter.shadow_contains(key),
            )
        } else {
            self.filter_loaded(node)?;
            let buf = &self.filters[&node];
            (buf.filter.query(key), buf.filter.shadow_contains(key))
        };
        let answer = raw || injected;
        let was_fp = answer && truth == Some(false);
        if was_fp {
            self.emit(TreeEvent::FilterFalsePositive { node, key });
        }
        Ok((answer, was_fp))
    }

    /// Replaces the node's filter with a fresh build over `keys`,
    /// re-randomizing the seed deterministically.
    pub fn rebuild_filter(
        &mut self,
        node: NodeId,
        keys: impl Iterator<Item = u64>,
    ) -> Result<(), PqError> {
        let frame = self.current_frame();
        self.q.rebuild_counter += 1;
        let params = self
            .q
            .layout
            .filter_params(node, self.q.rebuild_counter);
        let filter = Filter::rebuild(params, keys, self.q.verify_hooks)?;
        if node == ROOT {
            self.q.root.filter = filter;
            return Ok(());
        }
        // Reuse pins/pristine when the old filter was already cached.
        self.filter_loaded(node)?;
        let buf = self.filters.get_mut(&node).unwrap();
        buf.filter = filter;
        buf.fresh = true;
        buf.common.dirty = true;
        buf.common.dirtier = frame;
        Ok(())
    }

    // ---- flush -----------------------------------------------------------

    fn flush_words(
        store: &mut crate::emx::BlockStore,
        frames: &mut [FrameRec],
        region: &[BlockId],
        common: &mut BufCommon,
        start_block: usize,
        words: &[Word],
    ) -> Result<(), PqError> {
        let b = store.block_words();
        let blocks = words.len().div_ceil(b);
        for i in 0..blocks {
            let idx = start_block + i;
            let mut content = vec![0u64; b];
            let lo = i * b;
            let hi = ((i + 1) * b).min(words.len());
            content[..hi - lo].copy_from_slice(&words[lo..hi]);
            if hi - lo < b {
                // Preserve stale tail words where we know them.
                if let Some(pristine) = common.pristine.get(&idx) {
                    content[hi - lo..].copy_from_slice(&pristine[hi - lo..]);
                }
            }
            if common.pristine.get(&idx).map(|p| p == &content) == Some(true) {
                continue;
            }
            store.write_block(region[idx], &content)?;
            Self::charge_write_to(frames, common.dirtier, 1);
            common.pristine.insert(idx, content);
        }
        Ok(())
    }

    fn flush_pair<T: PairItem>(
        store: &mut crate::emx::BlockStore,
        frames: &mut [FrameRec],
        region: &[BlockId],
        buf: &mut PairBuf<T>,
    ) -> Result<(), PqError> {
        if !buf.common.dirty {
            return Ok(());
        }
        let b = store.block_words();
        let start_block = (2 * buf.first) / b;
        let mut words = Vec::with_capacity(2 * buf.items.len());
        for item in &buf.items {
            let (a, z) = item.enc();
            words.push(a);
            words.push(z);
        }
        Self::flush_words(store, frames, region, &mut buf.common, start_block, &words)
    }

    fn flush_node_bufs(&mut self, node: NodeId) -> Result<(), PqError> {
        if let Some(mut buf) = self.sigs.remove(&node) {
            Self::flush_pair(
                &mut self.q.store,
                &mut self.frames,
                &self.q.layout.regions(node).sig,
                &mut buf,
            )?;
            for pin in buf.common.pins.drain(..) {
                self.q.store.unpin(pin);
            }
        }
        if let Some(mut buf) = self.lists.remove(&node) {
            Self::flush_pair(
                &mut self.q.store,
                &mut self.frames,
                &self.q.layout.regions(node).list,
                &mut buf,
            )?;
            for pin in buf.common.pins.drain(..) {
                self.q.store.unpin(pin);
            }
        }
        if let Some(mut buf) = self.filters.remove(&node) {
            if buf.common.dirty {
                if self.q.verify_hooks {
                    let shadow = buf.filter.take_shadow().unwrap_or_default();
                    self.q.shadow_bank.insert(node, shadow);
                }
                let words = buf.filter.to_words();
                if buf.fresh {
                    // Nothing was read; drop stale pristine knowledge so the
                    // whole occupied prefix is written.
                    buf.common.pristine.clear();
                }
                Self::flush_words(
                    &mut self.q.store,
                    &mut self.frames,
                    &self.q.layout.regions(node).filter,
                    &mut buf.common,
                    0,
                    &words,
                )?;
            } else if self.q.verify_hooks {
                let shadow = buf.filter.take_shadow().unwrap_or_default();
                self.q.shadow_bank.insert(node, shadow);
            }
            for pin in buf.common.pins.drain(..) {
                self.q.store.unpin(pin);
            }
        }
        if let Some(mut buf) = self.metas.remove(&node) {
            if buf.common.dirty {
                let mut words = Vec::with_capacity(META_HEADER_WORDS + 2 * buf.todo.len());
                words.push(!buf.boundary);
                words.push(buf.list_len as u64);
                words.push(buf.sig_len as u64);
                words.push(buf.todo.len() as u64);
                for sig in &buf.todo {
                    let (a, z) = sig.enc();
                    words.push(a);
                    words.push(z);
                }
                Self::flush_words(
                    &mut self.q.store,
                    &mut self.frames,
                    &self.q.layout.regions(node).meta,
                    &mut buf.common,
                    0,
                    &words,
                )?;
            }
            for pin in buf.common.pins.drain(..) {
                self.q.store.unpin(pin);
            }
        }
        Ok(())
    }

    /// Writes back and unpins everything cached for `node`. Procedures call
    /// this as soon as they are done with a child to bound the working set.
    pub fn release_node(&mut self, node: NodeId) -> Result<(), PqError> {
        if node == ROOT {
            return Ok(());
        }
        self.flush_node_bufs(node)
    }

    /// Flushes every cached buffer and folds the frame records into the
    /// queue's per-procedure statistics.
    pub fn finish(mut self) -> Result<(), PqError> {
        debug_assert!(self.stack.is_empty(), "unbalanced procedure frames");
        let nodes: Vec<NodeId> = self
            .metas
            .keys()
            .chain(self.sigs.keys())
            .chain(self.lists.keys())
            .chain(self.filters.keys())
            .copied()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        for node in nodes {
            self.flush_node_bufs(node)?;
        }
        for rec in &self.frames {
            let stats = self
                .q
                .proc_stats
                .entry(rec.kind)
                .or_default();
            let transfers = rec.reads + rec.writes;
            stats.invocations += 1;
            stats.total_transfers += transfers;
            stats.max_transfers = stats.max_transfers.max(transfers);
        }
        Ok(())
    }
}
