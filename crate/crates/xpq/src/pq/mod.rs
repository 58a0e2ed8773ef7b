//! The external-memory priority queue.
//!
//! A static t-ary tree over the key universe `1..=N`. Each node carries:
//!
//! - a **list** of up to `2tB` entries with distinct keys, sorted by
//!   descending priority (ties by descending key, so the lexicographically
//!   smallest `(priority, key)` pair sits at the tail);
//! - a **signal buffer** (internal nodes, up to `tB` signals) holding
//!   deferred delete/update instructions on their way down;
//! - a **todo buffer** (non-root nodes, up to `B` signals) holding
//!   instructions destined for this node's own list;
//! - a **membership filter** summarizing the list keys so routing decisions
//!   never read child lists;
//! - a **boundary value** upper-bounding the priorities this node's list may
//!   hold; boundaries never decrease toward the leaves.
//!
//! The root lives in memory; every other node is serialized to blocks and
//! accessed only through the block store, so the I/O counters measure the
//! structure honestly. Updates and deletes cost no I/O themselves; all disk
//! traffic happens in the four internal procedures (push-signal, apply-todo,
//! empty-list, fill-up), each of which is instrumented per invocation.

mod ctx;
mod node;
mod ops;

use std::collections::HashMap;

use thiserror::Error;

use crate::emx::{BlockStore, BudgetPolicy, EmxError, IoStats, ModelParams, Word};
use crate::filter::{Filter, FilterError};
use crate::oracle::{NodeSnapshot, TreeSnapshot};
use crate::trace::TraceOp;

pub(crate) use ctx::Ctx;
pub(crate) use node::NodeLayout;

/// Priority value used as the "no entry" sentinel. Stored priorities must be
/// strictly below it.
pub const INF: u64 = u64::MAX;

/// A (key, priority) pair, the unit stored in node lists.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Entry {
    pub key: u64,
    pub priority: u64,
}

/// A deferred instruction travelling through signal and todo buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Signal {
    Delete { key: u64 },
    Update { key: u64, priority: u64 },
}

impl Signal {
    pub fn key(&self) -> u64 {
        match *self {
            Signal::Delete { key } | Signal::Update { key, .. } => key,
        }
    }

    pub fn is_update(&self) -> bool {
        matches!(self, Signal::Update { .. })
    }
}

/// Entries sort by descending `(priority, key)`; the list tail is the
/// minimum. Ascending-key tie preference on extraction falls out of this.
pub fn entry_cmp_desc(a: &Entry, b: &Entry) -> std::cmp::Ordering {
    (b.priority, b.key).cmp(&(a.priority, a.key))
}

/// Key-in-priority composition.
///
/// Priority ties are resolved by ascending key *globally*, but the tree can
/// only ever extract its root list's minimum, and ties may straddle levels
/// (an equal-priority entry can sit below the root while another arrives on
/// top). Storing `priority << key_bits | (key-1)` makes every stored
/// priority distinct and totally ordered exactly by `(priority, key)`, so
/// the uniform tie rule holds end to end. The caller-facing priority range
/// shrinks accordingly and is validated at the API.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorityCodec {
    key_bits: u32,
}

impl PriorityCodec {
    pub fn for_universe(n: u64) -> Self {
        let key_bits = 64 - (n.max(2) - 1).leading_zeros();
        PriorityCodec { key_bits }
    }

    /// Largest caller priority that still composes below the sentinel.
    pub fn max_priority(&self) -> u64 {
        (1u64 << (64 - self.key_bits)) - 2
    }

    pub fn compose(&self, key: u64, priority: u64) -> u64 {
        debug_assert!(priority <= self.max_priority());
        (priority << self.key_bits) | (key - 1)
    }

    /// Recovers the caller priority; the sentinel maps to itself.
    pub fn raw(&self, composed: u64) -> u64 {
        if composed == INF {
            INF
        } else {
            composed >> self.key_bits
        }
    }
}

/// Two-word signal codec, shared with other backends on the same model:
/// the key word carries the update tag in its spare top bit.
pub fn encode_signal_words(sig: Signal) -> (Word, Word) {
    node::encode_signal(sig)
}

pub fn decode_signal_words(a: Word, b: Word) -> Signal {
    node::decode_signal(a, b)
}

#[derive(Debug, Error)]
pub enum PqError {
    #[error("key {key} outside universe 1..={n}")]
    KeyOutOfRange { key: u64, n: u64 },
    #[error("priority {0} collides with the +inf sentinel")]
    InvalidPriority(u64),
    #[error(transparent)]
    Model(#[from] EmxError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("internal invariant broken: {0}")]
    Internal(&'static str),
}

/// Identifies a tree node; the root is id 0 and ids are level-ordered.
pub type NodeId = usize;
pub const ROOT: NodeId = 0;

/// Shape of the static t-ary tree: level sizes, child ranges, and the
/// key-to-leaf mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    t: usize,
    /// Keys per leaf (`t * B`).
    leaf_span: u64,
    /// Nodes per level, root first.
    level_counts: Vec<usize>,
    /// Prefix sums of `level_counts`.
    level_offsets: Vec<usize>,
}

impl Topology {
    pub fn new(n: u64, t: usize, leaf_span: u64) -> Self {
        assert!(t >= 2 && leaf_span >= 1 && n >= 1);
        let leaves = n.div_ceil(leaf_span) as usize;
        let mut counts = vec![leaves];
        while *counts.last().unwrap() > 1 {
            counts.push(counts.last().unwrap().div_ceil(t));
        }
        counts.reverse();
        let mut offsets = Vec::with_capacity(counts.len() + 1);
        let mut total = 0;
        for &c in &counts {
            offsets.push(total);
            total += c;
        }
        offsets.push(total);
        Topology {
            t,
            leaf_span,
            level_counts: counts,
            level_offsets: offsets,
        }
    }

    pub fn fanout(&self) -> usize {
        self.t
    }

    /// Edges from root to leaf.
    pub fn height(&self) -> usize {
        self.level_counts.len() - 1
    }

    pub fn node_count(&self) -> usize {
        *self.level_offsets.last().unwrap()
    }

    pub fn leaf_count(&self) -> usize {
        *self.level_counts.last().unwrap()
    }

    pub fn level(&self, id: NodeId) -> usize {
        debug_assert!(id < self.node_count());
        self.level_offsets.partition_point(|&off| off <= id) - 1
    }

    pub fn index_in_level(&self, id: NodeId) -> usize {
        id - self.level_offsets[self.level(id)]
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.level(id) == self.height()
    }

    pub fn is_root(&self, id: NodeId) -> bool {
        id == ROOT
    }

    pub fn children(&self, id: NodeId) -> std::ops::Range<NodeId> {
        let level = self.level(id);
        if level == self.height() {
            return 0..0;
        }
        let idx = id - self.level_offsets[level];
        let below = self.level_counts[level + 1];
        let start = (idx * self.t).min(below);
        let end = ((idx + 1) * self.t).min(below);
        let base = self.level_offsets[level + 1];
        base + start..base + end
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        if id == ROOT {
            return None;
        }
        let level = self.level(id);
        let idx = id - self.level_offsets[level];
        Some(self.level_offsets[level - 1] + idx / self.t)
    }

    /// Zero-based leaf index a key maps to.
    pub fn leaf_index(&self, key: u64) -> usize {
        ((key - 1) / self.leaf_span) as usize
    }

    pub fn leaf_node(&self, key: u64) -> NodeId {
        self.level_offsets[self.height()] + self.leaf_index(key)
    }

    /// The child of `id` on the path toward `key`'s leaf.
    pub fn child_toward(&self, id: NodeId, key: u64) -> NodeId {
        let level = self.level(id);
        debug_assert!(level < self.height());
        let leaf_idx = self.leaf_index(key);
        let child_idx = leaf_idx / self.t.pow((self.height() - level - 1) as u32);
        self.level_offsets[level + 1] + child_idx
    }

    /// Node ids from `key`'s leaf up to the root, inclusive.
    pub fn path_from_leaf(&self, key: u64) -> Vec<NodeId> {
        let mut path = vec![self.leaf_node(key)];
        while let Some(parent) = self.parent(*path.last().unwrap()) {
            path.push(parent);
        }
        path
    }

    pub fn node_name(&self, id: NodeId) -> String {
        format!("L{}.{}", self.level(id), self.index_in_level(id))
    }
}

/// Construction-time knobs; anything left `None` uses the defaults derived
/// from `N`.
#[derive(Debug, Clone, Default)]
pub struct TreeTuning {
    /// Fanout override; default `max(2, floor((log2 N)^0.01))`.
    pub t: Option<usize>,
    /// Filter false-positive target; default `1 / (log2 N)^3`.
    pub epsilon: Option<f64>,
    /// Seed for filter hashing; fixed seed means bit-exact replay.
    pub seed: u64,
    /// Enables exact shadow multisets on all filters plus event emission,
    /// for the verification harness.
    pub verify_hooks: bool,
    /// Force every n-th filter query to answer positively (a synthetic
    /// false positive). Requires `verify_hooks`.
    pub fp_inject_every: Option<u64>,
    /// Test-only fault: drop the delete-forwarding step during signal
    /// pushdown. Exists so the differential harness can prove it detects a
    /// corrupted backend.
    #[doc(hidden)]
    pub sabotage_skip_delete_forward: bool,
}

/// Default fanout `max(2, floor((log2 N)^0.01))`.
pub fn default_fanout(n: u64) -> usize {
    let log2n = (n.max(2) as f64).log2();
    (log2n.powf(0.01).floor() as usize).max(2)
}

/// Default filter false-positive target `1 / (log2 N)^3`.
pub fn default_epsilon(n: u64) -> f64 {
    let log2n = (n.max(2) as f64).log2();
    (1.0 / log2n.powi(3)).clamp(f64::MIN_POSITIVE, 0.5)
}

/// Resolved tree configuration.
#[derive(Debug, Clone)]
pub struct TreeConfig {
    pub params: ModelParams,
    pub t: usize,
    pub epsilon: f64,
    pub seed: u64,
    /// Derived height `ceil(log_t(N / (tB)))`.
    pub h: usize,
}

/// Events emitted through the verification hook. `Mark`/`Unmark` mirror the
/// bookkeeping for nodes holding an update that a filter false positive
/// misrouted; the production code path never consults this state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeEvent {
    FilterFalsePositive { node: NodeId, key: u64 },
    Mark { node: NodeId, key: u64 },
    Unmark { node: NodeId, key: u64 },
    UnmarkAll { node: NodeId },
}

pub type Observer = Box<dyn FnMut(TreeEvent) + Send>;

/// Which internal procedure an I/O charge belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ProcKind {
    PushSignal,
    ApplyTodo,
    EmptyList,
    FillUp,
}

impl ProcKind {
    pub const ALL: [ProcKind; 4] = [
        ProcKind::PushSignal,
        ProcKind::ApplyTodo,
        ProcKind::EmptyList,
        ProcKind::FillUp,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ProcKind::PushSignal => "push_signal",
            ProcKind::ApplyTodo => "apply_todo",
            ProcKind::EmptyList => "empty_list",
            ProcKind::FillUp => "fill_up",
        }
    }
}

/// Per-procedure I/O tallies, recorded per invocation with nested calls
/// excluded.
#[derive(Debug, Clone, Copy, Default)]
pub struct ProcStats {
    pub invocations: u64,
    pub total_transfers: u64,
    pub max_transfers: u64,
}

/// The in-memory root node.
#[derive(Debug)]
pub(crate) struct RootNode {
    pub boundary: u64,
    pub list: Vec<Entry>,
    pub sig: Vec<Signal>,
    pub filter: Filter,
}

/// The priority queue: a static tree of disk-resident nodes plus the
/// memory-resident root.
pub struct XpqQueue {
    store: BlockStore,
    cfg: TreeConfig,
    topo: Topology,
    layout: NodeLayout,
    codec: PriorityCodec,
    root: RootNode,
    /// Detached filter shadows for disk nodes (verification mode only).
    shadow_bank: HashMap<NodeId, HashMap<u64, u32>>,
    observer: Option<Observer>,
    verify_hooks: bool,
    fp_inject_every: Option<u64>,
    filter_query_count: u64,
    rebuild_counter: u64,
    sabotage_skip_delete_forward: bool,
    proc_stats: HashMap<ProcKind, ProcStats>,
    /// True when the whole structure is known to hold nothing, so empty
    /// extracts cost no I/O.
    known_empty: bool,
    /// Per-node liveness bits: false guarantees the subtree holds no entry
    /// and no pending update, letting fill-up skip it without I/O. Resident
    /// in memory and accounted against the budget at construction.
    live_hint: Vec<bool>,
    _root_pin: crate::emx::PinToken,
}

impl XpqQueue {
    pub fn new(
        params: ModelParams,
        policy: BudgetPolicy,
        tuning: TreeTuning,
    ) -> Result<Self, PqError> {
        let t = tuning.t.unwrap_or_else(|| default_fanout(params.n));
        if t < 2 {
            return Err(PqError::Internal("fanout must be at least 2"));
        }
        let epsilon = tuning.epsilon.unwrap_or_else(|| default_epsilon(params.n));
        params.validate(Some(t))?;
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(PqError::Filter(FilterError::BadParams(
                "epsilon must be in (0, 1)",
            )));
        }
        let leaf_span = (t * params.b) as u64;
        let topo = Topology::new(params.n, t, leaf_span);
        let cfg = TreeConfig {
            params,
            t,
            epsilon,
            seed: tuning.seed,
            h: topo.height(),
        };
        let mut store = BlockStore::new(params, policy);
        let layout = NodeLayout::allocate(&mut store, &topo, &cfg)?;
        let filter_params = layout.filter_params(ROOT, 0);
        let mut filter = Filter::new(filter_params)?;
        if tuning.verify_hooks {
            filter.enable_shadow();
        }
        let root = RootNode {
            boundary: INF,
            list: Vec::new(),
            sig: Vec::new(),
            filter,
        };
        // The root is permanently memory-resident, as is one liveness bit
        // per node; reserve both up front.
        let root_words = 2 * layout.list_cap + 2 * layout.sig_cap + layout.filter_region + 4;
        let hint_words = topo.node_count().div_ceil(64);
        let root_pin = store.pin(root_words + hint_words)?;
        let node_count = topo.node_count();
        let codec = PriorityCodec::for_universe(params.n);
        Ok(XpqQueue {
            store,
            cfg,
            topo,
            layout,
            codec,
            root,
            shadow_bank: HashMap::new(),
            observer: None,
            verify_hooks: tuning.verify_hooks,
            fp_inject_every: tuning.fp_inject_every,
            filter_query_count: 0,
            rebuild_counter: 0,
            sabotage_skip_delete_forward: tuning.sabotage_skip_delete_forward,
            proc_stats: HashMap::new(),
            known_empty: true,
            live_hint: vec![false; node_count],
            _root_pin: root_pin,
        })
    }

    /// Capacity limits the invariant checker should enforce.
    pub fn snapshot_limits(&self) -> crate::oracle::SnapshotLimits {
        crate::oracle::SnapshotLimits {
            list_limit: self.layout.list_limit,
            sig_limit: self.layout.sig_limit,
            todo_limit: self.layout.todo_limit,
        }
    }

    pub fn config(&self) -> &TreeConfig {
        &self.cfg
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
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

    /// Reserves working memory against the model budget on behalf of an
    /// application (e.g. a settled-vertex bitmap).
    pub fn pin_words(&mut self, words: usize) -> Result<crate::emx::PinToken, PqError> {
        Ok(self.store.pin(words)?)
    }

    pub fn unpin_words(&mut self, token: crate::emx::PinToken) {
        self.store.unpin(token)
    }

    pub fn proc_stats(&self) -> &HashMap<ProcKind, ProcStats> {
        &self.proc_stats
    }

    /// Registers a callback receiving verification events.
    pub fn set_observer(&mut self, observer: Observer) {
        self.observer = Some(observer);
    }

    /// One-based leaf index for `key`: keys `(i-1)*tB + 1 ..= i*tB` map to
    /// leaf `i`.
    pub fn leaf_of(&self, key: u64) -> Result<usize, PqError> {
        self.check_key(key)?;
        Ok(self.topo.leaf_index(key) + 1)
    }

    fn check_key(&self, key: u64) -> Result<(), PqError> {
        if key == 0 || key > self.cfg.params.n {
            return Err(PqError::KeyOutOfRange {
                key,
                n: self.cfg.params.n,
            });
        }
        Ok(())
    }

    /// Largest priority the queue accepts (the key rides in the low bits
    /// of the stored word; see [`PriorityCodec`]).
    pub fn max_priority(&self) -> u64 {
        self.codec.max_priority()
    }

    /// Insert or decrease-key: stores `min(p, existing)` for `key`,
    /// inserting if absent. Costs no I/O beyond triggered procedures.
    pub fn update(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        self.check_key(key)?;
        if priority > self.codec.max_priority() {
            return Err(PqError::InvalidPriority(priority));
        }
        let composed = self.codec.compose(key, priority);
        self.known_empty = false;
        let mut ctx = Ctx::new(self);
        ops::op_update(&mut ctx, key, composed)?;
        ctx.finish()
    }

    /// Insert: alias of [`update`](Self::update). Inserting an existing key
    /// with a larger priority leaves the stored value unchanged.
    pub fn insert(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        self.update(key, priority)
    }

    /// Decrease-key: alias of [`update`](Self::update); no-op unless the new
    /// priority is strictly smaller.
    pub fn decrease_key(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        self.update(key, priority)
    }

    /// Removes `key` wherever it lives; deleting an absent key is legal and
    /// has no effect on extraction output.
    pub fn delete(&mut self, key: u64) -> Result<(), PqError> {
        self.check_key(key)?;
        if self.known_empty {
            return Ok(());
        }
        let mut ctx = Ctx::new(self);
        ops::op_delete(&mut ctx, key)?;
        ctx.finish()
    }

    /// Removes and returns the minimum-priority entry (smallest key among
    /// priority ties), or `None` when the structure is empty.
    pub fn extract_min(&mut self) -> Result<Option<Entry>, PqError> {
        if self.known_empty {
            return Ok(None);
        }
        let mut ctx = Ctx::new(self);
        let out = ops::op_extract_min(&mut ctx)?;
        ctx.finish()?;
        let out = out.map(|e| Entry {
            key: e.key,
            priority: self.codec.raw(e.priority),
        });
        if out.is_none() {
            self.known_empty = true;
        }
        Ok(out)
    }

    /// Replays one trace operation; extract results come back for
    /// differential comparison.
    pub fn apply(&mut self, op: &TraceOp) -> Result<Option<Option<Entry>>, PqError> {
        match *op {
            TraceOp::Update { key, priority } => {
                self.update(key, priority)?;
                Ok(None)
            }
            TraceOp::Delete { key } => {
                self.delete(key)?;
                Ok(None)
            }
            TraceOp::ExtractMin => Ok(Some(self.extract_min()?)),
        }
    }

    /// Serialized size of a node in words (header, buffers, list, filter).
    pub fn node_size_words(&self, node: NodeId) -> Result<usize, PqError> {
        if node == ROOT {
            return Ok(4
                + 2 * self.root.sig.len()
                + 2 * self.root.list.len()
                + self.root.filter.to_words().len());
        }
        let view = self.peek_node(node)?;
        let filter_words = node::peek_filter_words(&self.store, &self.layout, node)?;
        Ok(4 + 2 * view.todo.len() + 2 * view.sig.len() + 2 * view.list.len() + filter_words)
    }

    /// Decodes a node's state without counting I/O (verification only).
    /// Priorities come back in caller space (the key-composition stripped).
    pub(crate) fn peek_node(&self, node: NodeId) -> Result<NodeSnapshot, PqError> {
        let snap = if node == ROOT {
            NodeSnapshot {
                boundary: self.root.boundary,
                list: self.root.list.clone(),
                sig: self.root.sig.clone(),
                todo: Vec::new(),
            }
        } else {
            node::peek_node(&self.store, &self.layout, node)?
        };
        Ok(self.decompose_snapshot(snap))
    }

    fn decompose_snapshot(&self, mut snap: NodeSnapshot) -> NodeSnapshot {
        snap.boundary = self.codec.raw(snap.boundary);
        for e in &mut snap.list {
            e.priority = self.codec.raw(e.priority);
        }
        for buf in [&mut snap.sig, &mut snap.todo] {
            for s in buf.iter_mut() {
                if let Signal::Update { priority, .. } = s {
                    *priority = self.codec.raw(*priority);
                }
            }
        }
        snap
    }

    /// Full-tree snapshot for the invariant checker. Reads bypass the I/O
    /// counters; call only at quiescent points (between operations).
    pub fn snapshot(&self) -> Result<TreeSnapshot, PqError> {
        let mut nodes = Vec::with_capacity(self.topo.node_count());
        for id in 0..self.topo.node_count() {
            nodes.push(self.peek_node(id)?);
        }
        Ok(TreeSnapshot {
            topo: self.topo.clone(),
            nodes,
        })
    }

    /// Queries a node's filter without I/O accounting (verification only).
    pub fn peek_filter_query(&self, node: NodeId, key: u64) -> Result<bool, PqError> {
        if node == ROOT {
            return Ok(self.root.filter.query(key));
        }
        let filter = node::peek_filter(&self.store, &self.layout, node)?;
        Ok(filter.query(key))
    }
}

#[cfg(test)]
mod tests;
