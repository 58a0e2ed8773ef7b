//! Test-side ground truth.
//!
//! [`RefQueue`] is an exact in-memory priority queue with the same
//! decrease-key semantics and tie rule as the tree; the differential harness
//! replays every trace against it. [`ScanQueue`] is a deliberately naive
//! second implementation (linear scans over a vector) used to cross-check
//! the reference itself.
//!
//! The rest of the module evaluates a [`TreeSnapshot`]: per-node actual
//! priorities, the folded final priority of a key, and the seven structural
//! invariants the tree maintains (uniqueness with interposed deletes,
//! extraction correctness, heap order on boundaries, todo-buffer shape, and
//! the discipline of nodes marked by filter false positives). Marked-node
//! sets exist only here, reconstructed from the tree's verification events;
//! the production structure never stores them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;

use crate::pq::{Entry, NodeId, Signal, Topology, TreeEvent, INF, ROOT};
use crate::trace::TraceOp;

/// Exact reference queue: one priority per key, updates keep the minimum,
/// extraction takes the smallest `(priority, key)`.
#[derive(Debug, Default, Clone)]
pub struct RefQueue {
    by_key: BTreeMap<u64, u64>,
    by_priority: BTreeSet<(u64, u64)>,
}

impl RefQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    pub fn priority_of(&self, key: u64) -> Option<u64> {
        self.by_key.get(&key).copied()
    }

    pub fn live(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        self.by_key.iter().map(|(&k, &p)| (k, p))
    }

    /// Insert if absent; otherwise lower the stored priority iff `p < p'`.
    pub fn update(&mut self, key: u64, priority: u64) {
        match self.by_key.get(&key) {
            Some(&old) if old <= priority => {}
            Some(&old) => {
                self.by_priority.remove(&(old, key));
                self.by_priority.insert((priority, key));
                self.by_key.insert(key, priority);
            }
            None => {
                self.by_key.insert(key, priority);
                self.by_priority.insert((priority, key));
            }
        }
    }

    pub fn delete(&mut self, key: u64) {
        if let Some(old) = self.by_key.remove(&key) {
            self.by_priority.remove(&(old, key));
        }
    }

    pub fn extract_min(&mut self) -> Option<Entry> {
        let &(priority, key) = self.by_priority.iter().next()?;
        self.by_priority.remove(&(priority, key));
        self.by_key.remove(&key);
        Some(Entry { key, priority })
    }

    /// Replays one trace op; `Some(result)` for extracts.
    pub fn apply(&mut self, op: &TraceOp) -> Option<Option<Entry>> {
        match *op {
            TraceOp::Update { key, priority } => {
                self.update(key, priority);
                None
            }
            TraceOp::Delete { key } => {
                self.delete(key);
                None
            }
            TraceOp::ExtractMin => Some(self.extract_min()),
        }
    }
}

/// Naive list-scan queue: the oracle's oracle. Every operation is a linear
/// scan, with no shared structure with [`RefQueue`].
#[derive(Debug, Default, Clone)]
pub struct ScanQueue {
    items: Vec<Entry>,
}

impl ScanQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, op: &TraceOp) -> Option<Option<Entry>> {
        match *op {
            TraceOp::Update { key, priority } => {
                for item in self.items.iter_mut() {
                    if item.key == key {
                        if priority < item.priority {
                            item.priority = priority;
                        }
                        return None;
                    }
                }
                self.items.push(Entry { key, priority });
                None
            }
            TraceOp::Delete { key } => {
                self.items.retain(|e| e.key != key);
                None
            }
            TraceOp::ExtractMin => {
                let best = self
                    .items
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, e)| (e.priority, e.key))
                    .map(|(i, _)| i);
                Some(best.map(|i| self.items.swap_remove(i)))
            }
        }
    }
}

/// Decoded state of one tree node at a quiescent point.
#[derive(Debug, Clone, Default)]
pub struct NodeSnapshot {
    pub boundary: u64,
    pub list: Vec<Entry>,
    pub sig: Vec<Signal>,
    pub todo: Vec<Signal>,
}

/// Full decoded tree plus the capacity limits the oracle checks against.
#[derive(Debug, Clone)]
pub struct TreeSnapshot {
    pub topo: Topology,
    pub nodes: Vec<NodeSnapshot>,
}

impl TreeSnapshot {
    pub fn node(&self, id: NodeId) -> &NodeSnapshot {
        &self.nodes[id]
    }
}

/// Priority of `key` at node `v` after folding `v`'s todo buffer over its
/// list entry, in arrival order. `INF` means no actual entry.
pub fn actual_priority(snap: &TreeSnapshot, node: NodeId, key: u64) -> u64 {
    let n = snap.node(node);
    let mut actual = n
        .list
        .iter()
        .find(|e| e.key == key)
        .map_or(INF, |e| e.priority);
    for sig in &n.todo {
        if sig.key() != key {
            continue;
        }
        match *sig {
            Signal::Delete { .. } => actual = INF,
            Signal::Update { priority, .. } => actual = actual.min(priority),
        }
    }
    actual
}

/// Priority of `key` after folding every signal on the path from its leaf
/// up to `upto`, following the time order (signal buffer, then list+todo of
/// each node, bottom-up).
pub fn final_priority(snap: &TreeSnapshot, key: u64, upto: NodeId) -> u64 {
    let path = snap.topo.path_from_leaf(key);
    let mut fin = actual_priority(snap, path[0], key);
    if path[0] == upto {
        return fin;
    }
    for &v in &path[1..] {
        for sig in &snap.node(v).sig {
            if sig.key() != key {
                continue;
            }
            match *sig {
                Signal::Delete { .. } => fin = INF,
                Signal::Update { priority, .. } => fin = fin.min(priority),
            }
        }
        let actual = actual_priority(snap, v, key);
        fin = fin.min(actual);
        if v == upto {
            break;
        }
    }
    fin
}

/// Marked-node bookkeeping: per key, the set of nodes holding an update that
/// a filter false positive misrouted. Maintained purely from tree events.
#[derive(Debug, Default, Clone)]
pub struct MarkLog {
    marks: BTreeMap<u64, BTreeSet<NodeId>>,
}

impl MarkLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn apply(&mut self, event: TreeEvent) {
        match event {
            TreeEvent::Mark { node, key } => {
                self.marks.entry(key).or_default().insert(node);
            }
            TreeEvent::Unmark { node, key } => {
                if let Some(set) = self.marks.get_mut(&key) {
                    set.remove(&node);
                    if set.is_empty() {
                        self.marks.remove(&key);
                    }
                }
            }
            TreeEvent::UnmarkAll { node } => {
                self.marks.retain(|_, set| {
                    set.remove(&node);
                    !set.is_empty()
                });
            }
            TreeEvent::FilterFalsePositive { .. } => {}
        }
    }

    pub fn contains(&self, key: u64, node: NodeId) -> bool {
        self.marks.get(&key).is_some_and(|s| s.contains(&node))
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (u64, NodeId)> + '_ {
        self.marks
            .iter()
            .flat_map(|(&k, set)| set.iter().map(move |&n| (k, n)))
    }
}

/// One invariant violation; rendered as a single machine-parsable line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// "1".."7" for the numbered invariants, "structure" for shape checks.
    pub invariant: String,
    pub node: String,
    pub key: u64,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "inv={} node={} key={} {}",
            self.invariant, self.node, self.key, self.detail
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct InvariantReport {
    pub violations: Vec<Violation>,
}

impl InvariantReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for InvariantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            writeln!(f, "ok: all invariants hold")
        } else {
            for v in &self.violations {
                writeln!(f, "{v}")?;
            }
            Ok(())
        }
    }
}

/// Capacity limits the snapshot checker enforces at quiescent points.
#[derive(Debug, Clone, Copy)]
pub struct SnapshotLimits {
    pub list_limit: usize,
    pub sig_limit: usize,
    pub todo_limit: usize,
}

/// Evaluates the seven invariants plus structural shape over a full tree
/// snapshot. `reference` supplies the correct live set for the extraction
/// invariant; `marks` the false-positive bookkeeping.
pub fn check_invariants(
    snap: &TreeSnapshot,
    limits: SnapshotLimits,
    reference: &RefQueue,
    marks: &MarkLog,
) -> InvariantReport {
    let mut out: Vec<Violation> = Vec::new();
    let topo = &snap.topo;
    let name = |id: NodeId| topo.node_name(id);
    let mut push = |invariant: &str, node: String, key: u64, detail: String| {
        out.push(Violation {
            invariant: invariant.into(),
            node,
            key,
            detail,
        });
    };

    // Structural shape: descending (priority, key) lists with distinct keys,
    // capacity bounds, and the root/leaf buffer rules.
    for (id, node) in snap.nodes.iter().enumerate() {
        let mut keys = HashSet::new();
        for e in &node.list {
            if !keys.insert(e.key) {
                push("structure", name(id), e.key, "duplicate key in list".into());
            }
        }
        if !node
            .list
            .windows(2)
            .all(|w| (w[0].priority, w[0].key) > (w[1].priority, w[1].key))
        {
            push(
                "structure",
                name(id),
                0,
                "list not in descending (priority, key) order".into(),
            );
        }
        if node.list.len() > limits.list_limit {
            push(
                "structure",
                name(id),
                0,
                format!("list holds {} > {}", node.list.len(), limits.list_limit),
            );
        }
        if node.sig.len() > limits.sig_limit {
            push(
                "structure",
                name(id),
                0,
                format!("signal buffer holds {} > {}", node.sig.len(), limits.sig_limit),
            );
        }
        if node.todo.len() > limits.todo_limit {
            push(
                "structure",
                name(id),
                0,
                format!("todo buffer holds {} > {}", node.todo.len(), limits.todo_limit),
            );
        }
        if id == ROOT && !node.todo.is_empty() {
            push("structure", name(id), 0, "root must not have a todo buffer".into());
        }
        if topo.is_leaf(id) && id != ROOT && !node.sig.is_empty() {
            push("structure", name(id), 0, "leaf must not have a signal buffer".into());
        }
        for e in &node.list {
            if e.priority == INF {
                push("structure", name(id), e.key, "entry carries the +inf sentinel".into());
            }
        }
    }

    // Invariant 4a: boundaries never decrease downward along settled
    // chains: a node holding list entries is bounded by its parent's
    // bound. Drained nodes legitimately keep stale bounds (they constrain
    // nothing), and values travelling as buffered updates are ordered by
    // where they entered, not by the bounds they pass; in-transit values
    // are checked against the root bound below, which is what extraction
    // correctness rests on.
    for id in 0..snap.nodes.len() {
        if snap.node(id).list.is_empty() {
            continue;
        }
        if let Some(parent) = topo.parent(id) {
            if snap.node(id).boundary < snap.node(parent).boundary {
                push(
                    "4",
                    name(id),
                    0,
                    format!(
                        "boundary {} below ancestor {} boundary {}",
                        snap.node(id).boundary,
                        name(parent),
                        snap.node(parent).boundary
                    ),
                );
            }
        }
    }
    // Invariant 4c (global): buffered updates respect their node's boundary.
    for (id, node) in snap.nodes.iter().enumerate() {
        for sig in &node.sig {
            if let Signal::Update { key, priority } = *sig {
                if priority < node.boundary {
                    push(
                        "4",
                        name(id),
                        key,
                        format!(
                            "signal-buffer update at {} below boundary {}",
                            priority, node.boundary
                        ),
                    );
                }
            }
        }
    }

    // Where does each key appear?
    let mut key_nodes: BTreeMap<u64, BTreeSet<NodeId>> = BTreeMap::new();
    for (id, node) in snap.nodes.iter().enumerate() {
        for e in &node.list {
            key_nodes.entry(e.key).or_default().insert(id);
        }
        for s in node.sig.iter().chain(&node.todo) {
            key_nodes.entry(s.key()).or_default().insert(id);
        }
    }
    let mut keys: BTreeSet<u64> = key_nodes.keys().copied().collect();
    keys.extend(reference.live().map(|(k, _)| k));

    for &key in &keys {
        let path = topo.path_from_leaf(key);
        let on_path: HashSet<NodeId> = path.iter().copied().collect();
        if let Some(nodes) = key_nodes.get(&key) {
            for &id in nodes {
                if !on_path.contains(&id) {
                    push(
                        "structure",
                        name(id),
                        key,
                        "key resides off its leaf-to-root path".into(),
                    );
                }
            }
        }

        // Invariant 3: the folded final priority at the root is the truth.
        let fin = final_priority(snap, key, ROOT);
        let want = reference.priority_of(key).unwrap_or(INF);
        if fin != want {
            push(
                "3",
                name(ROOT),
                key,
                format!("final priority {fin} but reference holds {want}"),
            );
        }

        let actuals: Vec<u64> = path
            .iter()
            .map(|&v| actual_priority(snap, v, key))
            .collect();
        let has_delete_sig: Vec<bool> = path
            .iter()
            .map(|&v| {
                snap.node(v)
                    .sig
                    .iter()
                    .any(|s| !s.is_update() && s.key() == key)
            })
            .collect();
        // A finite actual backed only by a todo update riding above the
        // node's boundary is a value in transit (a filter misroute being
        // recovered), not a settled copy: it loses every min against
        // settled entries and cannot cause a double extraction.
        let in_transit: Vec<bool> = path
            .iter()
            .map(|&v| {
                let n = snap.node(v);
                n.list.iter().all(|e| e.key != key)
                    && n.todo.iter().any(|s| match *s {
                        Signal::Update { key: k, priority } => {
                            k == key && priority > n.boundary
                        }
                        _ => false,
                    })
            })
            .collect();

        // Invariant 1: two settled copies must have an interposed delete.
        for i in 0..path.len() {
            if actuals[i] == INF || in_transit[i] {
                continue;
            }
            for j in i + 1..path.len() {
                if actuals[j] == INF || marks.contains(key, path[j]) || in_transit[j] {
                    continue;
                }
                let interposed = (i + 1..=j).any(|w| has_delete_sig[w]);
                if !interposed {
                    push(
                        "1",
                        name(path[j]),
                        key,
                        format!(
                            "live at {} and {} with no delete between",
                            name(path[i]),
                            name(path[j])
                        ),
                    );
                }
            }
        }

        // Invariant 2: an update below a live copy must be chased by a
        // delete between them — unless the update rides above the live
        // copy's boundary, in which case it can never win the min against
        // the copy and folds away harmlessly. (That shape arises when a
        // misrouted update is recovered through a signal buffer a chasing
        // delete has already marched past.)
        for j in 0..path.len() {
            if actuals[j] == INF || marks.contains(key, path[j]) {
                continue;
            }
            for w in 0..=j {
                let sig = &snap.node(path[w]).sig;
                for (pos, s) in sig.iter().enumerate() {
                    let Signal::Update { key: k, priority } = *s else {
                        continue;
                    };
                    if k != key {
                        continue;
                    }
                    if priority > snap.node(path[j]).boundary {
                        continue;
                    }
                    let later_here = sig[pos + 1..]
                        .iter()
                        .any(|s| !s.is_update() && s.key() == key);
                    let later_above = (w + 1..=j).any(|x| has_delete_sig[x]);
                    if !later_here && !later_above {
                        push(
                            "2",
                            name(path[j]),
                            key,
                            format!(
                                "update in signal buffer of {} not deleted below the list of {}",
                                name(path[w]),
                                name(path[j])
                            ),
                        );
                    }
                }
            }
        }

        // Invariant 4b: settled entries respect their parent's boundary
        // (transitively all ancestors, given 4a along entry-bearing
        // chains); values still travelling as todo updates respect the
        // root bound, which is what extraction rests on.
        for i in 0..path.len().saturating_sub(1) {
            if actuals[i] == INF {
                continue;
            }
            let in_list = snap
                .node(path[i])
                .list
                .iter()
                .any(|e| e.key == key && e.priority == actuals[i]);
            let (bound, bound_name) = if in_list {
                (snap.node(path[i + 1]).boundary, name(path[i + 1]))
            } else {
                (snap.node(ROOT).boundary, name(ROOT))
            };
            if actuals[i] < bound {
                push(
                    "4",
                    name(path[i]),
                    key,
                    format!(
                        "actual {} below ancestor {} boundary {}",
                        actuals[i], bound_name, bound
                    ),
                );
            }
        }

        // Invariant 5: live copies sit at or below their node's boundary.
        // Two in-transit shapes are exempt: leaf todo updates (a leaf is a
        // key's final home; apply-todo absorbs them and lifts the
        // boundary), and a delete-then-update pair, where the update's
        // value rides above a doomed list entry until apply-todo recovers
        // it through the signal buffer.
        for (i, &v) in path.iter().enumerate() {
            if actuals[i] == INF || marks.contains(key, v) {
                continue;
            }
            let node = snap.node(v);
            let mut saw_delete = false;
            let mut update_after_delete = false;
            for s in &node.todo {
                if s.key() != key {
                    continue;
                }
                if s.is_update() {
                    update_after_delete |= saw_delete;
                } else {
                    saw_delete = true;
                }
            }
            if update_after_delete {
                continue;
            }
            let value = if topo.is_leaf(v) && v != ROOT {
                node.list
                    .iter()
                    .find(|e| e.key == key)
                    .map_or(INF, |e| e.priority)
            } else {
                actuals[i]
            };
            if value != INF && value > node.boundary {
                push(
                    "5",
                    name(v),
                    key,
                    format!("actual {} above boundary {}", value, node.boundary),
                );
            }
        }
    }

    // Invariant 6: todo buffers hold at most a delete, an update, or a
    // delete followed by an update, per key.
    for (id, node) in snap.nodes.iter().enumerate() {
        let mut per_key: HashMap<u64, Vec<bool>> = HashMap::new();
        for s in &node.todo {
            per_key.entry(s.key()).or_default().push(s.is_update());
        }
        for (key, shape) in per_key {
            let ok = matches!(
                shape.as_slice(),
                [false] | [true] | [false, true]
            );
            if !ok {
                push(
                    "6",
                    name(id),
                    key,
                    format!("todo shape {shape:?} (false=delete, true=update)"),
                );
            }
        }
    }

    // Invariant 7: a marked node holds exactly one above-boundary update for
    // the key and no list entry.
    for (key, node) in marks.pairs() {
        let n = snap.node(node);
        let sigs: Vec<&Signal> = n.todo.iter().filter(|s| s.key() == key).collect();
        let ok = matches!(
            sigs.as_slice(),
            [Signal::Update { priority, .. }] if *priority > n.boundary
        );
        if !ok {
            push(
                "7",
                name(node),
                key,
                format!("marked node todo holds {sigs:?}, boundary {}", n.boundary),
            );
        }
        if n.list.iter().any(|e| e.key == key) {
            push("7", name(node), key, "marked node still lists the key".into());
        }
    }

    InvariantReport { violations: out }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::TraceOp;
    use crate::workload::SplitMix64;

    const D: fn(u64) -> Signal = |key| Signal::Delete { key };
    fn u(key: u64, priority: u64) -> Signal {
        Signal::Update { key, priority }
    }
    fn e(key: u64, priority: u64) -> Entry {
        Entry { key, priority }
    }

    fn limits() -> SnapshotLimits {
        SnapshotLimits {
            list_limit: 16,
            sig_limit: 8,
            todo_limit: 4,
        }
    }

    /// Three-level binary tree over N=32, tB=8: root, 2 internal, 4 leaves.
    fn blank_tree() -> TreeSnapshot {
        let topo = Topology::new(32, 2, 8);
        assert_eq!(topo.height(), 2);
        let nodes = (0..topo.node_count())
            .map(|_| NodeSnapshot {
                boundary: INF,
                ..NodeSnapshot::default()
            })
            .collect();
        TreeSnapshot { topo, nodes }
    }

    #[test]
    fn ref_queue_semantics() {
        let mut q = RefQueue::new();
        assert_eq!(q.apply(&TraceOp::Update { key: 5, priority: 3 }), None);
        assert_eq!(
            q.apply(&TraceOp::ExtractMin),
            Some(Some(e(5, 3)))
        );
        // Update only lowers: (5,3) then (5,9) extracts 3.
        q.update(5, 3);
        q.update(5, 9);
        assert_eq!(q.extract_min(), Some(e(5, 3)));
        assert!(q.is_empty());
        // Tie on priority extracts the smaller key.
        q.update(9, 7);
        q.update(2, 7);
        assert_eq!(q.extract_min(), Some(e(2, 7)));
    }

    #[test]
    fn reference_and_naive_scan_agree_on_random_traces() {
        let mut rng = SplitMix64::new(77);
        for _ in 0..20 {
            let mut reference = RefQueue::new();
            let mut naive = ScanQueue::new();
            for _ in 0..10_000 {
                let roll = rng.below(10);
                let op = if roll < 5 {
                    TraceOp::Update {
                        key: rng.below(64) + 1,
                        priority: rng.below(1000),
                    }
                } else if roll < 7 {
                    TraceOp::Delete {
                        key: rng.below(64) + 1,
                    }
                } else {
                    TraceOp::ExtractMin
                };
                assert_eq!(reference.apply(&op), naive.apply(&op), "op {op:?}");
            }
        }
    }

    #[test]
    fn actual_priority_folds_todo_in_order() {
        let mut snap = blank_tree();
        let leaf = snap.topo.leaf_node(3);
        snap.nodes[leaf].list = vec![e(3, 5)];
        assert_eq!(actual_priority(&snap, leaf, 3), 5);
        // Delete then update: the later update wins over the delete.
        snap.nodes[leaf].todo = vec![D(3), u(3, 7)];
        assert_eq!(actual_priority(&snap, leaf, 3), 7);
        // Update only lowers.
        snap.nodes[leaf].todo = vec![u(3, 9)];
        assert_eq!(actual_priority(&snap, leaf, 3), 5);
        snap.nodes[leaf].todo = vec![u(3, 2)];
        assert_eq!(actual_priority(&snap, leaf, 3), 2);
        assert_eq!(actual_priority(&snap, leaf, 4), INF);
    }

    #[test]
    fn final_priority_folds_signals_bottom_up() {
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        let (leaf, mid) = (path[0], path[1]);
        snap.nodes[leaf].list = vec![e(3, 5)];
        assert_eq!(final_priority(&snap, 3, leaf), 5);
        assert_eq!(final_priority(&snap, 3, ROOT), 5);
        // An update in the root's signal buffer lowers the child final.
        snap.nodes[ROOT].sig = vec![u(3, 2)];
        assert_eq!(final_priority(&snap, 3, ROOT), 2);
        // Delete then a later update in one buffer: fold start to end.
        snap.nodes[ROOT].sig = vec![D(3), u(3, 9)];
        assert_eq!(final_priority(&snap, 3, ROOT), 9);
        // The node's own actual merges in last.
        snap.nodes[mid].list = vec![e(3, 1)];
        assert_eq!(final_priority(&snap, 3, mid), 1);
    }

    #[test]
    fn fresh_tree_passes_all_invariants() {
        let snap = blank_tree();
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &MarkLog::new());
        assert!(report.passed(), "{report}");
        assert_eq!(format!("{report}"), "ok: all invariants hold\n");
    }

    #[test]
    fn inv1_detects_two_live_copies_without_interposed_delete() {
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        snap.nodes[path[0]].list = vec![e(3, 9)];
        snap.nodes[path[0]].boundary = 9;
        snap.nodes[path[1]].list = vec![e(3, 4)];
        snap.nodes[path[1]].boundary = 4;
        snap.nodes[ROOT].boundary = 4;
        let mut reference = RefQueue::new();
        reference.update(3, 4);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "1"));
        // A delete signal between the two lists repairs it.
        snap.nodes[path[1]].sig = vec![D(3)];
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(
            !report.violations.iter().any(|v| v.invariant == "1"),
            "{report}"
        );
    }

    #[test]
    fn inv2_detects_update_below_live_copy_without_delete() {
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        let mid = path[1];
        snap.nodes[mid].list = vec![e(3, 8)];
        snap.nodes[mid].boundary = 8;
        snap.nodes[ROOT].boundary = 4;
        // An update for the same key sits in the mid node's own signal
        // buffer (below its list), can win the min, and has no delete
        // chasing it.
        snap.nodes[mid].sig = vec![u(3, 6)];
        let mut reference = RefQueue::new();
        reference.update(3, 6);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "2"), "{report}");
        // A later delete in the same buffer repairs it.
        snap.nodes[mid].sig = vec![u(3, 6), D(3)];
        reference.delete(3);
        reference.update(3, 8);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(!report.violations.iter().any(|v| v.invariant == "2"), "{report}");
        // Above the live copy's boundary the update can never win the min;
        // that in-transit shape is legal.
        snap.nodes[mid].sig = vec![u(3, 9)];
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(!report.violations.iter().any(|v| v.invariant == "2"), "{report}");
    }

    #[test]
    fn inv3_detects_wrong_final_priority() {
        let mut snap = blank_tree();
        let leaf = snap.topo.leaf_node(3);
        snap.nodes[leaf].list = vec![e(3, 5)];
        snap.nodes[leaf].boundary = 5;
        snap.nodes[snap.topo.parent(leaf).unwrap()].boundary = 5;
        snap.nodes[ROOT].boundary = 5;
        let mut reference = RefQueue::new();
        reference.update(3, 4);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "3" && v.key == 3));
        // Also fires for a live key missing from the tree entirely.
        reference.update(9, 1);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "3" && v.key == 9));
    }

    #[test]
    fn inv4_detects_boundary_and_signal_order_breaks() {
        // An entry-bearing node whose boundary sits below its parent's.
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        snap.nodes[path[0]].list = vec![e(3, 9)];
        snap.nodes[path[0]].boundary = 9;
        snap.nodes[path[1]].boundary = 15;
        snap.nodes[ROOT].boundary = 2;
        let mut reference = RefQueue::new();
        reference.update(3, 9);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "4"), "{report}");
        // Drained nodes are exempt: stale bounds constrain nothing.
        snap.nodes[path[0]].list.clear();
        snap.nodes[path[0]].boundary = 9;
        reference.delete(3);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(!report.violations.iter().any(|v| v.invariant == "4"), "{report}");
        // An in-transit todo value below the root's boundary (the
        // extraction-facing form of heap order for buffered values).
        let mut snap = blank_tree();
        let leaf = snap.topo.leaf_node(3);
        snap.nodes[leaf].todo = vec![u(3, 9)];
        snap.nodes[ROOT].boundary = 12;
        let mut reference = RefQueue::new();
        reference.update(3, 9);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "4"), "{report}");
        snap.nodes[ROOT].boundary = 2;
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(!report.violations.iter().any(|v| v.invariant == "4"), "{report}");
        // An update signal below its own node's boundary.
        let mut snap = blank_tree();
        snap.nodes[ROOT].boundary = 10;
        snap.nodes[ROOT].sig = vec![u(3, 4)];
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "4"), "{report}");
    }

    #[test]
    fn inv5_detects_actual_above_boundary() {
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        let mid = path[1];
        snap.nodes[mid].list = vec![e(3, 12)];
        snap.nodes[mid].boundary = 7;
        let mut reference = RefQueue::new();
        reference.update(3, 12);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "5"), "{report}");
        // Marked nodes are exempt.
        let mut snap2 = blank_tree();
        snap2.nodes[mid].todo = vec![u(3, 12)];
        snap2.nodes[mid].boundary = 7;
        let mut marks = MarkLog::new();
        marks.apply(TreeEvent::Mark { node: mid, key: 3 });
        let report = check_invariants(&snap2, limits(), &reference, &marks);
        assert!(!report.violations.iter().any(|v| v.invariant == "5"), "{report}");
    }

    #[test]
    fn inv6_detects_bad_todo_shapes() {
        let mut snap = blank_tree();
        let leaf = snap.topo.leaf_node(3);
        // Update followed by a delete is not a legal shape.
        snap.nodes[leaf].todo = vec![u(3, 5), D(3)];
        snap.nodes[leaf].boundary = 5;
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "6"), "{report}");
        // Legal shapes pass: delete alone, update alone, delete-then-update.
        for shape in [vec![D(3)], vec![u(3, 5)], vec![D(3), u(3, 5)]] {
            let mut snap = blank_tree();
            snap.nodes[leaf].todo = shape;
            snap.nodes[leaf].boundary = INF;
            let report = check_invariants(&snap, limits(), &RefQueue::new(), &MarkLog::new());
            assert!(!report.violations.iter().any(|v| v.invariant == "6"), "{report}");
        }
    }

    #[test]
    fn inv7_detects_marked_node_shape_breaks() {
        let mut snap = blank_tree();
        let path = snap.topo.path_from_leaf(3);
        let mid = path[1];
        let mut marks = MarkLog::new();
        marks.apply(TreeEvent::Mark { node: mid, key: 3 });
        // Marked node with no signal at all: violation.
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &marks);
        assert!(report.violations.iter().any(|v| v.invariant == "7"), "{report}");
        // Proper shape: one update above the boundary, no list entry.
        snap.nodes[mid].boundary = 7;
        snap.nodes[mid].todo = vec![u(3, 12)];
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &marks);
        assert!(!report.violations.iter().any(|v| v.invariant == "7"), "{report}");
        // A list entry for the key breaks it again.
        snap.nodes[mid].list = vec![e(3, 6)];
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &marks);
        assert!(report.violations.iter().any(|v| v.invariant == "7"), "{report}");
    }

    #[test]
    fn structure_checks_fire() {
        let mut snap = blank_tree();
        // Out-of-order list.
        snap.nodes[ROOT].list = vec![e(1, 3), e(2, 9)];
        snap.nodes[ROOT].boundary = 9;
        let report = check_invariants(&snap, limits(), &RefQueue::new(), &MarkLog::new());
        assert!(report.violations.iter().any(|v| v.invariant == "structure"));
        // Off-path residence.
        let mut snap = blank_tree();
        let wrong_leaf = snap.topo.leaf_node(30);
        snap.nodes[wrong_leaf].list = vec![e(3, 5)];
        snap.nodes[wrong_leaf].boundary = 5;
        let mut reference = RefQueue::new();
        reference.update(3, 5);
        let report = check_invariants(&snap, limits(), &reference, &MarkLog::new());
        assert!(report
            .violations
            .iter()
            .any(|v| v.invariant == "structure" && v.detail.contains("off its leaf")));
    }

    #[test]
    fn report_lines_are_machine_parsable() {
        let v = Violation {
            invariant: "5".into(),
            node: "L2.3".into(),
            key: 17,
            detail: "actual 9 above boundary 4".into(),
        };
        let line = format!("{v}");
        assert_eq!(line, "inv=5 node=L2.3 key=17 actual 9 above boundary 4");
        let fields: Vec<&str> = line.split_whitespace().take(3).collect();
        assert_eq!(fields, ["inv=5", "node=L2.3", "key=17"]);
    }

    #[test]
    fn mark_log_applies_events() {
        let mut log = MarkLog::new();
        log.apply(TreeEvent::Mark { node: 4, key: 9 });
        log.apply(TreeEvent::Mark { node: 5, key: 9 });
        assert!(log.contains(9, 4));
        log.apply(TreeEvent::Unmark { node: 4, key: 9 });
        assert!(!log.contains(9, 4));
        assert!(log.contains(9, 5));
        log.apply(TreeEvent::UnmarkAll { node: 5 });
        assert!(log.is_empty());
    }
}
