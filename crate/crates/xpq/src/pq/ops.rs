//! Queue operations and the four internal procedures.
//!
//! Update, delete, and extract-min touch only the memory-resident root;
//! disk traffic happens in push-signal (cascade a full signal buffer to the
//! children), apply-todo (fold a node's pending signals into its list),
//! empty-list (push the largest excess entries down), and fill-up (stream
//! the smallest entries up). Each runs in its own accounting frame.
//!
//! Exhaustion handling beyond the buffered steady state: fill-up restores
//! any live child whose list is empty before selecting minima (so every
//! live subtree's minimum is visible, including values parked in deeper
//! signal buffers), treats every todo update as a candidate (a misrouted
//! one may still be the subtree's true minimum), and lifts boundaries on
//! drained children after a raise so the downward boundary ordering stays
//! physically true wherever content can still route. A per-node liveness
//! bit (pinned in memory, one bit per node) lets fill-up skip provably
//! empty subtrees without touching disk.

use std::collections::BTreeMap;

use super::ctx::Ctx;
use super::{entry_cmp_desc, Entry, NodeId, PqError, ProcKind, Signal, TreeEvent, ROOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(super) enum TodoMode {
    Normal,
    /// Invoked as the prologue of empty-list / fill-up: the caller owns the
    /// follow-up overflow or refill handling.
    FromRestorer,
}

fn sorted_insert(list: &mut Vec<Entry>, entry: Entry) {
    match list.binary_search_by(|probe| entry_cmp_desc(probe, &entry)) {
        Ok(_) => debug_assert!(false, "duplicate key in node list"),
        Err(pos) => list.insert(pos, entry),
    }
}

// ---- public operations ----------------------------------------------------

pub(super) fn op_update(ctx: &mut Ctx, key: u64, priority: u64) -> Result<(), PqError> {
    if let Some(pos) = ctx.q.root.list.iter().position(|e| e.key == key) {
        // Present in the root list: keep the minimum.
        if priority < ctx.q.root.list[pos].priority {
            ctx.q.root.list.remove(pos);
            sorted_insert(&mut ctx.q.root.list, Entry { key, priority });
        }
        return Ok(());
    }
    if priority > ctx.q.root.boundary {
        // Too large to live in the root: defer as a signal.
        let len = ctx.sig_append(ROOT, Signal::Update { key, priority })?;
        if len > ctx.sig_limit() {
            push_signal(ctx, ROOT)?;
        }
        return Ok(());
    }
    // Heap order demands the entry lives here; any other copy in the tree
    // must die, so a delete signal chases it.
    sorted_insert(&mut ctx.q.root.list, Entry { key, priority });
    ctx.with_filter(ROOT, |f| f.insert(key))??;
    let len = ctx.sig_append(ROOT, Signal::Delete { key })?;
    if len > ctx.sig_limit() {
        push_signal(ctx, ROOT)?;
    }
    if ctx.q.root.list.len() > ctx.list_limit() {
        empty_list(ctx, ROOT)?;
    }
    Ok(())
}

pub(super) fn op_delete(ctx: &mut Ctx, key: u64) -> Result<(), PqError> {
    if let Some(pos) = ctx.q.root.list.iter().position(|e| e.key == key) {
        ctx.q.root.list.remove(pos);
        ctx.with_filter(ROOT, |f| f.delete(key))?;
        if ctx.q.root.list.is_empty() {
            fill_up(ctx, ROOT)?;
        }
    } else {
        let len = ctx.sig_append(ROOT, Signal::Delete { key })?;
        if len > ctx.sig_limit() {
            push_signal(ctx, ROOT)?;
        }
    }
    Ok(())
}

pub(super) fn op_extract_min(ctx: &mut Ctx) -> Result<Option<Entry>, PqError> {
    if ctx.q.root.list.is_empty() {
        // Either the structure is empty or the minimum is buffered below;
        // fill-up drains the root's signals down and pulls the minima up.
        fill_up(ctx, ROOT)?;
    }
    let Some(&entry) = ctx.q.root.list.last() else {
        return Ok(None);
    };
    op_delete(ctx, entry.key)?;
    Ok(Some(entry))
}

// ---- signal routing ---------------------------------------------------------

/// Does child `c` hold an actual entry for `key`, judged by its filter and
/// todo buffer alone? Returns `(answer, filter_was_fp, todo_had_update)`.
/// A false answer is always certain; a true answer may be a filter false
/// positive.
fn check_in_actual(ctx: &mut Ctx, key: u64, child: NodeId) -> Result<(bool, bool, bool), PqError> {
    let had_update = ctx.todo_has_update(child, key)?;
    let (filter_says, was_fp) = ctx.filter_query_hooked(child, key)?;
    Ok((filter_says || had_update, was_fp, had_update))
}

fn sig_forward(ctx: &mut Ctx, node: NodeId, sig: Signal) -> Result<(), PqError> {
    let len = ctx.sig_append(node, sig)?;
    if len > ctx.sig_limit() {
        push_signal(ctx, node)?;
    }
    Ok(())
}

fn todo_overflow_check(ctx: &mut Ctx, node: NodeId) -> Result<(), PqError> {
    if ctx.todo_len(node)? > ctx.todo_limit() {
        apply_todo(ctx, node, TodoMode::Normal)?;
    }
    Ok(())
}

/// Places a delete in the todo buffer (superseding every earlier signal for
/// the key) without running overflow handling yet: routing a signal may
/// require a companion signal-buffer append, and any cascade must only run
/// once the whole placement is in.
fn todo_place_delete(ctx: &mut Ctx, node: NodeId, key: u64) -> Result<(), PqError> {
    ctx.with_todo(node, |todo| {
        todo.retain(|s| s.key() != key);
        todo.push(Signal::Delete { key });
    })
}

/// Places an update in the todo buffer: merge into an existing update by
/// minimum, else append (after any delete, keeping the delete-then-update
/// shape). Overflow handling is the caller's job, for the same reason as
/// [`todo_place_delete`].
fn todo_place_update(ctx: &mut Ctx, node: NodeId, key: u64, priority: u64) -> Result<(), PqError> {
    ctx.with_todo(node, |todo| {
        for sig in todo.iter_mut() {
            if let Signal::Update {
                key: k,
                priority: p,
            } = sig
            {
                if *k == key {
                    *p = (*p).min(priority);
                    return;
                }
            }
        }
        todo.push(Signal::Update { key, priority });
    })
}

pub(super) fn push_signal(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    ctx.begin_proc(ProcKind::PushSignal);
    let result = push_signal_inner(ctx, v);
    ctx.end_proc();
    result
}

fn push_signal_inner(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    let signals = ctx.take_sig(v)?;
    if ctx.children(v).is_empty() {
        // Childless tree: nothing below can hold entries, signals expire.
        return Ok(());
    }
    let mut by_child: BTreeMap<NodeId, Vec<Signal>> = BTreeMap::new();
    for sig in signals {
        by_child
            .entry(ctx.child_toward(v, sig.key()))
            .or_default()
            .push(sig);
    }
    for (c, sigs) in by_child {
        let leaf = ctx.is_leaf(c);
        for sig in sigs {
            match sig {
                Signal::Delete { key } => {
                    if leaf {
                        todo_place_delete(ctx, c, key)?;
                        ctx.emit(TreeEvent::Unmark { node: c, key });
                        todo_overflow_check(ctx, c)?;
                    } else {
                        let (in_actual, _, _) = check_in_actual(ctx, key, c)?;
                        if in_actual {
                            todo_place_delete(ctx, c, key)?;
                        }
                        // The filter may have answered falsely, so the
                        // delete also continues downward unconditionally.
                        // Both placements land before any cascade runs.
                        let sig_len = if ctx.sabotage_skip_delete_forward() {
                            0
                        } else {
                            ctx.sig_append(c, Signal::Delete { key })?
                        };
                        ctx.emit(TreeEvent::Unmark { node: c, key });
                        todo_overflow_check(ctx, c)?;
                        if sig_len > ctx.sig_limit() {
                            push_signal(ctx, c)?;
                        }
                    }
                }
                Signal::Update { key, priority } => {
                    if leaf {
                        todo_place_update(ctx, c, key, priority)?;
                        todo_overflow_check(ctx, c)?;
                    } else {
                        let bnd = ctx.boundary(c)?;
                        if priority <= bnd {
                            // The entry belongs at c or above; place it and
                            // chase other copies with a delete. Overflow
                            // handling waits until both halves are placed,
                            // otherwise a cascade could sink the update
                            // below its own chasing delete.
                            todo_place_update(ctx, c, key, priority)?;
                            let sig_len = ctx.sig_append(c, Signal::Delete { key })?;
                            ctx.emit(TreeEvent::Unmark { node: c, key });
                            todo_overflow_check(ctx, c)?;
                            if sig_len > ctx.sig_limit() {
                                push_signal(ctx, c)?;
                            }
                        } else {
                            let (in_actual, was_fp, had_update) = check_in_actual(ctx, key, c)?;
                            if in_actual {
                                // Mark only a cleanly misplaced update. If a
                                // delete for the key already waits in the
                                // todo (itself the product of an earlier
                                // false positive), the pair forms the
                                // delete-then-update transit shape, which
                                // apply-todo recovers without bookkeeping.
                                let had_delete = ctx.todo_has_delete(c, key)?;
                                todo_place_update(ctx, c, key, priority)?;
                                if was_fp && !had_update && !had_delete {
                                    ctx.emit(TreeEvent::Mark { node: c, key });
                                }
                                todo_overflow_check(ctx, c)?;
                            } else {
                                sig_forward(ctx, c, sig)?;
                            }
                        }
                    }
                }
            }
        }
        ctx.release_node(c)?;
    }
    Ok(())
}

// ---- apply-todo -------------------------------------------------------------

pub(super) fn apply_todo(ctx: &mut Ctx, v: NodeId, mode: TodoMode) -> Result<(), PqError> {
    ctx.begin_proc(ProcKind::ApplyTodo);
    let result = apply_todo_inner(ctx, v, mode);
    ctx.end_proc();
    result
}

fn apply_todo_inner(ctx: &mut Ctx, v: NodeId, mode: TodoMode) -> Result<(), PqError> {
    if v == ROOT {
        // No todo buffer; just refresh the boundary from the list.
        if let Some(first) = ctx.q.root.list.first() {
            ctx.q.root.boundary = first.priority;
        }
        return Ok(());
    }
    if ctx.todo_len(v)? == 0 {
        return Ok(());
    }
    let todo = ctx.with_todo(v, std::mem::take)?;
    let entry_boundary = ctx.boundary(v)?;
    let leaf = ctx.is_leaf(v);
    let mut recovered: Vec<Signal> = Vec::new();
    ctx.with_list_full(v, |list| {
        for sig in &todo {
            match *sig {
                Signal::Delete { key } => {
                    if let Some(pos) = list.iter().position(|e| e.key == key) {
                        list.remove(pos);
                    }
                }
                Signal::Update { key, priority } => {
                    if let Some(pos) = list.iter().position(|e| e.key == key) {
                        if priority < list[pos].priority {
                            list.remove(pos);
                            sorted_insert(list, Entry { key, priority });
                        }
                    } else if priority <= entry_boundary || leaf {
                        // Leaves are a key's final home, so the boundary
                        // guard does not apply there.
                        sorted_insert(list, Entry { key, priority });
                    } else {
                        // Above the boundary with no matching entry: this
                        // update was misrouted by a filter false positive.
                        // Send it back through the signal buffer.
                        recovered.push(*sig);
                    }
                }
            }
        }
    })?;
    let keys: Vec<u64> = ctx.with_list_full(v, |l| l.iter().map(|e| e.key).collect())?;
    ctx.rebuild_filter(v, keys.into_iter())?;
    let (len, max_priority) = ctx.with_list_full(v, |l| (l.len(), l.first().map(|e| e.priority)))?;
    if let Some(max) = max_priority {
        ctx.set_boundary(v, max)?;
    }
    ctx.emit(TreeEvent::UnmarkAll { node: v });
    for sig in recovered {
        debug_assert!(!leaf);
        sig_forward(ctx, v, sig)?;
    }
    if mode == TodoMode::Normal {
        if len > ctx.list_limit() {
            debug_assert!(!leaf, "leaf lists cannot overflow");
            empty_list(ctx, v)?;
        } else if len == 0 && !leaf {
            fill_up(ctx, v)?;
        }
    }
    Ok(())
}

// ---- empty-list ---------------------------------------------------------------

pub(super) fn empty_list(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    ctx.begin_proc(ProcKind::EmptyList);
    let result = empty_list_inner(ctx, v);
    ctx.end_proc();
    result
}

fn empty_list_inner(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    debug_assert!(!ctx.is_leaf(v), "leaf lists cannot overflow");
    apply_todo(ctx, v, TodoMode::FromRestorer)?;
    if ctx.sig_len(v)? > 0 {
        push_signal(ctx, v)?;
    }
    let target = ctx.fanout() * ctx.b();
    let len = ctx.list_len(v)?;
    if len <= target {
        // A nested invocation (via apply-todo) already restored the list.
        return Ok(());
    }
    // Largest-priority excess is the list prefix.
    let excess: Vec<Entry> = ctx.with_list_full(v, |l| l.drain(0..len - target).collect())?;
    let mut by_child: BTreeMap<NodeId, Vec<Entry>> = BTreeMap::new();
    for e in excess {
        by_child
            .entry(ctx.child_toward(v, e.key))
            .or_default()
            .push(e);
    }
    for (c, entries) in by_child {
        // The child's boundary must cover everything it is about to hold.
        // It normally already does; a fully drained child may have gone
        // stale-low, in which case the arriving batch lifts it.
        let batch_max = entries[0].priority;
        if ctx.boundary(c)? < batch_max {
            ctx.set_boundary(c, batch_max)?;
        }
        for e in entries {
            // A pending delete for this key in the child's todo buffer is
            // about to be outrun by the entry itself: the delete becomes
            // the update.
            let converted = ctx.with_todo(c, |todo| {
                let Some(pos) = todo
                    .iter()
                    .position(|s| !s.is_update() && s.key() == e.key)
                else {
                    return false;
                };
                let mut merged = e.priority;
                let mut idx = 0;
                todo.retain(|s| {
                    let stale = idx != pos && s.key() == e.key;
                    if stale {
                        debug_assert!(false, "todo held signals past a delete");
                        if let Signal::Update { priority, .. } = s {
                            merged = merged.min(*priority);
                        }
                    }
                    idx += 1;
                    !stale
                });
                todo[pos] = Signal::Update {
                    key: e.key,
                    priority: merged,
                };
                true
            })?;
            ctx.with_filter(v, |f| f.delete(e.key))?;
            ctx.with_filter(c, |f| f.insert(e.key))??;
            if !converted {
                append_sorted_tail(ctx, c, e)?;
                if ctx.list_len(c)? > ctx.list_limit() {
                    empty_list(ctx, c)?;
                }
            }
        }
        ctx.release_node(c)?;
    }
    let new_max = ctx.with_list_full(v, |l| l.first().map(|e| e.priority))?;
    if let Some(max) = new_max {
        ctx.set_boundary(v, max)?;
    }
    Ok(())
}

/// Appends `e` at the child's list tail. Heap order guarantees `e` sorts at
/// or below everything present; entries tied on priority may need their
/// descending-key order restored around the junction.
fn append_sorted_tail(ctx: &mut Ctx, c: NodeId, e: Entry) -> Result<(), PqError> {
    let mut displaced: Vec<Entry> = Vec::new();
    while let Some(tail) = ctx.list_peek_tail(c)? {
        if tail.priority == e.priority && tail.key < e.key {
            displaced.push(ctx.list_pop_tail(c)?.expect("peeked tail"));
        } else {
            debug_assert!(
                (tail.priority, tail.key) > (e.priority, e.key),
                "pushed-down entry must not exceed the child's tail"
            );
            break;
        }
    }
    ctx.list_append(c, &[e])?;
    displaced.reverse();
    if !displaced.is_empty() {
        ctx.list_append(c, &displaced)?;
    }
    Ok(())
}

// ---- fill-up -------------------------------------------------------------------

pub(super) fn fill_up(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    ctx.begin_proc(ProcKind::FillUp);
    let result = fill_up_inner(ctx, v);
    ctx.end_proc();
    result
}

fn fill_up_inner(ctx: &mut Ctx, v: NodeId) -> Result<(), PqError> {
    let children: Vec<NodeId> = ctx.children(v).collect();
    if children.is_empty() {
        // Leaves (and a childless root) have nowhere to pull from; an empty
        // list is legal there.
        return Ok(());
    }
    apply_todo(ctx, v, TodoMode::FromRestorer)?;
    if ctx.sig_len(v)? > 0 {
        push_signal(ctx, v)?;
    }
    let target = ctx.fanout() * ctx.b();
    let have = ctx.list_len(v)?;
    if have >= target {
        return Ok(());
    }

    // Every live child must expose its subtree minimum, so restore empty
    // internal lists before selecting. Children whose subtrees are provably
    // empty are skipped without any I/O.
    let mut active: Vec<bool> = Vec::with_capacity(children.len());
    for &c in &children {
        let mut live = ctx.hint_live(c);
        if live {
            if ctx.list_len(c)? == 0 && !ctx.is_leaf(c) {
                fill_up(ctx, c)?;
            }
            live = ctx.list_len(c)? > 0 || ctx.todo_has_any_update(c)?;
            if !live {
                ctx.set_hint(c, false);
            }
        }
        active.push(live);
    }

    let mut collected: Vec<Entry> = Vec::new();
    while have + collected.len() < target {
        // Global minimum among child list tails and todo updates. Every
        // update is a candidate: one parked above its node's boundary (a
        // filter misroute or an in-transit value) may still be the true
        // minimum of the subtree.
        let mut best: Option<(u64, u64, bool, usize)> = None;
        for (i, &c) in children.iter().enumerate() {
            if !active[i] {
                continue;
            }
            if let Some(tail) = ctx.list_peek_tail(c)? {
                let cand = (tail.priority, tail.key, false, i);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
            if let Some((p, k)) = ctx.todo_min_update(c)? {
                let cand = (p, k, true, i);
                if best.is_none_or(|b| cand < b) {
                    best = Some(cand);
                }
            }
        }
        let Some((priority, key, from_todo, i)) = best else {
            break;
        };
        let c = children[i];
        if from_todo {
            // The update itself is the minimum: it turns into an entry of v
            // and leaves a delete behind for any deeper copy.
            ctx.with_todo(c, |todo| {
                let pos = todo
                    .iter()
                    .position(|s| s.is_update() && s.key() == key)
                    .expect("chosen todo update");
                let mut idx = 0;
                todo.retain(|s| {
                    let keep = idx == pos || s.key() != key;
                    idx += 1;
                    keep
                });
                let pos = todo
                    .iter()
                    .position(|s| s.is_update() && s.key() == key)
                    .expect("chosen todo update survives the purge");
                todo[pos] = Signal::Delete { key };
            })?;
            ctx.emit(TreeEvent::Unmark { node: c, key });
            collected.push(Entry { key, priority });
            ctx.with_filter(v, |f| f.insert(key))??;
        } else {
            let e = ctx.list_pop_tail(c)?.expect("peeked list tail");
            debug_assert_eq!((e.priority, e.key), (priority, key));
            ctx.with_filter(c, |f| f.delete(e.key))?;
            if ctx.todo_has_delete(c, e.key)? {
                // A pending delete consumes the entry on contact.
            } else {
                ctx.with_todo(c, |todo| {
                    todo.retain(|s| !(s.is_update() && s.key() == e.key))
                })?;
                collected.push(e);
                ctx.with_filter(v, |f| f.insert(e.key))??;
            }
            if ctx.list_len(c)? == 0 && !ctx.is_leaf(c) {
                // Refill immediately so deeper minima stay visible.
                fill_up(ctx, c)?;
            }
        }
        active[i] = ctx.list_len(c)? > 0 || ctx.todo_has_any_update(c)?;
        if !active[i] {
            ctx.set_hint(c, false);
        }
    }

    if !collected.is_empty() {
        debug_assert!(collected
            .windows(2)
            .all(|w| (w[0].priority, w[0].key) < (w[1].priority, w[1].key)));
        let max = ctx.with_list_full(v, |l| {
            l.extend(collected.iter().copied());
            l.sort_by(entry_cmp_desc);
            l.first().map(|e| e.priority)
        })?;
        if let Some(m) = max {
            ctx.set_boundary(v, m)?;
        }
    }
    for &c in &children {
        ctx.release_node(c)?;
    }
    Ok(())
}
