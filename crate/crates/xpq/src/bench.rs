//! Differential testing and I/O-cost measurement.
//!
//! [`run_diff`] replays a trace on the tree queue and the exact reference
//! queue in lockstep, reporting the first divergence; with invariant
//! checking enabled it also snapshots the tree after every operation and
//! runs the full seven-point checker. [`run_bench`] replays a trace on each
//! requested backend over its own store and renders a cost table with the
//! analytic per-operation reference curves. [`run_sssp`] wires a graph and
//! a backend into the Dijkstra driver.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};

use crate::baseline::KTreeQueue;
use crate::emx::{BudgetPolicy, IoStats, ModelParams, PinToken};
use crate::oracle::{check_invariants, InvariantReport, MarkLog, RefQueue};
use crate::pq::{Entry, PqError, ProcKind, ProcStats, TreeTuning, XpqQueue};
use crate::sssp::{dijkstra, ExtGraph, SsspError, SsspResult};
use crate::trace::TraceOp;

/// Common surface the harness needs from a priority-queue backend.
pub trait QueueBackend {
    fn backend_name(&self) -> &'static str;
    /// Largest accepted priority value.
    fn max_priority(&self) -> u64;
    fn update(&mut self, key: u64, priority: u64) -> Result<(), PqError>;
    fn delete(&mut self, key: u64) -> Result<(), PqError>;
    fn extract_min(&mut self) -> Result<Option<Entry>, PqError>;
    fn io_stats(&self) -> IoStats;
    fn peak_pinned(&self) -> usize;
    fn pin_words(&mut self, words: usize) -> Result<PinToken, PqError>;
    fn unpin_words(&mut self, token: PinToken);

    fn apply(&mut self, op: &TraceOp) -> Result<Option<Option<Entry>>, PqError> {
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
}

impl QueueBackend for XpqQueue {
    fn backend_name(&self) -> &'static str {
        "xpq"
    }
    fn max_priority(&self) -> u64 {
        XpqQueue::max_priority(self)
    }
    fn update(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        XpqQueue::update(self, key, priority)
    }
    fn delete(&mut self, key: u64) -> Result<(), PqError> {
        XpqQueue::delete(self, key)
    }
    fn extract_min(&mut self) -> Result<Option<Entry>, PqError> {
        XpqQueue::extract_min(self)
    }
    fn io_stats(&self) -> IoStats {
        XpqQueue::io_stats(self)
    }
    fn peak_pinned(&self) -> usize {
        XpqQueue::peak_pinned(self)
    }
    fn pin_words(&mut self, words: usize) -> Result<PinToken, PqError> {
        XpqQueue::pin_words(self, words)
    }
    fn unpin_words(&mut self, token: PinToken) {
        XpqQueue::unpin_words(self, token)
    }
}

impl QueueBackend for KTreeQueue {
    fn backend_name(&self) -> &'static str {
        "ktree"
    }
    fn max_priority(&self) -> u64 {
        KTreeQueue::max_priority(self)
    }
    fn update(&mut self, key: u64, priority: u64) -> Result<(), PqError> {
        KTreeQueue::update(self, key, priority)
    }
    fn delete(&mut self, key: u64) -> Result<(), PqError> {
        KTreeQueue::delete(self, key)
    }
    fn extract_min(&mut self) -> Result<Option<Entry>, PqError> {
        KTreeQueue::extract_min(self)
    }
    fn io_stats(&self) -> IoStats {
        KTreeQueue::io_stats(self)
    }
    fn peak_pinned(&self) -> usize {
        KTreeQueue::peak_pinned(self)
    }
    fn pin_words(&mut self, words: usize) -> Result<PinToken, PqError> {
        KTreeQueue::pin_words(self, words)
    }
    fn unpin_words(&mut self, token: PinToken) {
        KTreeQueue::unpin_words(self, token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Xpq,
    KTree,
}

impl BackendKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "xpq" => Some(BackendKind::Xpq),
            "ktree" => Some(BackendKind::KTree),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BackendKind::Xpq => "xpq",
            BackendKind::KTree => "ktree",
        }
    }
}

/// Configuration for a differential run.
#[derive(Debug, Clone)]
pub struct DiffConfig {
    pub params: ModelParams,
    pub t: Option<usize>,
    pub epsilon: Option<f64>,
    pub seed: u64,
    /// Snapshot the tree and run the invariant checker after every
    /// operation.
    pub check_invariants: bool,
    /// Force every n-th filter query positive.
    pub inject_fp_every: Option<u64>,
    /// Budget enforcement for the queue store.
    pub policy: BudgetPolicy,
    #[doc(hidden)]
    pub sabotage_skip_delete_forward: bool,
}

impl DiffConfig {
    pub fn new(params: ModelParams) -> Self {
        DiffConfig {
            params,
            t: None,
            epsilon: None,
            seed: 1,
            check_invariants: false,
            inject_fp_every: None,
            policy: BudgetPolicy::Track,
            sabotage_skip_delete_forward: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DiffVerdict {
    Pass,
    Divergence {
        op_index: usize,
        expected: Option<Entry>,
        got: Option<Entry>,
    },
    InvariantViolation {
        op_index: usize,
        first_line: String,
    },
}

#[derive(Debug, Clone)]
pub struct DiffOutcome {
    pub ops: usize,
    pub extracts: usize,
    pub verdict: DiffVerdict,
    /// Per-procedure I/O tallies from the queue under test.
    pub proc_stats: Vec<(ProcKind, ProcStats)>,
    pub io: IoStats,
    pub peak_pinned: usize,
    pub fanout: usize,
}

/// Replays `trace` on the tree queue and the reference queue in lockstep.
pub fn run_diff(trace: &[TraceOp], cfg: &DiffConfig) -> Result<DiffOutcome, PqError> {
    let verify = cfg.check_invariants || cfg.inject_fp_every.is_some();
    let tuning = TreeTuning {
        t: cfg.t,
        epsilon: cfg.epsilon,
        seed: cfg.seed,
        verify_hooks: verify,
        fp_inject_every: cfg.inject_fp_every,
        sabotage_skip_delete_forward: cfg.sabotage_skip_delete_forward,
    };
    let mut queue = XpqQueue::new(cfg.params, cfg.policy, tuning)?;
    let marks = Arc::new(Mutex::new(MarkLog::new()));
    if verify {
        let sink = Arc::clone(&marks);
        queue.set_observer(Box::new(move |event| sink.lock().unwrap().apply(event)));
    }
    let mut reference = RefQueue::new();
    let mut extracts = 0usize;
    let limits = queue.snapshot_limits();
    let mut verdict = DiffVerdict::Pass;
    for (op_index, op) in trace.iter().enumerate() {
        let got = queue.apply(op)?;
        let want = reference.apply(op);
        if let (Some(got), Some(want)) = (got, want) {
            extracts += 1;
            if got != want {
                verdict = DiffVerdict::Divergence {
                    op_index,
                    expected: want,
                    got,
                };
                break;
            }
        }
        if cfg.check_invariants {
            let snap = queue.snapshot()?;
            let report = check_invariants(&snap, limits, &reference, &marks.lock().unwrap());
            if !report.passed() {
                verdict = DiffVerdict::InvariantViolation {
                    op_index,
                    first_line: report.violations[0].to_string(),
                };
                break;
            }
        }
    }
    Ok(DiffOutcome {
        ops: trace.len(),
        extracts,
        verdict,
        proc_stats: queue
            .proc_stats()
            .iter()
            .map(|(&k, &v)| (k, v))
            .collect(),
        io: queue.io_stats(),
        peak_pinned: queue.peak_pinned(),
        fanout: queue.config().t,
    })
}

/// Checks a full replay's invariants only at the end (cheaper smoke mode).
pub fn final_invariant_report(
    queue: &XpqQueue,
    reference: &RefQueue,
    marks: &MarkLog,
) -> Result<InvariantReport, PqError> {
    let snap = queue.snapshot()?;
    Ok(check_invariants(
        &snap,
        queue.snapshot_limits(),
        reference,
        marks,
    ))
}

/// One backend's cost over a trace.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub backend: &'static str,
    pub reads: u64,
    pub writes: u64,
    pub ops: u64,
    pub peak_pinned: usize,
}

impl CostRow {
    pub fn total(&self) -> u64 {
        self.reads + self.writes
    }

    /// Amortized I/Os per operation, derived from the totals so the report
    /// arithmetic is exact by construction.
    pub fn amortized(&self) -> f64 {
        self.total() as f64 / self.ops as f64
    }
}

/// Cost table plus the analytic reference curves.
#[derive(Debug, Clone)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub n: u64,
    pub b: usize,
    pub m: usize,
    pub t: usize,
    pub h: usize,
    /// `(1/B) * log2(N/B) / log2(log2(N))` — the improved bound's shape.
    pub analytic_new: f64,
    /// `(1/B) * log2(N/B)` — the classic bound's shape.
    pub analytic_classic: f64,
}

impl CostReport {
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "n={} b={} m={} t={} h={}  bound_new={:.6} bound_classic={:.6}",
            self.n, self.b, self.m, self.t, self.h, self.analytic_new, self.analytic_classic
        )
        .unwrap();
        writeln!(
            out,
            "{:<8} {:>12} {:>12} {:>12} {:>10} {:>14} {:>12}",
            "backend", "reads", "writes", "total", "ops", "amortized", "peak_pinned"
        )
        .unwrap();
        for row in &self.rows {
            writeln!(
                out,
                "{:<8} {:>12} {:>12} {:>12} {:>10} {:>14.6} {:>12}",
                row.backend,
                row.reads,
                row.writes,
                row.total(),
                row.ops,
                row.amortized(),
                row.peak_pinned
            )
            .unwrap();
        }
        out
    }

    pub fn render_csv(&self) -> String {
        let mut out = String::from(
            "backend,reads,writes,total,ops,amortized,peak_pinned,n,b,m,t,h,bound_new,bound_classic\n",
        );
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                row.backend,
                row.reads,
                row.writes,
                row.total(),
                row.ops,
                row.amortized(),
                row.peak_pinned,
                self.n,
                self.b,
                self.m,
                self.t,
                self.h,
                self.analytic_new,
                self.analytic_classic
            )
            .unwrap();
        }
        out
    }
}

/// Analytic per-op I/O reference: `(1/B) * log2(N/B) / log2(log2 N)`.
pub fn analytic_bound_new(n: u64, b: usize) -> f64 {
    let log_ratio = ((n as f64) / (b as f64)).log2().max(1.0);
    let loglog = (n as f64).log2().log2().max(1.0);
    log_ratio / loglog / b as f64
}

/// Analytic per-op I/O reference: `(1/B) * log2(N/B)`.
pub fn analytic_bound_classic(n: u64, b: usize) -> f64 {
    let log_ratio = ((n as f64) / (b as f64)).log2().max(1.0);
    log_ratio / b as f64
}

/// Replays `trace` on each backend over a fresh store and tabulates I/O.
pub fn run_bench(
    trace: &[TraceOp],
    params: ModelParams,
    t: Option<usize>,
    epsilon: Option<f64>,
    seed: u64,
    backends: &[BackendKind],
) -> Result<CostReport, PqError> {
    let mut rows = Vec::new();
    let mut used_t = crate::pq::default_fanout(params.n);
    let mut used_h = 0;
    for kind in backends {
        match kind {
            BackendKind::Xpq => {
                let tuning = TreeTuning {
                    t,
                    epsilon,
                    seed,
                    ..TreeTuning::default()
                };
                let mut queue = XpqQueue::new(params, BudgetPolicy::Track, tuning)?;
                used_t = queue.config().t;
                used_h = queue.config().h;
                for op in trace {
                    queue.apply(op)?;
                }
                let io = queue.io_stats();
                rows.push(CostRow {
                    backend: "xpq",
                    reads: io.reads,
                    writes: io.writes,
                    ops: trace.len() as u64,
                    peak_pinned: queue.peak_pinned(),
                });
            }
            BackendKind::KTree => {
                let mut queue = KTreeQueue::new(params)?;
                for op in trace {
                    queue.apply(op)?;
                }
                let io = queue.io_stats();
                rows.push(CostRow {
                    backend: "ktree",
                    reads: io.reads,
                    writes: io.writes,
                    ops: trace.len() as u64,
                    peak_pinned: queue.peak_pinned(),
                });
            }
        }
    }
    Ok(CostReport {
        rows,
        n: params.n,
        b: params.b,
        m: params.m,
        t: used_t,
        h: used_h,
        analytic_new: analytic_bound_new(params.n, params.b),
        analytic_classic: analytic_bound_classic(params.n, params.b),
    })
}

/// Runs Dijkstra over `graph_text` with the chosen backend.
pub fn run_sssp(
    graph_text: &str,
    source: u64,
    kind: BackendKind,
    params: ModelParams,
    t: Option<usize>,
    epsilon: Option<f64>,
    seed: u64,
) -> Result<SsspResult, SsspError> {
    let mut graph = ExtGraph::ingest_text(graph_text, params.b)?;
    let queue_params = ModelParams {
        n: graph.vertex_count().max(2),
        ..params
    };
    match kind {
        BackendKind::Xpq => {
            let tuning = TreeTuning {
                t,
                epsilon,
                seed,
                ..TreeTuning::default()
            };
            let mut queue = XpqQueue::new(queue_params, BudgetPolicy::Track, tuning)?;
            dijkstra(&mut graph, source, &mut queue)
        }
        BackendKind::KTree => {
            let mut queue = KTreeQueue::new(queue_params)?;
            dijkstra(&mut graph, source, &mut queue)
        }
    }
}
