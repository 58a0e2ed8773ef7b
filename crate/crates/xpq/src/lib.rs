//! An I/O-efficient priority queue with DecreaseKey on a simulated
//! external-memory model, plus the scaffolding to verify and measure it.
//!
//! - [`emx`]: simulated disk of `B`-word blocks with I/O counting and an
//!   `M`-word memory budget.
//! - [`filter`]: deletable approximate-membership filter (false positives
//!   only) used as the per-node key summary.
//! - [`pq`]: the queue itself — a static t-ary tree of disk-resident nodes
//!   with entry lists, signal buffers, todo buffers, filters, and boundary
//!   values.
//! - [`oracle`]: exact reference queue, priority evaluators, and the
//!   seven-point invariant checker used by the test harness.
//! - [`baseline`]: the classic binary tournament-tree queue with `M`-sized
//!   nodes, for amortized-cost comparison.
//! - [`sssp`]: external-memory Dijkstra over the queue with a blocked
//!   adjacency layout.
//! - [`trace`] / [`workload`] / [`mod@bench`]: trace format, deterministic
//!   workload generation, differential testing, and I/O-cost reporting.

pub mod baseline;
pub mod bench;
pub mod emx;
pub mod filter;
pub mod oracle;
pub mod pq;
pub mod sssp;
pub mod trace;
pub mod workload;
// modules above are re-enabled incrementally during bring-up

pub use emx::{BlockStore, BudgetPolicy, IoStats, ModelParams, Word};
pub use pq::{Entry, Signal, XpqQueue, INF};
