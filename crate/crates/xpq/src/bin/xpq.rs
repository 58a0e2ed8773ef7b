//! Command-line harness: workload generation, differential replay,
//! invariant checking, I/O benchmarking, and shortest paths.
//!
//! Exit codes: 0 on success, 1 on a divergence or invariant violation,
//! 2 on usage or input errors.

use std::fs;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use xpq::bench::{self, BackendKind, DiffConfig, DiffVerdict};
use xpq::emx::{BudgetPolicy, ModelParams};
use xpq::pq::{default_epsilon, default_fanout};
use xpq::trace::{format_trace, parse_trace, TraceOp};
use xpq::workload::{gen_workload, Workload, WorkloadKind};

#[derive(Parser)]
#[command(name = "xpq", about = "external-memory priority queue harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Key universe size N.
    #[arg(long, default_value_t = 1 << 16)]
    n: u64,
    /// Block size in words.
    #[arg(long, default_value_t = 64)]
    b: usize,
    /// Memory budget in words.
    #[arg(long, default_value_t = 1 << 14)]
    m: usize,
    /// Tree fanout; defaults to max(2, floor((log2 N)^0.01)).
    #[arg(long)]
    t: Option<usize>,
    /// Filter false-positive target; defaults to 1/(log2 N)^3.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Seed (falls back to the XPQ_SEED environment variable, then 1).
    #[arg(long)]
    seed: Option<u64>,
    /// Use the formula-driven parameters (fanout and epsilon derived from
    /// N) even if --t/--epsilon are present.
    #[arg(long, default_value_t = false)]
    paper_params: bool,
}

impl ModelArgs {
    fn params(&self) -> ModelParams {
        ModelParams {
            n: self.n,
            b: self.b,
            m: self.m,
            w: 64,
        }
    }

    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| {
                std::env::var("XPQ_SEED")
                    .ok()
                    .and_then(|s| s.parse().ok())
            })
            .unwrap_or(1)
    }

    fn fanout(&self) -> Option<usize> {
        if self.paper_params {
            Some(default_fanout(self.n))
        } else {
            self.t
        }
    }

    fn eps(&self) -> Option<f64> {
        if self.paper_params {
            Some(default_epsilon(self.n))
        } else {
            self.epsilon
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic workload trace.
    Gen {
        #[command(flatten)]
        model: ModelArgs,
        /// random-mixed | insert-heavy | decrease-heavy | sorted-drain |
        /// sssp-derived
        #[arg(long, default_value = "random-mixed")]
        kind: String,
        /// Number of operations.
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        /// Output file (stdout when omitted).
        #[arg(long)]
        out: Option<String>,
    },
    /// Replay a trace on the tree queue and the reference oracle in
    /// lockstep; nonzero exit on divergence.
    Diff {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: TraceInput,
        /// Run the full invariant checker after every operation.
        #[arg(long, default_value_t = false)]
        check_invariants: bool,
        /// Force every k-th filter query positive.
        #[arg(long)]
        inject_fp: Option<u64>,
    },
    /// Replay with per-operation invariant checking (shorthand for
    /// diff --check-invariants).
    Invariants {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: TraceInput,
        #[arg(long)]
        inject_fp: Option<u64>,
    },
    /// Measure I/O cost per backend over a trace.
    Bench {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        input: TraceInput,
        /// Comma-separated backends: xpq, ktree.
        #[arg(long, default_value = "xpq,ktree")]
        backend: String,
        /// table | csv
        #[arg(long, default_value = "table")]
        format: String,
    },
    /// Single-source shortest paths over a graph file.
    Sssp {
        #[command(flatten)]
        model: ModelArgs,
        /// Graph file: `p sp V E` header then `u v w` arcs.
        #[arg(long)]
        graph: String,
        #[arg(long, default_value_t = 1)]
        source: u64,
        /// xpq | ktree
        #[arg(long, default_value = "xpq")]
        backend: String,
    },
}

#[derive(Args, Clone)]
struct TraceInput {
    /// Trace file to replay.
    #[arg(long)]
    trace: Option<String>,
    /// Generate the trace instead (workload kind).
    #[arg(long)]
    gen_kind: Option<String>,
    /// Operation count for --gen-kind.
    #[arg(long, default_value_t = 10_000)]
    ops: usize,
}

impl TraceInput {
    fn load(&self, model: &ModelArgs) -> Result<Vec<TraceOp>, String> {
        if let Some(path) = &self.trace {
            let text = fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?;
            return parse_trace(&text).map_err(|e| e.to_string());
        }
        let kind_name = self.gen_kind.as_deref().unwrap_or("random-mixed");
        let kind = WorkloadKind::parse(kind_name)
            .ok_or_else(|| format!("unknown workload kind {kind_name:?}"))?;
        Ok(gen_workload(&Workload {
            kind,
            ops: self.ops,
            n: model.n,
            seed: model.seed(),
        }))
    }
}

fn run_diff_command(
    model: &ModelArgs,
    input: &TraceInput,
    check_invariants: bool,
    inject_fp: Option<u64>,
) -> Result<bool, String> {
    let trace = input.load(model)?;
    let mut cfg = DiffConfig::new(model.params());
    cfg.t = model.fanout();
    cfg.epsilon = model.eps();
    cfg.seed = model.seed();
    cfg.check_invariants = check_invariants;
    cfg.inject_fp_every = inject_fp;
    cfg.policy = BudgetPolicy::Track;
    let outcome = bench::run_diff(&trace, &cfg).map_err(|e| e.to_string())?;
    match &outcome.verdict {
        DiffVerdict::Pass => {
            println!(
                "pass: {} ops, {} extracts, io total {}",
                outcome.ops,
                outcome.extracts,
                outcome.io.total()
            );
            for (kind, stats) in &outcome.proc_stats {
                println!(
                    "  {}: invocations={} max_transfers={} (8t budget = {})",
                    kind.name(),
                    stats.invocations,
                    stats.max_transfers,
                    8 * outcome.fanout
                );
            }
            Ok(true)
        }
        DiffVerdict::Divergence {
            op_index,
            expected,
            got,
        } => {
            println!("DIVERGENCE at op {op_index}: expected {expected:?}, got {got:?}");
            Ok(false)
        }
        DiffVerdict::InvariantViolation {
            op_index,
            first_line,
        } => {
            println!("INVARIANT VIOLATION at op {op_index}: {first_line}");
            Ok(false)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result: Result<bool, String> = match &cli.command {
        Command::Gen {
            model,
            kind,
            ops,
            out,
        } => (|| {
            let kind = WorkloadKind::parse(kind).ok_or(format!("unknown kind {kind:?}"))?;
            let trace = gen_workload(&Workload {
                kind,
                ops: *ops,
                n: model.n,
                seed: model.seed(),
            });
            let text = format_trace(&trace);
            match out {
                Some(path) => fs::write(path, text).map_err(|e| format!("{path}: {e}"))?,
                None => print!("{text}"),
            }
            Ok(true)
        })(),
        Command::Diff {
            model,
            input,
            check_invariants,
            inject_fp,
        } => run_diff_command(model, input, *check_invariants, *inject_fp),
        Command::Invariants {
            model,
            input,
            inject_fp,
        } => run_diff_command(model, input, true, *inject_fp),
        Command::Bench {
            model,
            input,
            backend,
            format,
        } => (|| {
            let trace = input.load(model)?;
            let mut kinds = Vec::new();
            for name in backend.split(',') {
                kinds.push(
                    BackendKind::parse(name.trim())
                        .ok_or_else(|| format!("unknown backend {name:?}"))?,
                );
            }
            let report = bench::run_bench(
                &trace,
                model.params(),
                model.fanout(),
                model.eps(),
                model.seed(),
                &kinds,
            )
            .map_err(|e| e.to_string())?;
            match format.as_str() {
                "csv" => print!("{}", report.render_csv()),
                "table" => print!("{}", report.render_table()),
                other => return Err(format!("unknown format {other:?}")),
            }
            Ok(true)
        })(),
        Command::Sssp {
            model,
            graph,
            source,
            backend,
        } => (|| {
            let text = fs::read_to_string(graph).map_err(|e| format!("{graph}: {e}"))?;
            let kind = BackendKind::parse(backend)
                .ok_or_else(|| format!("unknown backend {backend:?}"))?;
            let result = bench::run_sssp(
                &text,
                *source,
                kind,
                model.params(),
                model.fanout(),
                model.eps(),
                model.seed(),
            )
            .map_err(|e| e.to_string())?;
            print!("{}", result.render());
            Ok(true)
        })(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
