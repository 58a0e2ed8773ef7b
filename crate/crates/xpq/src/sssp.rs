//! Single-source shortest paths over the external-memory queue.
//!
//! The graph lives on its own block store: a packed adjacency region of
//! `(target, weight)` word pairs, vertex-contiguous, plus an in-memory
//! offset/degree index. Fetching vertex `v`'s adjacency costs at most
//! `ceil(2*deg(v)/B) + 1` block reads (the span may straddle one extra
//! block). Keeping the graph store separate from the queue's store is what
//! lets the harness report queue I/O and adjacency I/O independently.
//!
//! Dijkstra relaxes edges through the queue's decrease-key update and
//! settles vertices with extract-min; a settled bitmap (pinned against the
//! model's memory budget) suppresses re-relaxation. Because the queue
//! supports true decrease-key, every vertex is extracted exactly once with
//! its final distance; a second extraction of a settled vertex would mean a
//! queue bug, so it is counted and surfaced.
//!
//! Graph text format (directed): a header `p sp <vertices> <edges>`, then
//! one edge per line as `u v w` (a leading `a` is tolerated for
//! shortest-path-style inputs, `c` lines are comments). Output is one
//! `v d(v)` line per vertex (`INF` when unreachable) plus an I/O trailer.

use thiserror::Error;

use crate::bench::QueueBackend;
use crate::emx::{BlockId, BlockStore, BudgetPolicy, EmxError, IoStats, ModelParams, PinToken};
use crate::pq::PqError;

/// `(source, target, weight)` triples as parsed.
pub type EdgeList = Vec<(u64, u64, u64)>;

#[derive(Debug, Error)]
pub enum SsspError {
    #[error("graph line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("vertex label {0} outside 1..={1}")]
    LabelRange(u64, u64),
    #[error("distance overflow relaxing an edge")]
    Overflow,
    #[error(transparent)]
    Queue(#[from] PqError),
    #[error(transparent)]
    Model(#[from] EmxError),
}

/// Directed graph in blocked external storage.
pub struct ExtGraph {
    store: BlockStore,
    v_count: u64,
    e_count: u64,
    /// Per vertex (1-based): start word offset and degree. Memory-resident.
    index: Vec<(u64, u64)>,
    blocks: Vec<BlockId>,
    _index_pin: PinToken,
}

impl ExtGraph {
    /// Parses the text format into `(vertex_count, edges)`.
    pub fn parse(text: &str) -> Result<(u64, EdgeList), SsspError> {
        let mut header: Option<(u64, u64)> = None;
        let mut edges = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('c') || content.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = content.split_ascii_whitespace().collect();
            let parse_u64 = |s: &str, what: &str| -> Result<u64, SsspError> {
                s.parse().map_err(|_| SsspError::Parse {
                    line,
                    msg: format!("bad {what} {s:?}"),
                })
            };
            match fields.as_slice() {
                ["p", "sp", v, e] => {
                    header = Some((parse_u64(v, "vertex count")?, parse_u64(e, "edge count")?));
                }
                ["a", u, v, w] | [u, v, w] => {
                    let (vc, _) = header.ok_or(SsspError::Parse {
                        line,
                        msg: "edge before 'p sp' header".into(),
                    })?;
                    let (u, v, w) = (
                        parse_u64(u, "source")?,
                        parse_u64(v, "target")?,
                        parse_u64(w, "weight")?,
                    );
                    if u == 0 || u > vc {
                        return Err(SsspError::LabelRange(u, vc));
                    }
                    if v == 0 || v > vc {
                        return Err(SsspError::LabelRange(v, vc));
                    }
                    edges.push((u, v, w));
                }
                _ => {
                    return Err(SsspError::Parse {
                        line,
                        msg: format!("unrecognized line {content:?}"),
                    })
                }
            }
        }
        let (vc, ec) = header.ok_or(SsspError::Parse {
            line: 0,
            msg: "missing 'p sp' header".into(),
        })?;
        if edges.len() as u64 != ec {
            return Err(SsspError::Parse {
                line: 0,
                msg: format!("header promises {ec} edges, found {}", edges.len()),
            });
        }
        Ok((vc, edges))
    }

    pub fn ingest_text(text: &str, block_words: usize) -> Result<Self, SsspError> {
        let (v_count, edges) = Self::parse(text)?;
        Self::ingest(v_count, &edges, block_words)
    }

    /// Lays the edge list out as blocked adjacency; duplicates are kept
    /// (multigraph). Writes are counted against the graph store.
    pub fn ingest(
        v_count: u64,
        edges: &[(u64, u64, u64)],
        block_words: usize,
    ) -> Result<Self, SsspError> {
        let params = ModelParams {
            n: v_count.max(2),
            b: block_words,
            m: block_words.max(2 * (v_count as usize + 1)),
            w: 64,
        };
        let mut store = BlockStore::new(params, BudgetPolicy::Track);
        // Group by source, preserving input order per vertex.
        let mut grouped: Vec<Vec<(u64, u64)>> = vec![Vec::new(); v_count as usize + 1];
        for &(u, v, w) in edges {
            if u == 0 || u > v_count {
                return Err(SsspError::LabelRange(u, v_count));
            }
            if v == 0 || v > v_count {
                return Err(SsspError::LabelRange(v, v_count));
            }
            grouped[u as usize].push((v, w));
        }
        let mut index = vec![(0u64, 0u64); v_count as usize + 1];
        let mut words: Vec<u64> = Vec::with_capacity(2 * edges.len());
        for u in 1..=v_count as usize {
            index[u] = (words.len() as u64, grouped[u].len() as u64);
            for &(v, w) in &grouped[u] {
                words.push(v);
                words.push(w);
            }
        }
        let block_count = words.len().div_ceil(block_words).max(1);
        let mut blocks = Vec::with_capacity(block_count);
        for _ in 0..block_count {
            blocks.push(store.alloc_block()?);
        }
        for (i, chunk) in words.chunks(block_words).enumerate() {
            let mut content = vec![0u64; block_words];
            content[..chunk.len()].copy_from_slice(chunk);
            store.write_block(blocks[i], &content)?;
        }
        let index_pin = store.pin(2 * (v_count as usize + 1))?;
        Ok(ExtGraph {
            store,
            v_count,
            e_count: edges.len() as u64,
            index,
            blocks,
            _index_pin: index_pin,
        })
    }

    pub fn vertex_count(&self) -> u64 {
        self.v_count
    }

    pub fn edge_count(&self) -> u64 {
        self.e_count
    }

    pub fn io_stats(&self) -> IoStats {
        self.store.snapshot_stats()
    }

    pub fn reset_io_stats(&mut self) {
        self.store.reset_stats()
    }

    /// Reads vertex `u`'s adjacency list; costs the covering block reads.
    pub fn adjacency(&mut self, u: u64) -> Result<Vec<(u64, u64)>, SsspError> {
        if u == 0 || u > self.v_count {
            return Err(SsspError::LabelRange(u, self.v_count));
        }
        let (start, deg) = self.index[u as usize];
        if deg == 0 {
            return Ok(Vec::new());
        }
        let b = self.store.params().b;
        let start = start as usize;
        let len = 2 * deg as usize;
        let first_block = start / b;
        let last_block = (start + len - 1) / b;
        let mut words = Vec::with_capacity((last_block - first_block + 1) * b);
        for idx in first_block..=last_block {
            words.extend_from_slice(self.store.read_block(self.blocks[idx])?);
        }
        let lo = start - first_block * b;
        Ok(words[lo..lo + len]
            .chunks_exact(2)
            .map(|p| (p[0], p[1]))
            .collect())
    }

    /// Re-reads every adjacency list (for round-trip checks).
    pub fn enumerate_edges(&mut self) -> Result<Vec<(u64, u64, u64)>, SsspError> {
        let mut out = Vec::with_capacity(self.e_count as usize);
        for u in 1..=self.v_count {
            for (v, w) in self.adjacency(u)? {
                out.push((u, v, w));
            }
        }
        Ok(out)
    }
}

/// Distances plus the I/O breakdown of one run.
#[derive(Debug, Clone)]
pub struct SsspResult {
    /// 1-based; `None` = unreachable.
    pub dist: Vec<Option<u64>>,
    pub queue_io: IoStats,
    pub adjacency_io: IoStats,
    pub queue_peak_pinned: usize,
    pub updates_issued: u64,
    pub extracts_issued: u64,
    /// Extractions of already-settled vertices. Always zero for a correct
    /// decrease-key queue; counted so a regression is loud.
    pub stale_extractions: u64,
}

impl SsspResult {
    pub fn render(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        for (v, d) in self.dist.iter().enumerate().skip(1) {
            match d {
                Some(d) => writeln!(out, "{v} {d}").unwrap(),
                None => writeln!(out, "{v} INF").unwrap(),
            }
        }
        writeln!(
            out,
            "# io queue reads={} writes={} total={} peak_pinned={}",
            self.queue_io.reads,
            self.queue_io.writes,
            self.queue_io.total(),
            self.queue_peak_pinned,
        )
        .unwrap();
        writeln!(
            out,
            "# io adjacency reads={} writes={} total={}",
            self.adjacency_io.reads,
            self.adjacency_io.writes,
            self.adjacency_io.total(),
        )
        .unwrap();
        writeln!(
            out,
            "# ops updates={} extracts={} stale={}",
            self.updates_issued, self.extracts_issued, self.stale_extractions
        )
        .unwrap();
        out
    }
}

/// Dijkstra from `source`, relaxing through `queue.update` (decrease-key)
/// and settling with `queue.extract_min`. The queue must be freshly built
/// with `N >= |V|`.
pub fn dijkstra<Q: QueueBackend>(
    graph: &mut ExtGraph,
    source: u64,
    queue: &mut Q,
) -> Result<SsspResult, SsspError> {
    let v_count = graph.vertex_count();
    if source == 0 || source > v_count {
        return Err(SsspError::LabelRange(source, v_count));
    }
    let io_queue_base = queue.io_stats();
    let io_graph_base = graph.io_stats();
    // Settled bitmap: |V| bits of the model's working memory.
    let bitmap_words = (v_count as usize + 1).div_ceil(64);
    let bitmap_pin = queue.pin_words(bitmap_words)?;
    let mut settled = vec![0u64; bitmap_words];
    let is_settled =
        |bm: &[u64], v: u64| bm[v as usize / 64] & (1 << (v as usize % 64)) != 0;

    let mut dist: Vec<Option<u64>> = vec![None; v_count as usize + 1];
    let mut updates_issued = 1u64;
    let mut extracts_issued = 0u64;
    let mut stale_extractions = 0u64;
    queue.update(source, 0)?;
    while let Some(entry) = queue.extract_min()? {
        extracts_issued += 1;
        let u = entry.key;
        if is_settled(&settled, u) {
            stale_extractions += 1;
            continue;
        }
        settled[u as usize / 64] |= 1 << (u as usize % 64);
        dist[u as usize] = Some(entry.priority);
        for (v, w) in graph.adjacency(u)? {
            if is_settled(&settled, v) {
                continue;
            }
            let candidate = entry
                .priority
                .checked_add(w)
                .filter(|&d| d <= queue.max_priority())
                .ok_or(SsspError::Overflow)?;
            queue.update(v, candidate)?;
            updates_issued += 1;
        }
    }
    queue.unpin_words(bitmap_pin);
    Ok(SsspResult {
        dist,
        queue_io: queue.io_stats().since(io_queue_base),
        adjacency_io: graph.io_stats().since(io_graph_base),
        queue_peak_pinned: queue.peak_pinned(),
        updates_issued,
        extracts_issued,
        stale_extractions,
    })
}
