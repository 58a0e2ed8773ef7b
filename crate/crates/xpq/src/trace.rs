//! Operation trace format.
//!
//! One operation per line, `#` starts a comment:
//!
//! ```text
//! U <key> <priority>    update (insert / decrease-key)
//! D <key>               delete
//! X                     extract-min
//! ```
//!
//! Traces are plain ASCII and byte-stable: formatting then parsing then
//! formatting again reproduces the identical bytes.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceOp {
    Update { key: u64, priority: u64 },
    Delete { key: u64 },
    ExtractMin,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TraceError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub fn format_trace(ops: &[TraceOp]) -> String {
    let mut out = String::new();
    for op in ops {
        match op {
            TraceOp::Update { key, priority } => writeln!(out, "U {key} {priority}").unwrap(),
            TraceOp::Delete { key } => writeln!(out, "D {key}").unwrap(),
            TraceOp::ExtractMin => out.push_str("X\n"),
        }
    }
    out
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceOp>, TraceError> {
    let mut ops = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.trim();
        if content.is_empty() || content.starts_with('#') {
            continue;
        }
        let mut fields = content.split_ascii_whitespace();
        let tag = fields.next().unwrap();
        let mut number = |what: &str| -> Result<u64, TraceError> {
            fields
                .next()
                .ok_or_else(|| TraceError::Parse {
                    line,
                    msg: format!("missing {what}"),
                })?
                .parse()
                .map_err(|_| TraceError::Parse {
                    line,
                    msg: format!("bad {what}"),
                })
        };
        let op = match tag {
            "U" => TraceOp::Update {
                key: number("key")?,
                priority: number("priority")?,
            },
            "D" => TraceOp::Delete {
                key: number("key")?,
            },
            "X" => TraceOp::ExtractMin,
            other => {
                return Err(TraceError::Parse {
                    line,
                    msg: format!("unknown op {other:?}"),
                })
            }
        };
        if fields.next().is_some() {
            return Err(TraceError::Parse {
                line,
                msg: "trailing fields".into(),
            });
        }
        ops.push(op);
    }
    Ok(ops)
}
