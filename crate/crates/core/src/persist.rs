//! `tracegraph/1` trace files (`.trace.json`) and Graphviz export (`.dot`).
//!
//! The canonical form sorts every array so that equal graphs serialize to
//! identical bytes: sessions by the start of their first member operation,
//! operations by `ts_start`, variables by first-version timestamp and
//! edges by `(dst ts, src ts)`. Remaining ties fall back to ids.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{
    DependencyEdge, ExecutionGraph, Metadata, OperationRecord, Session, Tick, VariableChain, ViolationCode,
};

pub const FORMAT_VERSION: &str = "tracegraph/1";
pub const TRACE_EXTENSION: &str = ".trace.json";
pub const DOT_EXTENSION: &str = ".dot";

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("state error: {0}")]
    State(String),
    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },
    #[error("validation error {code}: {message}")]
    Validation { code: ViolationCode, message: String },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceFile {
    format_version: String,
    graph_id: String,
    metadata: Metadata,
    sessions: Vec<Session>,
    operations: Vec<OperationRecord>,
    variables: Vec<VariableChain>,
    edges: Vec<DependencyEdge>,
}

/// Serializes a sealed graph. `canonical = false` keeps insertion order.
pub fn export(graph: &ExecutionGraph, canonical: bool) -> Result<Vec<u8>, PersistError> {
    if !graph.is_sealed() {
        return Err(PersistError::State("graph must be sealed before export".into()));
    }
    let mut file = TraceFile {
        format_version: FORMAT_VERSION.to_string(),
        graph_id: graph.graph_id.clone(),
        metadata: graph.metadata.clone(),
        sessions: graph.sessions.clone(),
        operations: graph.operations.values().cloned().collect(),
        variables: graph.variables.values().cloned().collect(),
        edges: graph.edges.clone(),
    };
    if canonical {
        canonicalize(graph, &mut file);
    }
    let mut bytes = serde_json::to_vec_pretty(&file).expect("trace file serializes");
    bytes.push(b'\n');
    Ok(bytes)
}

fn canonicalize(graph: &ExecutionGraph, file: &mut TraceFile) {
    let op_start = |id: &str| graph.operations.get(id).map_or(Tick::MAX, |o| o.ts_start);
    file.sessions.sort_by(|a, b| {
        let ka = a.operation_ids.first().map_or(Tick::MAX, |id| op_start(id));
        let kb = b.operation_ids.first().map_or(Tick::MAX, |id| op_start(id));
        (ka, &a.session_id).cmp(&(kb, &b.session_id))
    });
    file.operations
        .sort_by(|a, b| (a.ts_start, &a.op_id).cmp(&(b.ts_start, &b.op_id)));
    file.variables.sort_by(|a, b| {
        (a.first_ts().unwrap_or(Tick::MAX), &a.var_id).cmp(&(b.first_ts().unwrap_or(Tick::MAX), &b.var_id))
    });
    let ts = |r: &crate::graph::VarRef| graph.ts_of(r).unwrap_or(Tick::MAX);
    file.edges.sort_by(|a, b| {
        (ts(&a.dst), ts(&a.src), &a.op_id, &a.src, &a.dst, &a.comment).cmp(&(
            ts(&b.dst),
            ts(&b.src),
            &b.op_id,
            &b.src,
            &b.dst,
            &b.comment,
        ))
    });
}

fn byte_offset(text: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let mut offset = 0;
    for (i, l) in text.split(|&b| b == b'\n').enumerate() {
        if i + 1 == line {
            return (offset + column.saturating_sub(1)).min(text.len());
        }
        offset += l.len() + 1;
    }
    text.len()
}

/// Parses a trace file without validating it. Duplicate ids are still
/// rejected because the in-memory maps cannot hold them.
pub fn parse(bytes: &[u8]) -> Result<ExecutionGraph, PersistError> {
    let file: TraceFile = serde_json::from_slice(bytes).map_err(|e| PersistError::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    if file.format_version != FORMAT_VERSION {
        return Err(PersistError::Parse {
            offset: 0,
            message: format!("unsupported format_version `{}`", file.format_version),
        });
    }
    let mut graph = ExecutionGraph::new(file.graph_id);
    graph.metadata = file.metadata;
    let mut seen = HashSet::new();
    for s in &file.sessions {
        if !seen.insert(s.session_id.clone()) {
            return Err(duplicate("session", &s.session_id));
        }
    }
    graph.sessions = file.sessions;
    for op in file.operations {
        if graph.operations.contains_key(&op.op_id) {
            return Err(duplicate("operation", &op.op_id));
        }
        graph.operations.insert(op.op_id.clone(), op);
    }
    for var in file.variables {
        if graph.variables.contains_key(&var.var_id) {
            return Err(duplicate("variable", &var.var_id));
        }
        graph.variables.insert(var.var_id.clone(), var);
    }
    graph.edges = file.edges;
    Ok(graph)
}

/// Parses and validates a trace file. The returned graph is sealed.
pub fn import(bytes: &[u8]) -> Result<ExecutionGraph, PersistError> {
    let mut graph = parse(bytes)?;
    let report = graph.validate();
    if let Some(v) = report.first_error() {
        return Err(PersistError::Validation {
            code: v.code,
            message: format!("{}: {}", v.subject, v.message),
        });
    }
    let stamps = graph
        .operations
        .values()
        .map(|o| o.ts_end.max(o.ts_start))
        .chain(graph.variables.values().flat_map(|c| c.versions.iter().map(|v| v.ts)));
    graph.clock = stamps.max().map_or(0, |t| t + 1);
    graph.seal();
    Ok(graph)
}

fn duplicate(kind: &str, id: &str) -> PersistError {
    PersistError::Validation {
        code: ViolationCode::DuplicateId,
        message: format!("{kind} id `{id}` appears more than once"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DotOptions {
    pub max_value_chars: usize,
}

impl Default for DotOptions {
    fn default() -> Self {
        Self { max_value_chars: 60 }
    }
}

fn dot_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            '\r' => {}
            c => out.push(c),
        }
    }
    out
}

pub fn truncate_chars(s: &str, max: usize) -> String {
    if s.chars().count() <= max {
        s.to_string()
    } else {
        let mut t: String = s.chars().take(max).collect();
        t.push('…');
        t
    }
}

/// Static Graphviz rendering: one ellipse per variable version, one box per
/// operation, edges routed `src -> op -> dst`.
pub fn export_dot(graph: &ExecutionGraph, options: DotOptions) -> Vec<u8> {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", dot_escape(&graph.graph_id));
    out.push_str("  rankdir=LR;\n");
    out.push_str("  node [fontname=\"monospace\"];\n");

    enum Node<'a> {
        Op(&'a OperationRecord),
        Var(&'a VariableChain, usize),
    }
    let mut nodes: Vec<(Tick, String, Node)> = Vec::new();
    for op in graph.operations.values() {
        nodes.push((op.ts_start, op.op_id.clone(), Node::Op(op)));
    }
    for chain in graph.variables.values() {
        for (i, v) in chain.versions.iter().enumerate() {
            nodes.push((v.ts, chain.var_id.clone(), Node::Var(chain, i)));
        }
    }
    nodes.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    for (_, _, node) in &nodes {
        match node {
            Node::Op(op) => {
                let label = format!("{} {}\n({})", op.op_id, op.name, op.category);
                let _ = writeln!(
                    out,
                    "  \"op:{}\" [shape=box, label=\"{}\"];",
                    dot_escape(&op.op_id),
                    dot_escape(&label)
                );
            }
            Node::Var(chain, i) => {
                let v = &chain.versions[*i];
                let label = format!(
                    "{}#{} [{}]\n{}",
                    chain.var_id,
                    v.version,
                    chain.category,
                    truncate_chars(&v.value, options.max_value_chars)
                );
                let _ = writeln!(
                    out,
                    "  \"var:{}#{}\" [shape=ellipse, label=\"{}\"];",
                    dot_escape(&chain.var_id),
                    v.version,
                    dot_escape(&label)
                );
            }
        }
    }

    let mut edges: Vec<&DependencyEdge> = graph.edges.iter().collect();
    let ts = |r: &crate::graph::VarRef| graph.ts_of(r).unwrap_or(Tick::MAX);
    edges.sort_by(|a, b| {
        (ts(&a.dst), ts(&a.src), &a.op_id, &a.src, &a.dst).cmp(&(ts(&b.dst), ts(&b.src), &b.op_id, &b.src, &b.dst))
    });
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for e in edges {
        let op = format!("\"op:{}\"", dot_escape(&e.op_id));
        let src = format!("\"var:{}\"", dot_escape(&e.src.to_string()));
        let dst = format!("\"var:{}\"", dot_escape(&e.dst.to_string()));
        for line in [format!("  {src} -> {op};"), format!("  {op} -> {dst};")] {
            if seen.insert(line.clone()) {
                out.push_str(&line);
                out.push('\n');
            }
        }
    }
    out.push_str("}\n");
    out.into_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::VarRef;
    use crate::recorder::{Endpoint, TraceContext, VarConfig};

    fn small() -> ExecutionGraph {
        let mut ctx = TraceContext::new("small");
        ctx.begin_session("memory_construction", "", Metadata::new()).unwrap();
        let msg = ctx
            .comment_variable("Dave said \"hi\"\nthen left", &VarConfig::new("raw_message"))
            .unwrap();
        ctx.begin_operation("extract_facts", "llm", "", Metadata::new())
            .unwrap();
        ctx.comment_link(
            &msg,
            Endpoint::snapshot("fact", VarConfig::new("memory_unit")),
            "",
            Metadata::new(),
        )
        .unwrap();
        ctx.end_operation().unwrap();
        ctx.finish().unwrap()
    }

    #[test]
    fn empty_graph_export() {
        let g = TraceContext::new("empty").finish().unwrap();
        let text = String::from_utf8(export(&g, true).unwrap()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["sessions", "operations", "variables", "edges"] {
            assert_eq!(v[key], serde_json::json!([]));
        }
        assert_eq!(v["format_version"], FORMAT_VERSION);
    }

    #[test]
    fn unsealed_export_is_rejected() {
        let g = ExecutionGraph::new("x");
        assert!(matches!(export(&g, true), Err(PersistError::State(_))));
    }

    #[test]
    fn roundtrip_fixed_point() {
        let g = small();
        let a = export(&g, true).unwrap();
        let back = import(&a).unwrap();
        assert_eq!(back, g);
        assert_eq!(export(&back, true).unwrap(), a);
        assert_eq!(import(&export(&g, false).unwrap()).unwrap(), g);
    }

    #[test]
    fn truncated_document_is_parse_error() {
        let bytes = export(&small(), true).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match import(cut) {
            Err(PersistError::Parse { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_endpoint_is_validation_error() {
        let mut g = small();
        g.edges[0].dst = VarRef::new("ghost", 0);
        let bytes = export(&g, true).unwrap();
        match import(&bytes) {
            Err(PersistError::Validation { code, .. }) => assert_eq!(code, ViolationCode::MissingEndpoint),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn dot_counts() {
        let g = small();
        let dot = String::from_utf8(export_dot(&g, DotOptions::default())).unwrap();
        assert_eq!(dot.lines().filter(|l| l.contains("[shape=")).count(), 3);
        assert_eq!(dot.lines().filter(|l| l.contains("->")).count(), 2);
        assert!(dot.contains("Dave said \\\"hi\\\"\\nthen left"));
        let empty = TraceContext::new("e").finish().unwrap();
        let dot = String::from_utf8(export_dot(&empty, DotOptions::default())).unwrap();
        assert_eq!(
            dot,
            "digraph \"e\" {\n  rankdir=LR;\n  node [fontname=\"monospace\"];\n}\n"
        );
    }

    #[test]
    fn dot_truncates_values() {
        let g = small();
        let dot = String::from_utf8(export_dot(&g, DotOptions { max_value_chars: 4 })).unwrap();
        assert!(dot.contains("Dave…"));
        assert!(!dot.contains("Dave said"));
    }
}
