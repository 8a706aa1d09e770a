//! In-memory execution graph: sessions, operation records, versioned
//! variables and operation-labelled dependency edges.
//!
//! Edges connect variable versions directly and carry the id of the
//! operation that induced them. The bipartite variable/operation view
//! (`In(o)`, `Out(o)`) is derived from the edge list on demand by
//! [`GraphIndex`].

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logical clock value. Unitless, unique per graph.
pub type Tick = u64;

pub type Metadata = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("unknown operation `{0}`")]
    UnknownOperation(String),
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("unknown variable version `{0}`")]
    UnknownVersion(VarRef),
}

/// Handle to one version of a traced variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VarRef {
    pub var_id: String,
    pub version: u32,
}

impl VarRef {
    pub fn new(var_id: impl Into<String>, version: u32) -> Self {
        Self {
            var_id: var_id.into(),
            version,
        }
    }
}

impl fmt::Display for VarRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.var_id, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed variable reference `{0}` (expected <var_id>#<version>)")]
pub struct VarRefParseError(pub String);

impl FromStr for VarRef {
    type Err = VarRefParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (id, version) = s.rsplit_once('#').ok_or_else(|| VarRefParseError(s.to_string()))?;
        if id.is_empty() {
            return Err(VarRefParseError(s.to_string()));
        }
        let version = version.parse().map_err(|_| VarRefParseError(s.to_string()))?;
        Ok(VarRef::new(id, version))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub label: String,
    pub comment: String,
    pub metadata: Metadata,
    pub operation_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationRecord {
    pub op_id: String,
    pub session_id: String,
    pub name: String,
    pub category: String,
    pub comment: String,
    pub metadata: Metadata,
    pub ts_start: Tick,
    pub ts_end: Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableVersion {
    pub version: u32,
    pub ts: Tick,
    pub value: String,
    pub comment: String,
    pub metadata: Metadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableChain {
    pub var_id: String,
    pub identity_key: String,
    pub category: String,
    pub versions: Vec<VariableVersion>,
}

impl VariableChain {
    pub fn latest(&self) -> Option<&VariableVersion> {
        self.versions.last()
    }

    pub fn version(&self, version: u32) -> Option<&VariableVersion> {
        self.versions.get(version as usize).filter(|v| v.version == version)
    }

    pub fn first_ts(&self) -> Option<Tick> {
        self.versions.first().map(|v| v.ts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub src: VarRef,
    pub dst: VarRef,
    pub op_id: String,
    pub comment: String,
    pub metadata: Metadata,
}

/// A complete recorded execution.
///
/// Equality is structural: session and edge lists compare as multisets, so
/// a graph equals its canonical re-import.
#[derive(Debug, Clone, Default)]
pub struct ExecutionGraph {
    pub graph_id: String,
    pub metadata: Metadata,
    pub sessions: Vec<Session>,
    pub operations: IndexMap<String, OperationRecord>,
    pub variables: IndexMap<String, VariableChain>,
    pub edges: Vec<DependencyEdge>,
    /// Next tick to be issued.
    pub clock: Tick,
    pub(crate) sealed: bool,
}

impl PartialEq for ExecutionGraph {
    fn eq(&self, other: &Self) -> bool {
        fn sorted<T: Clone, K: Ord>(items: &[T], key: impl Fn(&T) -> K) -> Vec<T> {
            let mut v = items.to_vec();
            v.sort_by_key(|x| key(x));
            v
        }
        let edge_key = |e: &DependencyEdge| {
            (
                e.src.clone(),
                e.dst.clone(),
                e.op_id.clone(),
                e.comment.clone(),
                e.metadata.clone(),
            )
        };
        self.graph_id == other.graph_id
            && self.metadata == other.metadata
            && self.clock == other.clock
            && self.operations == other.operations
            && self.variables == other.variables
            && sorted(&self.sessions, |s| s.session_id.clone()) == sorted(&other.sessions, |s| s.session_id.clone())
            && sorted(&self.edges, edge_key) == sorted(&other.edges, edge_key)
    }
}

impl Eq for ExecutionGraph {}

impl ExecutionGraph {
    pub fn new(graph_id: impl Into<String>) -> Self {
        Self {
            graph_id: graph_id.into(),
            ..Self::default()
        }
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Marks the graph immutable for the recorder and makes it exportable.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    pub(crate) fn next_tick(&mut self) -> Tick {
        let t = self.clock;
        self.clock += 1;
        t
    }

    pub fn operation(&self, op_id: &str) -> Result<&OperationRecord, GraphError> {
        self.operations
            .get(op_id)
            .ok_or_else(|| GraphError::UnknownOperation(op_id.to_string()))
    }

    pub fn variable(&self, var_id: &str) -> Result<&VariableChain, GraphError> {
        self.variables
            .get(var_id)
            .ok_or_else(|| GraphError::UnknownVariable(var_id.to_string()))
    }

    pub fn version(&self, r: &VarRef) -> Result<&VariableVersion, GraphError> {
        self.variable(&r.var_id)?
            .version(r.version)
            .ok_or_else(|| GraphError::UnknownVersion(r.clone()))
    }

    pub fn ts_of(&self, r: &VarRef) -> Option<Tick> {
        self.variables
            .get(&r.var_id)
            .and_then(|c| c.version(r.version))
            .map(|v| v.ts)
    }

    pub fn version_count(&self) -> usize {
        self.variables.values().map(|c| c.versions.len()).sum()
    }

    /// Variables of one category, in insertion order.
    pub fn variables_in_category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a VariableChain> + 'a {
        self.variables.values().filter(move |c| c.category == category)
    }

    pub fn index(&self) -> GraphIndex<'_> {
        GraphIndex::new(self)
    }

    pub fn inputs_of(&self, op_id: &str) -> Result<Vec<VarRef>, GraphError> {
        self.index().inputs_of(op_id)
    }

    pub fn outputs_of(&self, op_id: &str) -> Result<Vec<VarRef>, GraphError> {
        self.index().outputs_of(op_id)
    }

    pub fn ops_involving(&self, var_id: &str, version: Option<u32>) -> Result<Vec<String>, GraphError> {
        self.index().ops_involving(var_id, version)
    }

    pub fn op_ancestors<S: AsRef<str>>(&self, ops: &[S]) -> Result<BTreeSet<String>, GraphError> {
        self.index().op_ancestors(ops)
    }

    pub fn op_descendants<S: AsRef<str>>(&self, ops: &[S]) -> Result<BTreeSet<String>, GraphError> {
        self.index().op_descendants(ops)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }
}

/// Derived lookup tables over an [`ExecutionGraph`].
pub struct GraphIndex<'g> {
    graph: &'g ExecutionGraph,
    inputs: HashMap<&'g str, BTreeSet<VarRef>>,
    outputs: HashMap<&'g str, BTreeSet<VarRef>>,
    /// (var_id, version) -> ops reading it
    consumers: HashMap<VarRef, BTreeSet<&'g str>>,
    producers: HashMap<VarRef, BTreeSet<&'g str>>,
    dag: OpDag,
}

impl<'g> GraphIndex<'g> {
    pub fn new(graph: &'g ExecutionGraph) -> Self {
        let mut inputs: HashMap<&str, BTreeSet<VarRef>> = HashMap::new();
        let mut outputs: HashMap<&str, BTreeSet<VarRef>> = HashMap::new();
        let mut consumers: HashMap<VarRef, BTreeSet<&str>> = HashMap::new();
        let mut producers: HashMap<VarRef, BTreeSet<&str>> = HashMap::new();
        for e in &graph.edges {
            inputs.entry(&e.op_id).or_default().insert(e.src.clone());
            outputs.entry(&e.op_id).or_default().insert(e.dst.clone());
            consumers.entry(e.src.clone()).or_default().insert(&e.op_id);
            producers.entry(e.dst.clone()).or_default().insert(&e.op_id);
        }
        let dag = OpDag::build(graph, &outputs, &consumers);
        Self {
            graph,
            inputs,
            outputs,
            consumers,
            producers,
            dag,
        }
    }

    pub fn graph(&self) -> &'g ExecutionGraph {
        self.graph
    }

    pub fn dag(&self) -> &OpDag {
        &self.dag
    }

    fn check_op(&self, op_id: &str) -> Result<(), GraphError> {
        self.graph.operation(op_id).map(|_| ())
    }

    /// `In(o)`: sources of all edges labelled with `op_id`, ordered by
    /// (var_id, version).
    pub fn inputs_of(&self, op_id: &str) -> Result<Vec<VarRef>, GraphError> {
        self.check_op(op_id)?;
        Ok(self
            .inputs
            .get(op_id)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default())
    }

    /// `Out(o)`: destinations of all edges labelled with `op_id`.
    pub fn outputs_of(&self, op_id: &str) -> Result<Vec<VarRef>, GraphError> {
        self.check_op(op_id)?;
        Ok(self
            .outputs
            .get(op_id)
            .map(|s| s.iter().cloned().collect())
            .unwrap_or_default())
    }

    /// Operations that consume or produce the variable (any version when
    /// `version` is `None`), ordered by `ts_start` then id.
    pub fn ops_involving(&self, var_id: &str, version: Option<u32>) -> Result<Vec<String>, GraphError> {
        let chain = self.graph.variable(var_id)?;
        let mut found: BTreeSet<&str> = BTreeSet::new();
        let versions: Vec<u32> = match version {
            Some(v) => vec![v],
            None => chain.versions.iter().map(|v| v.version).collect(),
        };
        for v in versions {
            let r = VarRef::new(var_id, v);
            for map in [&self.consumers, &self.producers] {
                if let Some(ops) = map.get(&r) {
                    found.extend(ops.iter().copied());
                }
            }
        }
        Ok(self.sort_ops(found.into_iter()))
    }

    pub fn producers_of(&self, r: &VarRef) -> Vec<&'g str> {
        self.producers
            .get(r)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn consumers_of(&self, r: &VarRef) -> Vec<&'g str> {
        self.consumers
            .get(r)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Edges labelled with `op_id`, in recording order.
    pub fn edges_of<'a>(&'a self, op_id: &'a str) -> impl Iterator<Item = &'g DependencyEdge> + 'a {
        self.graph.edges.iter().filter(move |e| e.op_id == op_id)
    }

    fn sort_ops<'a>(&self, ops: impl Iterator<Item = &'a str>) -> Vec<String> {
        let mut v: Vec<(Tick, &str)> = ops
            .map(|id| {
                let ts = self.graph.operations.get(id).map_or(Tick::MAX, |o| o.ts_start);
                (ts, id)
            })
            .collect();
        v.sort();
        v.into_iter().map(|(_, id)| id.to_string()).collect()
    }

    fn resolve<S: AsRef<str>>(&self, ops: &[S]) -> Result<Vec<usize>, GraphError> {
        ops.iter()
            .map(|id| {
                self.dag
                    .position(id.as_ref())
                    .ok_or_else(|| GraphError::UnknownOperation(id.as_ref().to_string()))
            })
            .collect()
    }

    /// Strict upstream closure of `ops` over the operation precedence DAG.
    pub fn op_ancestors<S: AsRef<str>>(&self, ops: &[S]) -> Result<BTreeSet<String>, GraphError> {
        let seeds = self.resolve(ops)?;
        Ok(self.dag.names(&self.dag.closure(&seeds, Direction::Up)))
    }

    /// Strict downstream closure of `ops`.
    pub fn op_descendants<S: AsRef<str>>(&self, ops: &[S]) -> Result<BTreeSet<String>, GraphError> {
        let seeds = self.resolve(ops)?;
        Ok(self.dag.names(&self.dag.closure(&seeds, Direction::Down)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
}

/// Operation-level precedence graph: `a -> b` iff `Out(a) ∩ In(b) ≠ ∅`.
/// Self-loops (an op reading its own output) are dropped.
#[derive(Debug, Clone)]
pub struct OpDag {
    ids: Vec<String>,
    pos: HashMap<String, usize>,
    preds: Vec<BTreeSet<usize>>,
    succs: Vec<BTreeSet<usize>>,
}

impl OpDag {
    fn build(
        graph: &ExecutionGraph,
        outputs: &HashMap<&str, BTreeSet<VarRef>>,
        consumers: &HashMap<VarRef, BTreeSet<&str>>,
    ) -> Self {
        let mut order: Vec<(Tick, &str)> = graph
            .operations
            .values()
            .map(|o| (o.ts_start, o.op_id.as_str()))
            .collect();
        order.sort();
        let ids: Vec<String> = order.into_iter().map(|(_, id)| id.to_string()).collect();
        let pos: HashMap<String, usize> = ids.iter().enumerate().map(|(i, id)| (id.clone(), i)).collect();
        let mut preds = vec![BTreeSet::new(); ids.len()];
        let mut succs = vec![BTreeSet::new(); ids.len()];
        for (a, outs) in outputs {
            let Some(&ai) = pos.get(*a) else { continue };
            for v in outs {
                for b in consumers.get(v).into_iter().flatten() {
                    let Some(&bi) = pos.get(*b) else { continue };
                    if ai != bi {
                        succs[ai].insert(bi);
                        preds[bi].insert(ai);
                    }
                }
            }
        }
        Self { ids, pos, preds, succs }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Operation ids ordered by `ts_start`.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn position(&self, op_id: &str) -> Option<usize> {
        self.pos.get(op_id).copied()
    }

    pub fn successors(&self, i: usize) -> &BTreeSet<usize> {
        &self.succs[i]
    }

    pub fn predecessors(&self, i: usize) -> &BTreeSet<usize> {
        &self.preds[i]
    }

    /// Strict closure: the result never contains members of `seeds`.
    pub fn closure(&self, seeds: &[usize], dir: Direction) -> BTreeSet<usize> {
        let adj = match dir {
            Direction::Up => &self.preds,
            Direction::Down => &self.succs,
        };
        let mut seen: BTreeSet<usize> = BTreeSet::new();
        let mut queue: VecDeque<usize> = seeds.iter().copied().collect();
        while let Some(n) = queue.pop_front() {
            for &m in &adj[n] {
                if seen.insert(m) {
                    queue.push_back(m);
                }
            }
        }
        for s in seeds {
            seen.remove(s);
        }
        seen
    }

    pub fn names(&self, set: &BTreeSet<usize>) -> BTreeSet<String> {
        set.iter().map(|&i| self.ids[i].clone()).collect()
    }

    /// Kahn order, smallest position first among ready nodes. Nodes on or
    /// behind a cycle are missing from the result.
    fn kahn(&self) -> Vec<usize> {
        let mut indeg: Vec<usize> = self.preds.iter().map(|p| p.len()).collect();
        let mut ready: BTreeSet<usize> = (0..self.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.len());
        while let Some(n) = ready.pop_first() {
            order.push(n);
            for &m in &self.succs[n] {
                indeg[m] -= 1;
                if indeg[m] == 0 {
                    ready.insert(m);
                }
            }
        }
        order
    }

    /// Topological order of positions, or `None` when the relation is cyclic.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let order = self.kahn();
        (order.len() == self.len()).then_some(order)
    }

    /// Returns the ids of operations lying on a precedence cycle, if any.
    pub fn cyclic_ops(&self) -> Vec<String> {
        let mut removed = vec![false; self.len()];
        for i in self.kahn() {
            removed[i] = true;
        }
        (0..self.len())
            .filter(|&i| !removed[i])
            .map(|i| self.ids[i].clone())
            .collect()
    }

    /// True when every pair of operations is ordered by precedence.
    pub fn is_total_order(&self) -> bool {
        (0..self.len()).all(|i| {
            let down = self.closure(&[i], Direction::Down);
            let up = self.closure(&[i], Direction::Up);
            down.len() + up.len() + 1 == self.len()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    MissingEndpoint,
    MissingOperation,
    CycleRisk,
    SelfLink,
    OpCycle,
    DuplicateTimestamp,
    VersionSequence,
    VersionOrder,
    OpInterval,
    MissingSession,
    SessionMember,
    IdMismatch,
    DuplicateId,
    EmptyOperation,
}

impl ViolationCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationCode::MissingEndpoint => "MISSING_ENDPOINT",
            ViolationCode::MissingOperation => "MISSING_OPERATION",
            ViolationCode::CycleRisk => "CYCLE_RISK",
            ViolationCode::SelfLink => "SELF_LINK",
            ViolationCode::OpCycle => "OP_CYCLE",
            ViolationCode::DuplicateTimestamp => "DUPLICATE_TIMESTAMP",
            ViolationCode::VersionSequence => "VERSION_SEQUENCE",
            ViolationCode::VersionOrder => "VERSION_ORDER",
            ViolationCode::OpInterval => "OP_INTERVAL",
            ViolationCode::MissingSession => "MISSING_SESSION",
            ViolationCode::SessionMember => "SESSION_MEMBER",
            ViolationCode::IdMismatch => "ID_MISMATCH",
            ViolationCode::DuplicateId => "DUPLICATE_ID",
            ViolationCode::EmptyOperation => "EMPTY_OPERATION",
        }
    }

    pub fn severity(self) -> Severity {
        match self {
            ViolationCode::EmptyOperation => Severity::Warning,
            _ => Severity::Error,
        }
    }
}

impl fmt::Display for ViolationCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub severity: Severity,
    /// Offending id (operation, variable, `var#version`, session or edge index).
    pub subject: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} {} {}: {}", self.code, self.subject, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    /// No error-severity violations (warnings allowed).
    pub fn is_valid(&self) -> bool {
        self.errors().next().is_none()
    }

    pub fn errors(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Violation> {
        self.violations.iter().filter(|v| v.severity == Severity::Warning)
    }

    pub fn first_error(&self) -> Option<&Violation> {
        self.errors().next()
    }

    pub fn codes(&self) -> Vec<ViolationCode> {
        self.violations.iter().map(|v| v.code).collect()
    }

    fn push(&mut self, code: ViolationCode, subject: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            code,
            severity: code.severity(),
            subject: subject.into(),
            message: message.into(),
        });
    }
}

/// Checks every structural invariant of the graph. Violations are data;
/// this never fails.
pub fn validate(graph: &ExecutionGraph) -> ValidationReport {
    use ViolationCode::*;
    let mut report = ValidationReport::default();

    let session_ids: BTreeSet<&str> = graph.sessions.iter().map(|s| s.session_id.as_str()).collect();
    let mut members: HashMap<&str, &str> = HashMap::new();
    for s in &graph.sessions {
        let mut seen = BTreeSet::new();
        for op in &s.operation_ids {
            if !seen.insert(op.as_str()) {
                report.push(SessionMember, &s.session_id, format!("operation `{op}` listed twice"));
            } else if !graph.operations.contains_key(op) {
                report.push(SessionMember, &s.session_id, format!("member `{op}` does not exist"));
            } else {
                members.insert(op, &s.session_id);
            }
        }
    }

    let mut stamps: BTreeMap<Tick, Vec<String>> = BTreeMap::new();
    for (key, op) in &graph.operations {
        if key != &op.op_id {
            report.push(
                IdMismatch,
                key,
                format!("operation stored under `{key}` has id `{}`", op.op_id),
            );
        }
        if op.ts_start > op.ts_end {
            report.push(
                OpInterval,
                &op.op_id,
                format!("ts_start {} > ts_end {}", op.ts_start, op.ts_end),
            );
        }
        if !session_ids.contains(op.session_id.as_str()) {
            report.push(
                MissingSession,
                &op.op_id,
                format!("session `{}` does not exist", op.session_id),
            );
        } else if members.get(op.op_id.as_str()) != Some(&op.session_id.as_str()) {
            report.push(
                SessionMember,
                &op.op_id,
                format!("not listed as a member of session `{}`", op.session_id),
            );
        }
        stamps.entry(op.ts_start).or_default().push(format!("op {}", op.op_id));
        if op.ts_end != op.ts_start {
            stamps.entry(op.ts_end).or_default().push(format!("op {}", op.op_id));
        }
    }

    for (key, chain) in &graph.variables {
        if key != &chain.var_id {
            report.push(
                IdMismatch,
                key,
                format!("variable stored under `{key}` has id `{}`", chain.var_id),
            );
        }
        let mut prev: Option<Tick> = None;
        for (i, v) in chain.versions.iter().enumerate() {
            if v.version as usize != i {
                report.push(
                    VersionSequence,
                    &chain.var_id,
                    format!("position {i} holds version {}", v.version),
                );
            }
            if let Some(p) = prev {
                if v.ts <= p {
                    report.push(
                        VersionOrder,
                        format!("{}#{}", chain.var_id, v.version),
                        format!("ts {} not after previous version ts {p}", v.ts),
                    );
                }
            }
            prev = Some(v.ts);
            stamps
                .entry(v.ts)
                .or_default()
                .push(format!("var {}#{}", chain.var_id, v.version));
        }
    }

    for (t, owners) in &stamps {
        if owners.len() > 1 {
            report.push(
                DuplicateTimestamp,
                owners.join(", "),
                format!("timestamp {t} shared by {} records", owners.len()),
            );
        }
    }

    let mut labelled: BTreeSet<&str> = BTreeSet::new();
    for (i, e) in graph.edges.iter().enumerate() {
        let subject = format!("edge[{i}]");
        labelled.insert(&e.op_id);
        if !graph.operations.contains_key(&e.op_id) {
            report.push(
                MissingOperation,
                &subject,
                format!("operation `{}` does not exist", e.op_id),
            );
        }
        if e.src == e.dst {
            report.push(SelfLink, &subject, format!("source and destination are both {}", e.src));
        }
        let src_ts = graph.ts_of(&e.src);
        let dst_ts = graph.ts_of(&e.dst);
        if src_ts.is_none() {
            report.push(MissingEndpoint, &subject, format!("source {} does not exist", e.src));
        }
        if dst_ts.is_none() {
            report.push(
                MissingEndpoint,
                &subject,
                format!("destination {} does not exist", e.dst),
            );
        }
        if let (Some(s), Some(d)) = (src_ts, dst_ts) {
            if d <= s && e.src != e.dst {
                report.push(
                    CycleRisk,
                    &subject,
                    format!("destination {} (ts {d}) not after source {} (ts {s})", e.dst, e.src),
                );
            }
        }
    }

    for op in graph.operations.keys() {
        if !labelled.contains(op.as_str()) {
            report.push(EmptyOperation, op, "operation has no recorded edges");
        }
    }

    for op in graph.index().dag().cyclic_ops() {
        report.push(OpCycle, &op, "operation participates in a precedence cycle");
    }

    report
}
