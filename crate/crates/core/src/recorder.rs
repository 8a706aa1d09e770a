//! Explicit instrumentation API used by traced programs to build an
//! [`ExecutionGraph`].
//!
//! Programs open sessions, mark flat (non-nested) operations, register
//! variable snapshots with [`TraceContext::comment_variable`] and connect
//! them with [`TraceContext::comment_link`] while an operation is active.
//! Snapshots that resolve to an existing identity key extend that
//! variable's version chain instead of creating a new variable.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::graph::{
    DependencyEdge, ExecutionGraph, GraphError, Metadata, OperationRecord, Session, VarRef, VariableChain,
    VariableVersion,
};

pub const BY_RENDER: &str = "by-render";
pub const BY_FIELD_PREFIX: &str = "by-field:";
pub const MEM0_DICT: &str = "mem0-dict";
pub const TEXT_RENDERER: &str = "text";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RecorderError {
    #[error("state error: {0}")]
    State(String),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

type KeyFn = dyn Fn(&str) -> Option<String> + Send + Sync;
type RenderFn = dyn Fn(&str) -> String + Send + Sync;

/// Maps a value snapshot to the identity key that decides which variable
/// chain the snapshot belongs to. Must be pure.
#[derive(Clone)]
pub struct IdentityStrategy {
    name: String,
    key_fn: Arc<KeyFn>,
}

impl IdentityStrategy {
    pub fn new(name: impl Into<String>, key_fn: impl Fn(&str) -> Option<String> + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            key_fn: Arc::new(key_fn),
        }
    }

    /// Key = FNV-1a hash of the rendered snapshot.
    pub fn by_render() -> Self {
        Self::new(BY_RENDER, |s| Some(format!("{:016x}", fnv1a64(s.as_bytes()))))
    }

    /// Key = value of `field` in a `key=value` per-line rendering.
    pub fn by_field(field: &str) -> Self {
        let owned = field.to_string();
        Self::new(format!("{BY_FIELD_PREFIX}{field}"), move |s| {
            field_value(s, &owned).map(|v| format!("{owned}={v}"))
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn key(&self, snapshot: &str) -> Option<String> {
        (self.key_fn)(snapshot)
    }
}

impl fmt::Debug for IdentityStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IdentityStrategy").field("name", &self.name).finish()
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Looks up `field` in a rendering made of `name=value` lines.
pub fn field_value<'a>(rendering: &'a str, field: &str) -> Option<&'a str> {
    rendering.lines().find_map(|line| {
        let (k, v) = line.split_once('=')?;
        (k.trim() == field).then(|| v.trim())
    })
}

/// Tracing configuration for one `comment_variable` call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VarConfig {
    pub category: String,
    pub comment: String,
    pub metadata: Metadata,
    pub identity: String,
    pub renderer: String,
}

impl VarConfig {
    pub fn new(category: impl Into<String>) -> Self {
        Self {
            category: category.into(),
            comment: String::new(),
            metadata: Metadata::new(),
            identity: BY_RENDER.to_string(),
            renderer: TEXT_RENDERER.to_string(),
        }
    }

    pub fn comment(mut self, comment: impl Into<String>) -> Self {
        self.comment = comment.into();
        self
    }

    pub fn identity(mut self, strategy: impl Into<String>) -> Self {
        self.identity = strategy.into();
        self
    }

    pub fn renderer(mut self, renderer: impl Into<String>) -> Self {
        self.renderer = renderer.into();
        self
    }

    pub fn meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.metadata.insert(key.into(), value.into());
        self
    }
}

/// One side of a `comment_link` call: an existing version handle, or a
/// snapshot that is materialized through `comment_variable` first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Var(VarRef),
    Snapshot { value: String, config: VarConfig },
}

impl Endpoint {
    pub fn snapshot(value: impl Into<String>, config: VarConfig) -> Self {
        Endpoint::Snapshot {
            value: value.into(),
            config,
        }
    }
}

impl From<VarRef> for Endpoint {
    fn from(r: VarRef) -> Self {
        Endpoint::Var(r)
    }
}

impl From<&VarRef> for Endpoint {
    fn from(r: &VarRef) -> Self {
        Endpoint::Var(r.clone())
    }
}

/// Global tracing context for one graph. Single-threaded; one context per
/// recorded graph.
pub struct TraceContext {
    graph: ExecutionGraph,
    active_session: Option<String>,
    active_op: Option<String>,
    identities: BTreeMap<String, IdentityStrategy>,
    renderers: BTreeMap<String, Arc<RenderFn>>,
    /// identity_key -> var_id
    by_key: HashMap<String, String>,
    finished: bool,
}

impl TraceContext {
    pub fn new(graph_id: impl Into<String>) -> Self {
        let mut identities = BTreeMap::new();
        identities.insert(BY_RENDER.to_string(), IdentityStrategy::by_render());
        let mem0 = IdentityStrategy::by_field("id");
        identities.insert(
            MEM0_DICT.to_string(),
            IdentityStrategy {
                name: MEM0_DICT.to_string(),
                key_fn: mem0.key_fn,
            },
        );
        let mut renderers: BTreeMap<String, Arc<RenderFn>> = BTreeMap::new();
        renderers.insert(TEXT_RENDERER.to_string(), Arc::new(|s: &str| s.to_string()));
        Self {
            graph: ExecutionGraph::new(graph_id),
            active_session: None,
            active_op: None,
            identities,
            renderers,
            by_key: HashMap::new(),
            finished: false,
        }
    }

    pub fn graph(&self) -> &ExecutionGraph {
        &self.graph
    }

    pub fn active_session(&self) -> Option<&str> {
        self.active_session.as_deref()
    }

    pub fn active_operation(&self) -> Option<&str> {
        self.active_op.as_deref()
    }

    fn ensure_open(&self) -> Result<(), RecorderError> {
        if self.finished {
            Err(RecorderError::State("trace already finished".into()))
        } else {
            Ok(())
        }
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) -> Result<(), RecorderError> {
        self.ensure_open()?;
        self.graph.metadata.insert(key.into(), value.into());
        Ok(())
    }

    pub fn register_identity(&mut self, strategy: IdentityStrategy) -> Result<(), RecorderError> {
        self.ensure_open()?;
        if self.identities.contains_key(strategy.name()) {
            return Err(RecorderError::Config(format!(
                "identity strategy `{}` already registered",
                strategy.name()
            )));
        }
        self.identities.insert(strategy.name().to_string(), strategy);
        Ok(())
    }

    pub fn register_renderer(
        &mut self,
        name: impl Into<String>,
        render: impl Fn(&str) -> String + Send + Sync + 'static,
    ) -> Result<(), RecorderError> {
        self.ensure_open()?;
        let name = name.into();
        if self.renderers.contains_key(&name) {
            return Err(RecorderError::Config(format!("renderer `{name}` already registered")));
        }
        self.renderers.insert(name, Arc::new(render));
        Ok(())
    }

    fn strategy(&self, name: &str) -> Result<IdentityStrategy, RecorderError> {
        if let Some(s) = self.identities.get(name) {
            return Ok(s.clone());
        }
        match name.strip_prefix(BY_FIELD_PREFIX) {
            Some(field) if !field.is_empty() => Ok(IdentityStrategy::by_field(field)),
            _ => Err(RecorderError::Config(format!(
                "identity strategy `{name}` is not registered"
            ))),
        }
    }

    pub fn begin_session(
        &mut self,
        label: impl Into<String>,
        comment: impl Into<String>,
        metadata: Metadata,
    ) -> Result<String, RecorderError> {
        self.ensure_open()?;
        if let Some(op) = &self.active_op {
            return Err(RecorderError::State(format!(
                "cannot begin a session inside operation `{op}`"
            )));
        }
        let session_id = format!("s{}", self.graph.sessions.len());
        self.graph.sessions.push(Session {
            session_id: session_id.clone(),
            label: label.into(),
            comment: comment.into(),
            metadata,
            operation_ids: Vec::new(),
        });
        self.active_session = Some(session_id.clone());
        Ok(session_id)
    }

    pub fn end_session(&mut self) -> Result<(), RecorderError> {
        self.ensure_open()?;
        if let Some(op) = &self.active_op {
            return Err(RecorderError::State(format!("operation `{op}` still active")));
        }
        if self.active_session.take().is_none() {
            return Err(RecorderError::State("no active session to end".into()));
        }
        Ok(())
    }

    pub fn begin_operation(
        &mut self,
        name: impl Into<String>,
        category: impl Into<String>,
        comment: impl Into<String>,
        metadata: Metadata,
    ) -> Result<String, RecorderError> {
        self.ensure_open()?;
        let Some(session_id) = self.active_session.clone() else {
            return Err(RecorderError::State(
                "begin_operation requires an active session".into(),
            ));
        };
        if let Some(op) = &self.active_op {
            return Err(RecorderError::State(format!(
                "operation `{op}` already active; operations do not nest"
            )));
        }
        let op_id = format!("o{}", self.graph.operations.len());
        let ts = self.graph.next_tick();
        self.graph.operations.insert(
            op_id.clone(),
            OperationRecord {
                op_id: op_id.clone(),
                session_id: session_id.clone(),
                name: name.into(),
                category: category.into(),
                comment: comment.into(),
                metadata,
                ts_start: ts,
                ts_end: ts,
            },
        );
        if let Some(s) = self.graph.sessions.iter_mut().find(|s| s.session_id == session_id) {
            s.operation_ids.push(op_id.clone());
        }
        self.active_op = Some(op_id.clone());
        Ok(op_id)
    }

    pub fn end_operation(&mut self) -> Result<(), RecorderError> {
        self.ensure_open()?;
        let Some(op_id) = self.active_op.take() else {
            return Err(RecorderError::State("no active operation to end".into()));
        };
        let ts = self.graph.next_tick();
        if let Some(op) = self.graph.operations.get_mut(&op_id) {
            op.ts_end = ts;
        }
        Ok(())
    }

    /// Records a snapshot. A snapshot whose identity key already names a
    /// chain becomes that chain's next version.
    pub fn comment_variable(&mut self, snapshot: &str, config: &VarConfig) -> Result<VarRef, RecorderError> {
        self.ensure_open()?;
        let strategy = self.strategy(&config.identity)?;
        let render = self
            .renderers
            .get(&config.renderer)
            .cloned()
            .ok_or_else(|| RecorderError::Config(format!("renderer `{}` is not registered", config.renderer)))?;
        let value = render(snapshot);
        let key = strategy.key(&value).ok_or_else(|| {
            RecorderError::Config(format!(
                "identity strategy `{}` cannot derive a key from the snapshot",
                strategy.name()
            ))
        })?;
        let ts = self.graph.next_tick();
        let version = VariableVersion {
            version: 0,
            ts,
            value,
            comment: config.comment.clone(),
            metadata: config.metadata.clone(),
        };
        if let Some(var_id) = self.by_key.get(&key) {
            let chain = self
                .graph
                .variables
                .get_mut(var_id)
                .expect("identity registry points at a recorded chain");
            let n = chain.versions.len() as u32;
            chain.versions.push(VariableVersion { version: n, ..version });
            return Ok(VarRef::new(var_id.clone(), n));
        }
        let var_id = format!("v{}", self.graph.variables.len());
        self.graph.variables.insert(
            var_id.clone(),
            VariableChain {
                var_id: var_id.clone(),
                identity_key: key.clone(),
                category: config.category.clone(),
                versions: vec![version],
            },
        );
        self.by_key.insert(key, var_id.clone());
        Ok(VarRef::new(var_id, 0))
    }

    fn materialize(&mut self, endpoint: Endpoint) -> Result<VarRef, RecorderError> {
        match endpoint {
            Endpoint::Var(r) => {
                self.graph.version(&r)?;
                Ok(r)
            }
            Endpoint::Snapshot { value, config } => self.comment_variable(&value, &config),
        }
    }

    /// Appends a copy of `r` as the newest version of its chain.
    fn reversion(&mut self, r: &VarRef) -> Result<VarRef, RecorderError> {
        let old = self.graph.version(r)?.clone();
        let ts = self.graph.next_tick();
        let chain = self
            .graph
            .variables
            .get_mut(&r.var_id)
            .ok_or_else(|| GraphError::UnknownVariable(r.var_id.clone()))?;
        let n = chain.versions.len() as u32;
        let mut metadata = old.metadata;
        metadata.insert("reversioned_from".into(), r.to_string());
        chain.versions.push(VariableVersion {
            version: n,
            ts,
            value: old.value,
            comment: old.comment,
            metadata,
        });
        Ok(VarRef::new(r.var_id.clone(), n))
    }

    /// Records a dependency edge labelled with the active operation. A
    /// destination that is not newer than the source is re-versioned so
    /// the edge always points forward in time.
    pub fn comment_link(
        &mut self,
        source: impl Into<Endpoint>,
        target: impl Into<Endpoint>,
        comment: impl Into<String>,
        metadata: Metadata,
    ) -> Result<DependencyEdge, RecorderError> {
        self.ensure_open()?;
        let Some(op_id) = self.active_op.clone() else {
            return Err(RecorderError::State("comment_link requires an active operation".into()));
        };
        let src = self.materialize(source.into())?;
        let mut dst = self.materialize(target.into())?;
        let src_ts = self.graph.ts_of(&src).expect("materialized");
        let dst_ts = self.graph.ts_of(&dst).expect("materialized");
        if dst_ts <= src_ts {
            dst = self.reversion(&dst)?;
        }
        let edge = DependencyEdge {
            src,
            dst,
            op_id,
            comment: comment.into(),
            metadata,
        };
        self.graph.edges.push(edge.clone());
        Ok(edge)
    }

    /// Seals and returns the graph. The context rejects every later call.
    pub fn finish(&mut self) -> Result<ExecutionGraph, RecorderError> {
        self.ensure_open()?;
        if let Some(op) = &self.active_op {
            return Err(RecorderError::State(format!(
                "cannot finish while operation `{op}` is active"
            )));
        }
        let report = self.graph.validate();
        if let Some(v) = report.first_error() {
            return Err(RecorderError::State(format!("recorded graph is invalid: {v}")));
        }
        self.finished = true;
        self.active_session = None;
        let mut graph = std::mem::take(&mut self.graph);
        graph.seal();
        Ok(graph)
    }
}
