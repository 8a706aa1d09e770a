//! Graph-walking attribution agent: a bounded, earliest-first to-explore
//! list of variable versions, textual operation subgraphs, and targeted
//! variable access through pagination and regex search.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;

use regex::Regex;
use thiserror::Error;

use crate::agent::{self, usize_arg, Environment, StepOutcome};
use crate::graph::{ExecutionGraph, GraphError, GraphIndex, Tick, VarRef};
use crate::model::{render_tool_schema, Backend, ChatTurn, RetryPolicy, ToolCall, ToolSpec};
use crate::retrieval::{seed_exploration, EmbeddingProvider, HashingEmbedder, RetrievalError, DEFAULT_EMBED_DIM};

pub use crate::agent::{AgentError, CaseSpec, ExploreConfig, Run, WorkingContext};
pub use crate::attribution::AttributionResult;

pub const EXCERPT_CHARS: usize = 80;
pub const DEFAULT_MAX_HITS: usize = 5;
pub const EMPTY_LIST: &str = "to-explore list is empty";
pub const POPPED: &str = "POPPED";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExplorerError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("page {page} out of range; {pages} page(s) available")]
    Range { page: usize, pages: usize },
    #[error("tool error: {0}")]
    Tool(String),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl From<GraphError> for ExplorerError {
    fn from(e: GraphError) -> Self {
        ExplorerError::NotFound(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Preview,
    Full,
}

impl std::str::FromStr for RenderMode {
    type Err = ExplorerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "" | "preview" => Ok(RenderMode::Preview),
            "full" => Ok(RenderMode::Full),
            other => Err(ExplorerError::Tool(format!(
                "mode must be `preview` or `full`, got `{other}`"
            ))),
        }
    }
}

/// Splits `text` into pages of `size` chars; empty text has one page.
pub fn paginate(text: &str, size: usize, page: usize) -> Result<(String, usize), ExplorerError> {
    let chars: Vec<char> = text.chars().collect();
    let pages = chars.len().div_ceil(size).max(1);
    if page >= pages {
        return Err(ExplorerError::Range { page, pages });
    }
    let end = ((page + 1) * size).min(chars.len());
    Ok((chars[page * size..end].iter().collect(), pages))
}

fn indent_value(out: &mut String, value: &str) {
    for line in value.lines() {
        let _ = writeln!(out, "      | {line}");
    }
    if value.is_empty() {
        out.push_str("      | \n");
    }
}

fn var_line(out: &mut String, graph: &ExecutionGraph, r: &VarRef, mode: RenderMode) {
    let (category, ts, value, comment) = match (graph.variable(&r.var_id), graph.version(r)) {
        (Ok(chain), Ok(v)) => (chain.category.as_str(), v.ts, v.value.as_str(), v.comment.as_str()),
        _ => ("?", 0, "", ""),
    };
    let _ = write!(out, "  {r} [{category}] ts={ts}");
    if !comment.is_empty() {
        let _ = write!(out, " -- {comment}");
    }
    out.push('\n');
    if mode == RenderMode::Full {
        indent_value(out, value);
    }
}

/// Text rendering of one operation's local subgraph. Preview mode never
/// includes variable values; full mode is paginated.
pub fn render_operation_subgraph(
    index: &GraphIndex<'_>,
    op_id: &str,
    mode: RenderMode,
    page: usize,
    page_size: usize,
) -> Result<String, ExplorerError> {
    let graph = index.graph();
    let op = graph
        .operation(op_id)
        .map_err(|_| ExplorerError::NotFound(format!("operation `{op_id}`")))?;
    let mut out = String::new();
    let _ = writeln!(out, "operation {}", op.op_id);
    let _ = writeln!(out, "name: {}", op.name);
    let _ = writeln!(out, "category: {}", op.category);
    let _ = writeln!(out, "comment: {}", op.comment);
    let _ = writeln!(out, "session: {}", op.session_id);
    let _ = writeln!(out, "ts: {}..{}", op.ts_start, op.ts_end);
    if !op.metadata.is_empty() {
        let meta: Vec<String> = op.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "metadata: {}", meta.join("; "));
    }
    out.push_str("inputs:\n");
    for r in index.inputs_of(op_id)? {
        var_line(&mut out, graph, &r, mode);
    }
    out.push_str("outputs:\n");
    for r in index.outputs_of(op_id)? {
        var_line(&mut out, graph, &r, mode);
    }
    out.push_str("dependencies:\n");
    let mut deps: Vec<_> = index.edges_of(op_id).collect();
    deps.sort_by(|a, b| (&a.src, &a.dst, &a.comment).cmp(&(&b.src, &b.dst, &b.comment)));
    for e in deps {
        let _ = write!(out, "  {} -> {}", e.src, e.dst);
        if !e.comment.is_empty() {
            let _ = write!(out, " ({})", e.comment);
        }
        out.push('\n');
    }
    match mode {
        RenderMode::Preview if page > 0 => Err(ExplorerError::Range { page, pages: 1 }),
        RenderMode::Preview => Ok(out),
        RenderMode::Full => {
            let (text, pages) = paginate(&out, page_size, page)?;
            Ok(if pages > 1 {
                format!("{text}\n[page {} of {pages}]", page + 1)
            } else {
                text
            })
        }
    }
}

pub fn read_variable(
    graph: &ExecutionGraph,
    r: &VarRef,
    page: usize,
    page_size: usize,
) -> Result<String, ExplorerError> {
    let v = graph
        .version(r)
        .map_err(|_| ExplorerError::NotFound(format!("variable `{r}`")))?;
    let (text, pages) = paginate(&v.value, page_size, page)?;
    Ok(format!("{r} page {} of {pages}:\n{text}", page + 1))
}

/// Non-overlapping regex hits as (char offset, excerpt of at most
/// [`EXCERPT_CHARS`] chars starting a little before the match).
pub fn search_variable(
    graph: &ExecutionGraph,
    r: &VarRef,
    pattern: &str,
    max_hits: usize,
) -> Result<Vec<(usize, String)>, ExplorerError> {
    let v = graph
        .version(r)
        .map_err(|_| ExplorerError::NotFound(format!("variable `{r}`")))?;
    let re = Regex::new(pattern).map_err(|e| ExplorerError::Tool(format!("invalid regex: {e}")))?;
    Ok(re
        .find_iter(&v.value)
        .take(max_hits)
        .map(|m| {
            let offset = v.value[..m.start()].chars().count();
            (offset, excerpt(&v.value, offset, EXCERPT_CHARS))
        })
        .collect())
}

/// `width` chars of `text` around char `offset`, with a quarter of the
/// window as leading context.
pub fn excerpt(text: &str, offset: usize, width: usize) -> String {
    let start = offset.saturating_sub(width / 4);
    text.chars().skip(start).take(width).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rejection {
    AlreadyListed,
    AlreadyExplored,
    Capacity,
}

impl Rejection {
    pub fn as_str(self) -> &'static str {
        match self {
            Rejection::AlreadyListed => "already listed",
            Rejection::AlreadyExplored => "already explored",
            Rejection::Capacity => "list at capacity",
        }
    }
}

/// Bounded min-priority list keyed by (timestamp, var id, version).
/// Popped entries are remembered and never re-admitted.
#[derive(Debug, Clone)]
pub struct ToExploreList {
    capacity: usize,
    entries: BTreeSet<(Tick, VarRef)>,
    members: HashSet<VarRef>,
    explored: HashSet<VarRef>,
}

impl ToExploreList {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: BTreeSet::new(),
            members: HashSet::new(),
            explored: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn contains(&self, r: &VarRef) -> bool {
        self.members.contains(r)
    }

    pub fn is_explored(&self, r: &VarRef) -> bool {
        self.explored.contains(r)
    }

    pub fn insert(&mut self, r: VarRef, ts: Tick) -> Result<(), Rejection> {
        if self.explored.contains(&r) {
            return Err(Rejection::AlreadyExplored);
        }
        if self.members.contains(&r) {
            return Err(Rejection::AlreadyListed);
        }
        if self.entries.len() >= self.capacity {
            return Err(Rejection::Capacity);
        }
        self.members.insert(r.clone());
        self.entries.insert((ts, r));
        Ok(())
    }

    /// Removes and returns the earliest entry, marking it explored.
    pub fn pop(&mut self) -> Option<(Tick, VarRef)> {
        let (ts, r) = self.entries.pop_first()?;
        self.members.remove(&r);
        self.explored.insert(r.clone());
        Some((ts, r))
    }

    pub fn iter(&self) -> impl Iterator<Item = &(Tick, VarRef)> {
        self.entries.iter()
    }
}

pub fn explorer_tools() -> Vec<ToolSpec> {
    vec![
        ToolSpec::new(
            "pop_next",
            "Remove the earliest variable from the to-explore list and list the operations that read or write it.",
            &[],
        ),
        ToolSpec::new(
            "list_ops",
            "List operations involving a variable version (default: the one under exploration).",
            &[("var", "optional variable version such as v3#0")],
        ),
        ToolSpec::new(
            "view_op",
            "Show an operation subgraph: attributes, inputs, outputs and dependency edges.",
            &[
                ("op_id", "operation id"),
                ("mode", "`preview` (no values, default) or `full` (values, paginated)"),
                ("page", "page number for full mode, from 0"),
            ],
        ),
        ToolSpec::new(
            "read_var",
            "Read one page of a variable version's value.",
            &[("var", "variable version such as v3#0"), ("page", "page number from 0")],
        ),
        ToolSpec::new(
            "search_var",
            "Regex search inside a variable version's value; returns char offsets and excerpts.",
            &[
                ("var", "variable version such as v3#0"),
                ("regex", "pattern"),
                ("max_hits", "maximum number of hits, default 5"),
            ],
        ),
        ToolSpec::new(
            "add_to_explore",
            "Queue variable versions for later exploration.",
            &[("vars", "comma-separated variable versions")],
        ),
        ToolSpec::new(
            "report_fault",
            "Finish by naming the decisive faulty operation.",
            &[
                ("op_id", "operation id"),
                (
                    "error_type",
                    "one of annotation, judge, extraction, update, deletion, retrieval, response",
                ),
                ("explanation", "why this operation is the decisive error"),
            ],
        ),
    ]
}

fn system_instruction(tools: &[ToolSpec], intro: &str, prior: Option<&str>) -> String {
    let mut s = format!(
        "{intro}\n\n{}\n\nError types: annotation, judge, extraction, update, deletion, retrieval, response.\n\n{}",
        agent::CRITERION,
        render_tool_schema(tools)
    );
    if let Some(p) = prior {
        let _ = write!(s, "\nPipeline description:\n{p}\n");
    }
    s
}

/// Tool environment over one graph.
pub struct ExplorerState<'g> {
    index: GraphIndex<'g>,
    list: ToExploreList,
    current: Option<VarRef>,
    page_size: usize,
}

impl<'g> ExplorerState<'g> {
    pub fn new(graph: &'g ExecutionGraph, capacity: usize, page_size: usize) -> Self {
        Self {
            index: graph.index(),
            list: ToExploreList::new(capacity),
            current: None,
            page_size,
        }
    }

    pub fn list(&self) -> &ToExploreList {
        &self.list
    }

    pub fn current(&self) -> Option<&VarRef> {
        self.current.as_ref()
    }

    fn graph(&self) -> &'g ExecutionGraph {
        self.index.graph()
    }

    /// Adds vars in order; returns the accepted ones and the rejected
    /// ones with reasons.
    pub fn add(&mut self, vars: &[VarRef]) -> (Vec<VarRef>, Vec<(String, &'static str)>) {
        let (mut ok, mut rejected) = (Vec::new(), Vec::new());
        for r in vars {
            let Some(ts) = self.graph().ts_of(r) else {
                rejected.push((r.to_string(), "unknown variable version"));
                continue;
            };
            match self.list.insert(r.clone(), ts) {
                Ok(()) => ok.push(r.clone()),
                Err(why) => rejected.push((r.to_string(), why.as_str())),
            }
        }
        (ok, rejected)
    }

    fn ops_listing(&self, r: &VarRef) -> Result<String, ExplorerError> {
        let mut out = String::new();
        let producers: BTreeSet<&str> = self.index.producers_of(r).into_iter().collect();
        let consumers: BTreeSet<&str> = self.index.consumers_of(r).into_iter().collect();
        for op_id in self.index.ops_involving(&r.var_id, Some(r.version))? {
            let op = self.graph().operation(&op_id)?;
            let role = match (producers.contains(op_id.as_str()), consumers.contains(op_id.as_str())) {
                (true, true) => "writes and reads",
                (true, false) => "writes",
                (false, true) => "reads",
                (false, false) => "touches",
            };
            let _ = writeln!(out, "  {} {} [{}] {role} {r}", op.op_id, op.name, op.category);
        }
        if out.is_empty() {
            out.push_str("  (none)\n");
        }
        Ok(out)
    }

    fn var_arg(&self, call: &ToolCall, name: &str) -> Result<VarRef, ExplorerError> {
        match call.arg(name).map(str::trim) {
            Some(s) if !s.is_empty() => s
                .parse()
                .map_err(|_| ExplorerError::Tool(format!("`{s}` is not a variable version like v3#0"))),
            _ => self
                .current
                .clone()
                .ok_or_else(|| ExplorerError::Tool(format!("argument `{name}` is required"))),
        }
    }

    fn step(&mut self, call: &ToolCall) -> Result<StepOutcome, ExplorerError> {
        let tool = |e: String| ExplorerError::Tool(e);
        let text = match call.tool.as_str() {
            "pop_next" => match self.list.pop() {
                None => EMPTY_LIST.to_string(),
                Some((ts, r)) => {
                    self.current = Some(r.clone());
                    let category = &self.graph().variable(&r.var_id)?.category;
                    format!(
                        "{POPPED} {r} [{category}] ts={ts}; {} left in list\noperations:\n{}",
                        self.list.len(),
                        self.ops_listing(&r)?
                    )
                }
            },
            "list_ops" => {
                let r = self.var_arg(call, "var")?;
                self.graph().version(&r)?;
                format!("operations involving {r}:\n{}", self.ops_listing(&r)?)
            }
            "view_op" => {
                let op_id = call.arg("op_id").map(str::trim).unwrap_or("");
                if op_id.is_empty() {
                    return Err(tool("view_op needs `op_id`".into()));
                }
                let mode: RenderMode = call.arg("mode").unwrap_or("preview").parse()?;
                let page = usize_arg(call, "page", 0).map_err(tool)?;
                render_operation_subgraph(&self.index, op_id, mode, page, self.page_size)?
            }
            "read_var" => {
                let r = self.var_arg(call, "var")?;
                let page = usize_arg(call, "page", 0).map_err(tool)?;
                read_variable(self.graph(), &r, page, self.page_size)?
            }
            "search_var" => {
                let r = self.var_arg(call, "var")?;
                let pattern = call
                    .arg("regex")
                    .ok_or_else(|| tool("search_var needs `regex`".into()))?;
                let max_hits = usize_arg(call, "max_hits", DEFAULT_MAX_HITS).map_err(tool)?;
                let hits = search_variable(self.graph(), &r, pattern, max_hits)?;
                let mut out = format!("{} hit(s) in {r}\n", hits.len());
                for (offset, ex) in hits {
                    let _ = writeln!(out, "  @{offset}: {ex}");
                }
                out
            }
            "add_to_explore" => {
                let raw = call.arg("vars").unwrap_or("");
                let mut vars = Vec::new();
                let mut rejected: Vec<(String, &str)> = Vec::new();
                for item in raw.split([',', ' ']).map(str::trim).filter(|s| !s.is_empty()) {
                    match item.parse::<VarRef>() {
                        Ok(r) => vars.push(r),
                        Err(_) => rejected.push((item.to_string(), "not a variable version")),
                    }
                }
                if vars.is_empty() && rejected.is_empty() {
                    return Err(tool("add_to_explore needs `vars`".into()));
                }
                let (ok, more) = self.add(&vars);
                rejected.extend(more);
                let mut out = format!(
                    "accepted {}: {}",
                    ok.len(),
                    ok.iter().map(VarRef::to_string).collect::<Vec<_>>().join(", ")
                );
                if !rejected.is_empty() {
                    let _ = write!(
                        out,
                        "\nrejected {}: {}",
                        rejected.len(),
                        rejected
                            .iter()
                            .map(|(v, why)| format!("{v} ({why})"))
                            .collect::<Vec<_>>()
                            .join(", ")
                    );
                }
                let _ = write!(out, "\nlist size {}/{}", self.list.len(), self.list.capacity());
                out
            }
            "report_fault" => {
                let (op_id, error_type, explanation) = agent::parse_report(call).map_err(tool)?;
                self.graph()
                    .operation(&op_id)
                    .map_err(|_| ExplorerError::NotFound(format!("operation `{op_id}`")))?;
                return Ok(StepOutcome::Report {
                    op_id,
                    error_type,
                    explanation,
                });
            }
            other => return Err(tool(format!("unknown tool `{other}`"))),
        };
        Ok(StepOutcome::Observation(text))
    }
}

impl Environment for ExplorerState<'_> {
    fn tools(&self) -> Vec<ToolSpec> {
        explorer_tools()
    }

    fn apply(&mut self, call: &ToolCall) -> StepOutcome {
        explore_step(self, call)
    }
}

/// Applies one tool call. Agent mistakes become error observations.
pub fn explore_step(state: &mut ExplorerState<'_>, call: &ToolCall) -> StepOutcome {
    state.step(call).unwrap_or_else(|e| {
        StepOutcome::Observation(match e {
            ExplorerError::Tool(m) => format!("tool error: {m}"),
            other => format!("tool error: {other}"),
        })
    })
}

/// Initial list entries: the case's source evidence when configured and
/// available, otherwise retrieval-based seeds.
pub fn initial_seeds(
    graph: &ExecutionGraph,
    case: &CaseSpec,
    config: &ExploreConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<VarRef>, ExplorerError> {
    if config.seed_evidence && !case.evidence.is_empty() {
        return Ok(case.evidence.clone());
    }
    Ok(seed_exploration(
        graph,
        &case.question_var,
        &case.golden_answer,
        config.n,
        provider,
    )?)
}

fn case_statement(graph: &ExecutionGraph, case: &CaseSpec, seeded: &[VarRef], rejected: &[(String, &str)]) -> String {
    let question = graph
        .version(&case.question_var)
        .map(|v| v.value.clone())
        .unwrap_or_default();
    let mut s = format!(
        "Case {}\nQuestion ({}): {question}\nGolden answer: {}\nThe system answered this question incorrectly. \
         Find the decisive faulty operation.\nInitial to-explore list: {}",
        case.case_id,
        case.question_var,
        case.golden_answer,
        seeded.iter().map(VarRef::to_string).collect::<Vec<_>>().join(", ")
    );
    if !rejected.is_empty() {
        let names: Vec<String> = rejected.iter().map(|(v, why)| format!("{v} ({why})")).collect();
        let _ = write!(s, "\nSeeds not admitted: {}", names.join(", "));
    }
    s
}

const INTRO: &str = "You are debugging a failed run of a memory-augmented assistant. Its execution was \
recorded as a graph of operations connected through versioned variables. Explore it earliest-first: \
pop a variable, inspect the operations around it, judge whether each is faulty, and queue the output \
variables worth following.";

/// Full agent run with retrieval seeding through `provider`.
pub fn run_attribution_with(
    graph: &ExecutionGraph,
    case: &CaseSpec,
    backend: &dyn Backend,
    provider: &dyn EmbeddingProvider,
    config: &ExploreConfig,
    retry: &RetryPolicy,
    check: &mut dyn FnMut(u64),
) -> Result<Run, AgentError> {
    config.validate()?;
    let seeds = initial_seeds(graph, case, config, provider).map_err(|e| AgentError::Config(e.to_string()))?;
    let mut state = ExplorerState::new(graph, config.n, config.page_size_chars);
    let (ok, rejected) = state.add(&seeds);
    let tools = explorer_tools();
    let pinned = vec![
        ChatTurn::system(system_instruction(&tools, INTRO, config.prior_knowledge.as_deref())),
        ChatTurn::user(case_statement(graph, case, &ok, &rejected)),
    ];
    agent::drive(&mut state, pinned, &case.case_id, backend, config, retry, check)
}

/// Runs the explorer with the default hashing embedder.
pub fn run_attribution(
    graph: &ExecutionGraph,
    case: &CaseSpec,
    backend: &dyn Backend,
    config: &ExploreConfig,
) -> Result<AttributionResult, AgentError> {
    let provider = HashingEmbedder::new(DEFAULT_EMBED_DIM);
    run_attribution_with(
        graph,
        case,
        backend,
        &provider,
        config,
        &RetryPolicy::default(),
        &mut |_| {},
    )
    .map(|run| run.result)
}

pub(crate) fn shared_system_instruction(tools: &[ToolSpec], intro: &str, prior: Option<&str>) -> String {
    system_instruction(tools, intro, prior)
}

pub(crate) fn shared_case_statement(graph: &ExecutionGraph, case: &CaseSpec) -> String {
    case_statement(graph, case, &[], &[])
        .lines()
        .filter(|l| !l.starts_with("Initial to-explore list"))
        .collect::<Vec<_>>()
        .join("\n")
}
