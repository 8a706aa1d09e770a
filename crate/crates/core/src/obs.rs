//! Search-based attribution over a flat operation log: every operation
//! becomes a text block with its attributes and input, output and
//! intermediate snapshots, but no edges and no variable ids.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{self, usize_arg, AgentError, CaseSpec, Environment, ExploreConfig, Run, StepOutcome};
use crate::attribution::AttributionResult;
use crate::explorer::{excerpt, paginate, shared_case_statement, shared_system_instruction, ExplorerError};
use crate::graph::{ExecutionGraph, Metadata, VarRef};
use crate::model::{Backend, ChatTurn, RetryPolicy, ToolCall, ToolSpec};

pub const SEPARATOR: &str = "===== OPERATION BLOCK =====";
pub const OPLOG_EXTENSION: &str = ".oplog.txt";
pub const DEFAULT_SEARCH_LIMIT: usize = 8;
pub const MAX_EXCERPTS: usize = 3;
pub const OBS_EXCERPT_CHARS: usize = 120;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ObsError {
    #[error("invalid regex: {0}")]
    Regex(String),
    #[error("block {0} does not exist")]
    NoSuchBlock(usize),
    #[error(transparent)]
    Page(#[from] ExplorerError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub category: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationBlock {
    pub block_index: usize,
    pub op_id: String,
    pub name: String,
    pub category: String,
    pub comment: String,
    pub metadata: Metadata,
    pub inputs: Vec<Snapshot>,
    pub outputs: Vec<Snapshot>,
    pub intermediates: Vec<Snapshot>,
}

fn section(out: &mut String, title: &str, snaps: &[Snapshot]) {
    let _ = writeln!(out, "[{title}]");
    for s in snaps {
        let mut lines = s.value.lines();
        let _ = writeln!(out, "- ({}) {}", s.category, lines.next().unwrap_or(""));
        for line in lines {
            let _ = writeln!(out, "  {line}");
        }
    }
}

impl OperationBlock {
    /// Block body without the separator line.
    pub fn text(&self) -> String {
        let mut out = String::from("[HEADER]\n");
        let _ = writeln!(out, "block: {}", self.block_index);
        let _ = writeln!(out, "op_id: {}", self.op_id);
        let _ = writeln!(out, "name: {}", self.name);
        let _ = writeln!(out, "category: {}", self.category);
        let _ = writeln!(out, "comment: {}", self.comment);
        let meta: Vec<String> = self.metadata.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let _ = writeln!(out, "metadata: {}", meta.join("; "));
        section(&mut out, "INPUTS", &self.inputs);
        section(&mut out, "OUTPUTS", &self.outputs);
        section(&mut out, "INTERMEDIATES", &self.intermediates);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct OperationLog {
    blocks: Vec<OperationBlock>,
    texts: Vec<String>,
}

impl OperationLog {
    pub fn from_blocks(blocks: Vec<OperationBlock>) -> Self {
        let texts = blocks.iter().map(OperationBlock::text).collect();
        Self { blocks, texts }
    }

    pub fn blocks(&self) -> &[OperationBlock] {
        &self.blocks
    }

    pub fn block_text(&self, i: usize) -> Option<&str> {
        self.texts.get(i).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// The `.oplog.txt` form: each block preceded by the separator line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.texts {
            out.push_str(SEPARATOR);
            out.push('\n');
            out.push_str(t);
        }
        out
    }
}

fn snapshots(graph: &ExecutionGraph, refs: &BTreeSet<VarRef>) -> Vec<Snapshot> {
    let mut refs: Vec<&VarRef> = refs.iter().collect();
    refs.sort_by_key(|r| (graph.ts_of(r), *r));
    refs.into_iter()
        .filter_map(|r| {
            Some(Snapshot {
                category: graph.variable(&r.var_id).ok()?.category.clone(),
                value: graph.version(r).ok()?.value.clone(),
            })
        })
        .collect()
}

/// One block per operation, ordered by (ts_start, op_id). A variable read
/// and written by the same operation (in any versions) is listed only
/// under INTERMEDIATES.
pub fn build_log(graph: &ExecutionGraph) -> OperationLog {
    let index = graph.index();
    let mut ops: Vec<_> = graph.operations.values().collect();
    ops.sort_by(|a, b| (a.ts_start, &a.op_id).cmp(&(b.ts_start, &b.op_id)));
    let blocks = ops
        .into_iter()
        .enumerate()
        .map(|(i, op)| {
            let ins: BTreeSet<VarRef> = index.inputs_of(&op.op_id).unwrap_or_default().into_iter().collect();
            let outs: BTreeSet<VarRef> = index.outputs_of(&op.op_id).unwrap_or_default().into_iter().collect();
            let in_ids: BTreeSet<&str> = ins.iter().map(|r| r.var_id.as_str()).collect();
            let out_ids: BTreeSet<&str> = outs.iter().map(|r| r.var_id.as_str()).collect();
            let shared: BTreeSet<&str> = in_ids.intersection(&out_ids).copied().collect();
            let (mid_in, pure_in): (BTreeSet<VarRef>, BTreeSet<VarRef>) =
                ins.iter().cloned().partition(|r| shared.contains(r.var_id.as_str()));
            let (mid_out, pure_out): (BTreeSet<VarRef>, BTreeSet<VarRef>) =
                outs.iter().cloned().partition(|r| shared.contains(r.var_id.as_str()));
            let mid: BTreeSet<VarRef> = mid_in.union(&mid_out).cloned().collect();
            OperationBlock {
                block_index: i,
                op_id: op.op_id.clone(),
                name: op.name.clone(),
                category: op.category.clone(),
                comment: op.comment.clone(),
                metadata: op.metadata.clone(),
                inputs: snapshots(graph, &pure_in),
                outputs: snapshots(graph, &pure_out),
                intermediates: snapshots(graph, &mid),
            }
        })
        .collect();
    OperationLog::from_blocks(blocks)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub block_index: usize,
    pub op_id: String,
    pub excerpts: Vec<String>,
}

/// Blocks whose text matches, ascending, at most `limit`; each with up to
/// [`MAX_EXCERPTS`] excerpts (newlines shown as spaces) around its first
/// matches.
pub fn search_operations(log: &OperationLog, pattern: &str, limit: usize) -> Result<Vec<SearchHit>, ObsError> {
    let re = Regex::new(pattern).map_err(|e| ObsError::Regex(e.to_string()))?;
    Ok(log
        .blocks
        .iter()
        .zip(&log.texts)
        .filter(|(_, text)| re.is_match(text))
        .take(limit)
        .map(|(b, text)| SearchHit {
            block_index: b.block_index,
            op_id: b.op_id.clone(),
            excerpts: re
                .find_iter(text)
                .take(MAX_EXCERPTS)
                .map(|m| {
                    let offset = text[..m.start()].chars().count();
                    excerpt(text, offset, OBS_EXCERPT_CHARS).replace('\n', " ")
                })
                .collect(),
        })
        .collect())
}

pub fn view_block(log: &OperationLog, index: usize, page: usize, page_size: usize) -> Result<String, ObsError> {
    let text = log.block_text(index).ok_or(ObsError::NoSuchBlock(index))?;
    let (body, pages) = paginate(text, page_size, page)?;
    Ok(format!("{SEPARATOR}\n{body}[page {} of {pages}]", page + 1))
}

pub fn obs_tools() -> Vec<ToolSpec> {
    vec![
        ToolSpec::new(
            "search_operations",
            "Regex search over all operation blocks; returns matching block indices, op ids and excerpts.",
            &[
                ("regex", "pattern"),
                ("limit", "maximum number of returned blocks, default 8"),
            ],
        ),
        ToolSpec::new(
            "view_block",
            "Show one page of an operation block.",
            &[("index", "block index"), ("page", "page number from 0")],
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

pub struct ObsState {
    log: OperationLog,
    page_size: usize,
    default_limit: usize,
}

impl ObsState {
    pub fn new(graph: &ExecutionGraph, page_size: usize, default_limit: usize) -> Self {
        Self {
            log: build_log(graph),
            page_size,
            default_limit,
        }
    }

    pub fn log(&self) -> &OperationLog {
        &self.log
    }

    fn step(&self, call: &ToolCall) -> Result<StepOutcome, String> {
        let text = match call.tool.as_str() {
            "search_operations" => {
                let pattern = call.arg("regex").ok_or("search_operations needs `regex`")?;
                let limit = usize_arg(call, "limit", self.default_limit)?;
                let hits = search_operations(&self.log, pattern, limit).map_err(|e| e.to_string())?;
                let mut out = format!("{} block(s) returned\n", hits.len());
                for h in hits {
                    let _ = writeln!(out, "block {} (op {}):", h.block_index, h.op_id);
                    for ex in h.excerpts {
                        let _ = writeln!(out, "  ... {ex} ...");
                    }
                }
                out
            }
            "view_block" => {
                let index = call
                    .arg("index")
                    .ok_or("view_block needs `index`")?
                    .trim()
                    .parse()
                    .map_err(|_| "`index` must be a block number".to_string())?;
                let page = usize_arg(call, "page", 0)?;
                view_block(&self.log, index, page, self.page_size).map_err(|e| e.to_string())?
            }
            "report_fault" => {
                let (op_id, error_type, explanation) = agent::parse_report(call)?;
                if !self.log.blocks.iter().any(|b| b.op_id == op_id) {
                    return Err(format!("operation `{op_id}` does not exist"));
                }
                return Ok(StepOutcome::Report {
                    op_id,
                    error_type,
                    explanation,
                });
            }
            other => return Err(format!("unknown tool `{other}`")),
        };
        Ok(StepOutcome::Observation(text))
    }
}

impl Environment for ObsState {
    fn tools(&self) -> Vec<ToolSpec> {
        obs_tools()
    }

    fn apply(&mut self, call: &ToolCall) -> StepOutcome {
        self.step(call)
            .unwrap_or_else(|e| StepOutcome::Observation(format!("tool error: {e}")))
    }
}

const INTRO: &str = "You are debugging a failed run of a memory-augmented assistant. Its execution is \
given as a log of operation blocks in time order, each listing the operation's attributes and the values \
it read, wrote or rewrote. Search the log, read the relevant blocks and judge which operation is faulty.";

pub fn run_attribution_obs_with(
    graph: &ExecutionGraph,
    case: &CaseSpec,
    backend: &dyn Backend,
    config: &ExploreConfig,
    retry: &RetryPolicy,
    check: &mut dyn FnMut(u64),
) -> Result<Run, AgentError> {
    config.validate()?;
    let mut state = ObsState::new(graph, config.page_size_chars, config.search_limit);
    let tools = obs_tools();
    let pinned = vec![
        ChatTurn::system(shared_system_instruction(
            &tools,
            INTRO,
            config.prior_knowledge.as_deref(),
        )),
        ChatTurn::user(format!(
            "{}\nThe log has {} operation blocks.",
            shared_case_statement(graph, case),
            state.log.len()
        )),
    ];
    agent::drive(&mut state, pinned, &case.case_id, backend, config, retry, check)
}

pub fn run_attribution_obs(
    graph: &ExecutionGraph,
    case: &CaseSpec,
    backend: &dyn Backend,
    config: &ExploreConfig,
) -> Result<AttributionResult, AgentError> {
    run_attribution_obs_with(graph, case, backend, config, &RetryPolicy::default(), &mut |_| {}).map(|r| r.result)
}
