//! Shared tool-calling loop for the attribution agents: budgeted turns,
//! token metering and working-context management.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{AttributionResult, ErrorType, Termination};
use crate::graph::VarRef;
use crate::model::{
    complete_with_meter, estimate_tokens, parse_tool_call, Backend, ChatTurn, CostMeter, RetryPolicy, Role, ToolCall,
    ToolSpec, DEFAULT_TEMPERATURE,
};

pub const DEFAULT_LIST_CAPACITY: usize = 16;
pub const DEFAULT_CONTEXT_THRESHOLD: u64 = 272_000;
pub const DEFAULT_MAX_ITERS: u32 = 200;
pub const DEFAULT_PAGE_SIZE: usize = 4000;
/// Unpinned turns that survive summarization untouched.
pub const KEEP_RECENT: usize = 4;
pub const SUMMARY_PREFIX: &str = "SUMMARY: ";
pub const TRUNCATION_MARK: &str = "…[truncated]";

/// First line of every summarization request; backends may key on it.
pub const SUMMARY_INSTRUCTION: &str = "Condense the exploration transcript below into a short factual summary. \
Keep every operation id, variable id and finding that matters for locating the faulty operation. \
Reply with the summary text only.";

pub use crate::attribution::CRITERION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExploreConfig {
    /// To-explore list capacity.
    pub n: usize,
    /// Working-context token threshold.
    pub t: u64,
    pub max_iters: u32,
    pub temperature: f64,
    pub page_size_chars: usize,
    /// Seed exploration with the case's source evidence instead of retrieval.
    pub seed_evidence: bool,
    /// Coarse pipeline description appended to the system instruction.
    pub prior_knowledge: Option<String>,
    /// Default `limit` for operation-log searches.
    pub search_limit: usize,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            n: DEFAULT_LIST_CAPACITY,
            t: DEFAULT_CONTEXT_THRESHOLD,
            max_iters: DEFAULT_MAX_ITERS,
            temperature: DEFAULT_TEMPERATURE,
            page_size_chars: DEFAULT_PAGE_SIZE,
            seed_evidence: false,
            prior_knowledge: None,
            search_limit: 8,
        }
    }
}

impl ExploreConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        if self.n < 2 {
            return Err(AgentError::Config("list capacity N must be at least 2".into()));
        }
        if self.max_iters == 0 {
            return Err(AgentError::Config("max_iters must be at least 1".into()));
        }
        if self.page_size_chars == 0 {
            return Err(AgentError::Config("page size must be positive".into()));
        }
        if self.search_limit == 0 {
            return Err(AgentError::Config("search limit must be positive".into()));
        }
        Ok(())
    }
}

/// What the agent is told about the failed case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: String,
    pub question_var: VarRef,
    pub golden_answer: String,
    /// Source-evidence variables, used when seeding from evidence.
    #[serde(default)]
    pub evidence: Vec<VarRef>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run aborted after {iterations} iterations: {message}")]
    Run {
        message: String,
        meter: CostMeter,
        iterations: u32,
    },
}

/// Ordered chat turns; the first `pinned` turns are never summarized.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkingContext {
    turns: Vec<ChatTurn>,
    pinned: usize,
}

impl WorkingContext {
    pub fn new(pinned: Vec<ChatTurn>) -> Self {
        let n = pinned.len();
        Self {
            turns: pinned,
            pinned: n,
        }
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn pinned(&self) -> usize {
        self.pinned
    }

    pub fn push(&mut self, turn: ChatTurn) {
        self.turns.push(turn);
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn estimate(&self) -> u64 {
        self.turns.iter().map(|t| estimate_tokens(&t.content)).sum()
    }

    fn pinned_estimate(&self) -> u64 {
        self.turns[..self.pinned]
            .iter()
            .map(|t| estimate_tokens(&t.content))
            .sum()
    }
}

/// Longest prefix of `s` whose token estimate is at most `tokens`.
fn cut_to_tokens(s: &str, tokens: u64) -> &str {
    let max_bytes = usize::try_from(tokens.saturating_mul(4)).unwrap_or(usize::MAX);
    if s.len() <= max_bytes {
        return s;
    }
    let mut end = max_bytes;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

fn transcript_text(turns: &[ChatTurn]) -> String {
    turns
        .iter()
        .map(|t| match &t.tool_name {
            Some(name) => format!("[{} {}]\n{}", t.role.as_str(), name, t.content),
            None => format!("[{}]\n{}", t.role.as_str(), t.content),
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Keeps the context estimate at or below `t`. Over budget, the oldest
/// unpinned turns (all but the most recent [`KEEP_RECENT`]) are replaced
/// by one backend-written summary turn, whose tail is cut if the context
/// is still too large. Recent turns are shortened only as a last resort.
pub fn manage_context(
    ctx: &mut WorkingContext,
    backend: &dyn Backend,
    t: u64,
    meter: &mut CostMeter,
    retry: &RetryPolicy,
) -> Result<(), AgentError> {
    if ctx.pinned_estimate() > t {
        return Err(AgentError::Config(format!(
            "pinned instructions need {} tokens, above the threshold of {t}",
            ctx.pinned_estimate()
        )));
    }
    if ctx.estimate() <= t {
        return Ok(());
    }
    let unpinned = ctx.turns.len() - ctx.pinned;
    let n_old = unpinned.saturating_sub(KEEP_RECENT);
    if n_old > 0 {
        let old: Vec<ChatTurn> = ctx.turns.drain(ctx.pinned..ctx.pinned + n_old).collect();
        let body = transcript_text(&old);
        let request = [
            ChatTurn::system(SUMMARY_INSTRUCTION),
            ChatTurn::user(cut_to_tokens(&body, t / 2)),
        ];
        let reply = complete_with_meter(backend, &request, 0.0, &[], meter, retry).map_err(|e| AgentError::Run {
            message: format!("summarization failed: {e}"),
            meter: *meter,
            iterations: 0,
        })?;
        let text = reply.content.trim();
        let text = text.strip_prefix(SUMMARY_PREFIX.trim_end()).unwrap_or(text).trim();
        ctx.turns
            .insert(ctx.pinned, ChatTurn::assistant(format!("{SUMMARY_PREFIX}{text}")));
        let total = ctx.estimate();
        if total > t {
            let summary = &ctx.turns[ctx.pinned].content;
            let others = total - estimate_tokens(summary);
            let room = t.saturating_sub(others);
            let kept = cut_to_tokens(summary, room).to_string();
            ctx.turns[ctx.pinned].content = kept;
        }
    }
    // last resort: shorten the largest recent turns
    while ctx.estimate() > t {
        let over = ctx.estimate() - t;
        let (i, _) = ctx.turns[ctx.pinned..]
            .iter()
            .enumerate()
            .max_by_key(|(i, turn)| (turn.content.len(), std::cmp::Reverse(*i)))
            .expect("over budget implies unpinned turns");
        let turn = &mut ctx.turns[ctx.pinned + i];
        let own = estimate_tokens(&turn.content);
        let mark = estimate_tokens(TRUNCATION_MARK);
        let keep = own.saturating_sub(over + mark);
        let mut cut = cut_to_tokens(&turn.content, keep).to_string();
        if !cut.is_empty() || own > mark {
            cut.push_str(TRUNCATION_MARK);
        }
        if estimate_tokens(&cut) >= own {
            cut.clear();
        }
        turn.content = cut;
    }
    Ok(())
}

/// Result of applying one tool call.
#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Observation(String),
    Report {
        op_id: String,
        error_type: ErrorType,
        explanation: String,
    },
}

/// A tool environment the loop drives.
pub trait Environment {
    fn tools(&self) -> Vec<ToolSpec>;
    fn apply(&mut self, call: &ToolCall) -> StepOutcome;
}

/// Full run record: the result plus the final working context.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    pub result: AttributionResult,
    pub transcript: Vec<ChatTurn>,
}

/// Runs the agent until it reports or the iteration budget is spent.
/// `check` is called with the context estimate after every management
/// pass.
pub fn drive(
    env: &mut dyn Environment,
    pinned: Vec<ChatTurn>,
    case_id: &str,
    backend: &dyn Backend,
    config: &ExploreConfig,
    retry: &RetryPolicy,
    check: &mut dyn FnMut(u64),
) -> Result<Run, AgentError> {
    config.validate()?;
    let tools = env.tools();
    let mut ctx = WorkingContext::new(pinned);
    let mut meter = CostMeter::default();
    manage_context(&mut ctx, backend, config.t, &mut meter, retry)?;
    let mut peak = ctx.estimate();
    check(peak);
    for iteration in 1..=config.max_iters {
        let reply =
            complete_with_meter(backend, ctx.turns(), config.temperature, &tools, &mut meter, retry).map_err(|e| {
                AgentError::Run {
                    message: e.to_string(),
                    meter,
                    iterations: iteration,
                }
            })?;
        let call = parse_tool_call(&reply.content, &tools);
        ctx.push(reply);
        let observation = match call {
            Err(e) => ChatTurn::tool("error", format!("tool error: {}", e.0)),
            Ok(call) => match env.apply(&call) {
                StepOutcome::Observation(text) => ChatTurn::tool(call.tool.clone(), text),
                StepOutcome::Report {
                    op_id,
                    error_type,
                    explanation,
                } => {
                    return Ok(Run {
                        result: AttributionResult {
                            case_id: case_id.to_string(),
                            predicted_op_id: op_id,
                            error_type: Some(error_type),
                            explanation,
                            meter,
                            iterations: iteration,
                            terminated_by: Termination::Report,
                            peak_context_tokens: peak,
                        },
                        transcript: ctx.turns,
                    })
                }
            },
        };
        ctx.push(observation);
        manage_context(&mut ctx, backend, config.t, &mut meter, retry).map_err(|e| match e {
            AgentError::Run { message, meter, .. } => AgentError::Run {
                message,
                meter,
                iterations: iteration,
            },
            other => other,
        })?;
        let estimate = ctx.estimate();
        check(estimate);
        peak = peak.max(estimate);
    }
    Ok(Run {
        result: AttributionResult {
            case_id: case_id.to_string(),
            predicted_op_id: String::new(),
            error_type: None,
            explanation: String::new(),
            meter,
            iterations: config.max_iters,
            terminated_by: Termination::Budget,
            peak_context_tokens: peak,
        },
        transcript: ctx.turns,
    })
}

/// Parses the arguments shared by every `report_fault` tool.
pub fn parse_report(call: &ToolCall) -> Result<(String, ErrorType, String), String> {
    let op_id = call
        .arg("op_id")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or("report_fault needs `op_id`")?;
    let ty = call.arg("error_type").ok_or("report_fault needs `error_type`")?;
    let error_type: ErrorType = ty.parse().map_err(|e: crate::attribution::UnknownErrorType| {
        format!("{e}; expected one of annotation, judge, extraction, update, deletion, retrieval, response")
    })?;
    Ok((
        op_id.to_string(),
        error_type,
        call.arg("explanation").unwrap_or("").to_string(),
    ))
}

/// Parses an optional non-negative integer argument.
pub fn usize_arg(call: &ToolCall, name: &str, default: usize) -> Result<usize, String> {
    match call.arg(name).map(str::trim) {
        None | Some("") => Ok(default),
        Some(v) => v
            .parse()
            .map_err(|_| format!("argument `{name}` must be a non-negative integer, got `{v}`")),
    }
}

/// Whether `turns` is a summarization request issued by [`manage_context`].
pub fn is_summary_request(turns: &[ChatTurn]) -> bool {
    turns
        .first()
        .is_some_and(|t| t.role == Role::System && t.content == SUMMARY_INSTRUCTION)
}
