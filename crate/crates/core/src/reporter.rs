//! Consumers of attribution results: mini-batch diagnostic report
//! refinement and prompt optimization localized to the faulty operation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::AttributionResult;
use crate::explorer::{render_operation_subgraph, RenderMode};
use crate::graph::ExecutionGraph;
use crate::model::{complete_with_meter, Backend, BackendError, ChatTurn, CostMeter, RetryPolicy};

pub const REPORT_BATCH_SIZE: usize = 4;
pub const HISTORY_CAPACITY: usize = 1;
pub const REPORT_BEGIN: &str = "CURRENT REPORT:";
pub const REPORT_END: &str = "END OF REPORT";

pub const REPORT_INSTRUCTION: &str = "You maintain a diagnostic report on the failures of a memory-augmented \
assistant. You receive the current report and a batch of newly attributed failures. Return the complete \
revised report in Markdown: group failures by faulty operation and error type, describe recurring patterns \
and any finer subtypes you notice, and keep the case ids that support each finding.";

pub const FEEDBACK_INSTRUCTION: &str = "A failure was traced to one operation. Given the failure record, \
the operation's recorded subgraph and the prompts used by that operation, suggest concrete prompt changes. \
Answer with one line per prompt in the form `<prompt name>: <suggestion>`.";

pub const AGGREGATE_INSTRUCTION: &str = "Merge the following suggestions for one prompt into a single, \
consistent editing directive. Reply with the directive only.";

pub const REWRITE_INSTRUCTION: &str = "Rewrite the prompt below according to the directive. The previous \
version is shown for reference; avoid reintroducing its problems. Reply with the new prompt text only.";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReporterError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no graph for case `{0}`")]
    MissingGraph(String),
    #[error("registry file: {0}")]
    Registry(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub body: String,
    pub revision: u32,
    pub source_case_ids: Vec<String>,
    pub meter: CostMeter,
    /// Set when a backend failure stopped refinement early.
    pub error: Option<String>,
}

fn describe(r: &AttributionResult) -> String {
    format!(
        "- case {}: op `{}`, type {}, ended by {:?}: {}",
        r.case_id,
        r.predicted_op_id,
        r.error_type.map(|t| t.as_str()).unwrap_or("none"),
        r.terminated_by,
        r.explanation.replace('\n', " ")
    )
}

/// Refines a report over batches of `batch_size` results; each batch sends
/// the full current report and receives the full revision.
pub fn build_report(
    results: &[AttributionResult],
    backend: &dyn Backend,
    batch_size: usize,
    exemplar: Option<&str>,
) -> DiagnosticReport {
    let mut report = DiagnosticReport {
        body: String::new(),
        revision: 0,
        source_case_ids: Vec::new(),
        meter: CostMeter::default(),
        error: None,
    };
    let mut instruction = REPORT_INSTRUCTION.to_string();
    if let Some(ex) = exemplar {
        let _ = write!(instruction, "\n\nExample of a good report:\n{ex}");
    }
    for batch in results.chunks(batch_size.max(1)) {
        let mut user = format!("{REPORT_BEGIN}\n{}\n{REPORT_END}\n\nNEW FAILURES:\n", report.body);
        for r in batch {
            user.push_str(&describe(r));
            user.push('\n');
        }
        let turns = [ChatTurn::system(instruction.clone()), ChatTurn::user(user)];
        match complete_with_meter(backend, &turns, 0.0, &[], &mut report.meter, &RetryPolicy::default()) {
            Ok(reply) => {
                report.body = reply.content;
                report.revision += 1;
                report.source_case_ids.extend(batch.iter().map(|r| r.case_id.clone()));
            }
            Err(e) => {
                report.error = Some(e.to_string());
                break;
            }
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub text: String,
    /// Previous version, at most [`HISTORY_CAPACITY`] entries.
    #[serde(default)]
    pub history: Vec<String>,
    #[serde(default)]
    pub bound_ops: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptRegistry {
    pub prompts: IndexMap<String, PromptEntry>,
}

impl PromptRegistry {
    pub fn insert(&mut self, name: &str, text: &str, bound_ops: &[&str]) {
        self.prompts.insert(
            name.to_string(),
            PromptEntry {
                text: text.to_string(),
                history: Vec::new(),
                bound_ops: bound_ops.iter().map(|s| s.to_string()).collect(),
            },
        );
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, ReporterError> {
        let reg: Self = serde_json::from_slice(bytes).map_err(|e| ReporterError::Registry(e.to_string()))?;
        if let Some((name, _)) = reg.prompts.iter().find(|(_, p)| p.history.len() > HISTORY_CAPACITY) {
            return Err(ReporterError::Registry(format!(
                "prompt `{name}` holds more than one history version"
            )));
        }
        Ok(reg)
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec_pretty(self).expect("registry serializes");
        out.push(b'\n');
        out
    }

    fn rotate(&mut self, name: &str, new_text: String) {
        if let Some(p) = self.prompts.get_mut(name) {
            let old = std::mem::replace(&mut p.text, new_text);
            p.history = vec![old];
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackItem {
    pub case_id: String,
    pub target: String,
    pub suggestion: String,
}

/// Prompts bound to the name of the predicted faulty operation, in
/// registry order.
pub fn localize_prompts(result: &AttributionResult, graph: &ExecutionGraph, registry: &PromptRegistry) -> Vec<String> {
    let Ok(op) = graph.operation(&result.predicted_op_id) else {
        return Vec::new();
    };
    registry
        .prompts
        .iter()
        .filter(|(_, p)| p.bound_ops.iter().any(|b| b == &op.name))
        .map(|(name, _)| name.clone())
        .collect()
}

fn parse_feedback(case_id: &str, reply: &str, targets: &[String]) -> Vec<FeedbackItem> {
    let mut items: Vec<FeedbackItem> = reply
        .lines()
        .filter_map(|line| {
            let (name, suggestion) = line.split_once(':')?;
            let name = name.trim().trim_matches('`');
            targets.iter().any(|t| t == name).then(|| FeedbackItem {
                case_id: case_id.to_string(),
                target: name.to_string(),
                suggestion: suggestion.trim().to_string(),
            })
        })
        .collect();
    if items.is_empty() && !reply.trim().is_empty() {
        items = targets
            .iter()
            .map(|t| FeedbackItem {
                case_id: case_id.to_string(),
                target: t.clone(),
                suggestion: reply.trim().to_string(),
            })
            .collect();
    }
    items
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundSummary {
    pub feedback: Vec<FeedbackItem>,
    pub directives: BTreeMap<String, String>,
    pub rewritten: Vec<String>,
    pub meter: CostMeter,
}

/// One optimization round: per-case feedback, per-prompt aggregation,
/// per-prompt rewrite with one version of history. Only prompts bound to
/// the round's faulty operations change.
pub fn optimize_round(
    failed: &[AttributionResult],
    graphs: &BTreeMap<String, &ExecutionGraph>,
    registry: &PromptRegistry,
    backend: &dyn Backend,
) -> Result<(PromptRegistry, RoundSummary), ReporterError> {
    let mut next = registry.clone();
    let mut summary = RoundSummary::default();
    let retry = RetryPolicy::default();
    for r in failed {
        let graph = graphs
            .get(&r.case_id)
            .ok_or_else(|| ReporterError::MissingGraph(r.case_id.clone()))?;
        let targets = localize_prompts(r, graph, registry);
        if targets.is_empty() {
            continue;
        }
        let rendering = render_operation_subgraph(&graph.index(), &r.predicted_op_id, RenderMode::Full, 0, usize::MAX)
            .unwrap_or_default();
        let mut user = format!(
            "FAILURE:\n{}\n\nOPERATION SUBGRAPH:\n{rendering}\nPROMPTS:\n",
            describe(r)
        );
        for t in &targets {
            let _ = writeln!(user, "### {t}\n{}", registry.prompts[t].text);
        }
        let turns = [ChatTurn::system(FEEDBACK_INSTRUCTION), ChatTurn::user(user)];
        let reply = complete_with_meter(backend, &turns, 0.0, &[], &mut summary.meter, &retry)?;
        summary
            .feedback
            .extend(parse_feedback(&r.case_id, &reply.content, &targets));
    }
    for name in registry.prompts.keys() {
        let items: Vec<&FeedbackItem> = summary.feedback.iter().filter(|f| &f.target == name).collect();
        if items.is_empty() {
            continue;
        }
        let mut user = format!("PROMPT: {name}\nSUGGESTIONS:\n");
        for f in &items {
            let _ = writeln!(user, "- ({}) {}", f.case_id, f.suggestion);
        }
        let turns = [ChatTurn::system(AGGREGATE_INSTRUCTION), ChatTurn::user(user)];
        let directive = complete_with_meter(backend, &turns, 0.0, &[], &mut summary.meter, &retry)?.content;
        summary.directives.insert(name.clone(), directive);
    }
    for (name, directive) in &summary.directives {
        let entry = &registry.prompts[name];
        let previous = entry.history.first().map(String::as_str).unwrap_or("(none)");
        let user = format!(
            "PROMPT: {name}\nCURRENT:\n{}\n\nPREVIOUS VERSION:\n{previous}\n\nDIRECTIVE:\n{directive}",
            entry.text
        );
        let turns = [ChatTurn::system(REWRITE_INSTRUCTION), ChatTurn::user(user)];
        let text = complete_with_meter(backend, &turns, 0.0, &[], &mut summary.meter, &retry)?.content;
        next.rotate(name, text);
        summary.rewritten.push(name.clone());
    }
    Ok((next, summary))
}
