//! Scripted judges that know the ground truth. They exercise the agent
//! loops end to end without a language model.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::Mutex;

use crate::agent::is_summary_request;
use crate::attribution::Truth;
use crate::explorer::{EMPTY_LIST, POPPED};
use crate::graph::{ExecutionGraph, Tick, VarRef};
use crate::model::{Backend, BackendError, ChatTurn, Role, ToolCall, ToolSpec};

const SUMMARY_REPLY: &str = "SUMMARY: earlier exploration steps elided; continuing the walk.";

fn last_tool(turns: &[ChatTurn]) -> Option<&ChatTurn> {
    turns.iter().rev().find(|t| t.role == Role::Tool)
}

fn explanation(name: &str, truth: &Truth) -> String {
    format!(
        "`{}` ({name}) is the earliest faulty operation; its {} error removes the golden answer from everything downstream.",
        truth.op_id, truth.error_type
    )
}

fn report(truth: &Truth, name: &str) -> ToolCall {
    ToolCall::new(
        "report_fault",
        &[
            ("op_id", &truth.op_id),
            ("error_type", truth.error_type.as_str()),
            ("explanation", &explanation(name, truth)),
        ],
    )
}

#[derive(Default)]
struct WalkState {
    queue: VecDeque<ToolCall>,
    viewed: HashSet<String>,
    added: HashSet<VarRef>,
}

/// Explorer judge: pops, previews every operation it has not seen, reports
/// the truth operation on sight, and otherwise queues the single output
/// closest to the truth operation. Never reports when there is no truth.
pub struct OmniscientJudge {
    truth: Option<Truth>,
    truth_name: String,
    ops_of: HashMap<VarRef, Vec<String>>,
    outputs_of: HashMap<String, Vec<VarRef>>,
    /// distance (in operations) from each variable version to the truth op
    var_dist: HashMap<VarRef, u32>,
    ts: HashMap<VarRef, Tick>,
    state: Mutex<WalkState>,
}

impl OmniscientJudge {
    pub fn new(graph: &ExecutionGraph, truth: Option<Truth>) -> Self {
        let index = graph.index();
        let dag = index.dag();
        let mut ops_of: HashMap<VarRef, Vec<String>> = HashMap::new();
        let mut ts = HashMap::new();
        for chain in graph.variables.values() {
            for v in &chain.versions {
                let r = VarRef::new(chain.var_id.clone(), v.version);
                ts.insert(r.clone(), v.ts);
                let ops = index.ops_involving(&chain.var_id, Some(v.version)).unwrap_or_default();
                ops_of.insert(r, ops);
            }
        }
        let outputs_of: HashMap<String, Vec<VarRef>> = graph
            .operations
            .keys()
            .map(|o| (o.clone(), index.outputs_of(o).unwrap_or_default()))
            .collect();
        // backward BFS over precedence from the truth op
        let mut op_dist: HashMap<usize, u32> = HashMap::new();
        if let Some(start) = truth.as_ref().and_then(|t| dag.position(&t.op_id)) {
            let mut queue = VecDeque::from([start]);
            op_dist.insert(start, 0);
            while let Some(n) = queue.pop_front() {
                let d = op_dist[&n];
                for &p in dag.predecessors(n) {
                    if let std::collections::hash_map::Entry::Vacant(e) = op_dist.entry(p) {
                        e.insert(d + 1);
                        queue.push_back(p);
                    }
                }
            }
        }
        let mut var_dist = HashMap::new();
        for r in ts.keys() {
            let best = index
                .consumers_of(r)
                .into_iter()
                .filter_map(|c| dag.position(c).and_then(|i| op_dist.get(&i)))
                .min();
            if let Some(&d) = best {
                var_dist.insert(r.clone(), d);
            }
        }
        let truth_name = truth
            .as_ref()
            .and_then(|t| graph.operation(&t.op_id).ok())
            .map(|o| o.name.clone())
            .unwrap_or_default();
        Self {
            truth,
            truth_name,
            ops_of,
            outputs_of,
            var_dist,
            ts,
            state: Mutex::new(WalkState::default()),
        }
    }

    fn plan(&self, popped: &VarRef, st: &mut WalkState) {
        let mut candidates: Vec<VarRef> = Vec::new();
        for op in self.ops_of.get(popped).into_iter().flatten() {
            if !st.viewed.insert(op.clone()) {
                continue;
            }
            st.queue
                .push_back(ToolCall::new("view_op", &[("op_id", op), ("mode", "preview")]));
            if let Some(t) = self.truth.as_ref().filter(|t| &t.op_id == op) {
                st.queue.push_back(report(t, &self.truth_name));
                return;
            }
            candidates.extend(self.outputs_of.get(op).into_iter().flatten().cloned());
        }
        let best = candidates
            .into_iter()
            .filter(|v| !st.added.contains(v))
            .filter_map(|v| Some((*self.var_dist.get(&v)?, self.ts.get(&v).copied(), v)))
            .min();
        if let Some((_, _, v)) = best {
            st.added.insert(v.clone());
            st.queue
                .push_back(ToolCall::new("add_to_explore", &[("vars", &v.to_string())]));
        }
    }
}

impl Backend for OmniscientJudge {
    fn name(&self) -> &str {
        "omniscient"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn complete(&self, turns: &[ChatTurn], _: f64, _: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        if is_summary_request(turns) {
            return Ok(ChatTurn::assistant(SUMMARY_REPLY));
        }
        let mut st = self
            .state
            .lock()
            .map_err(|_| BackendError::fatal("judge state poisoned"))?;
        if st.queue.is_empty() {
            let popped = last_tool(turns)
                .filter(|t| t.tool_name.as_deref() == Some("pop_next"))
                .and_then(|t| t.content.strip_prefix(POPPED))
                .and_then(|rest| rest.split_whitespace().next())
                .and_then(|s| s.parse::<VarRef>().ok());
            if let Some(r) = popped {
                self.plan(&r, &mut st);
            }
        }
        let call = st.queue.pop_front().unwrap_or_else(|| ToolCall::new("pop_next", &[]));
        let thought = match call.tool.as_str() {
            "pop_next" if last_tool(turns).is_some_and(|t| t.content == EMPTY_LIST) => "Nothing left to explore.",
            "pop_next" => "Take the earliest pending variable.",
            "view_op" => "Inspect this operation.",
            "add_to_explore" => "Follow the output that leads downstream.",
            _ => "This operation is the decisive error.",
        };
        Ok(ChatTurn::assistant(format!("{thought}\n{}", call.to_line())))
    }
}

/// Operation-log judge: searches for the truth op's header line with
/// limit 1, views the hit, then reports it.
pub struct ObsTwinJudge {
    truth: Option<Truth>,
    truth_name: String,
}

impl ObsTwinJudge {
    pub fn new(graph: &ExecutionGraph, truth: Option<Truth>) -> Self {
        let truth_name = truth
            .as_ref()
            .and_then(|t| graph.operation(&t.op_id).ok())
            .map(|o| o.name.clone())
            .unwrap_or_default();
        Self { truth, truth_name }
    }
}

impl Backend for ObsTwinJudge {
    fn name(&self) -> &str {
        "obs-twin"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn complete(&self, turns: &[ChatTurn], _: f64, _: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        if is_summary_request(turns) {
            return Ok(ChatTurn::assistant(SUMMARY_REPLY));
        }
        let Some(truth) = &self.truth else {
            let call = ToolCall::new("search_operations", &[("regex", "answer"), ("limit", "1")]);
            return Ok(ChatTurn::assistant(format!("Keep looking.\n{}", call.to_line())));
        };
        let last = last_tool(turns);
        let call = match last.and_then(|t| t.tool_name.as_deref()) {
            Some("search_operations") => {
                let index = last
                    .and_then(|t| t.content.lines().find_map(|l| l.strip_prefix("block ")))
                    .and_then(|rest| rest.split_whitespace().next())
                    .unwrap_or("0")
                    .to_string();
                ToolCall::new("view_block", &[("index", &index)])
            }
            Some("view_block") => report(truth, &self.truth_name),
            _ => ToolCall::new(
                "search_operations",
                &[
                    ("regex", &format!("(?m)^op_id: {}$", regex::escape(&truth.op_id))),
                    ("limit", "1"),
                ],
            ),
        };
        Ok(ChatTurn::assistant(call.to_line()))
    }
}
