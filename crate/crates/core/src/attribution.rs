//! Decisive error sets: cut-set validity, exhaustive minimal-set search,
//! the singleton shortcut for sequential executions, and accuracy/cost
//! scoring of attribution results.
//!
//! A candidate set of operations is a valid cut-set when every member is
//! faulty, every strict ancestor is correct, and correcting the members'
//! outputs (with every strict descendant behaving ideally) turns the
//! failed outcome into a success. Decisive sets are the valid candidates
//! with no valid strict subset.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Direction, ExecutionGraph, GraphError, GraphIndex};
use crate::model::CostMeter;

pub type OpSet = BTreeSet<String>;

/// The decisive-error criterion in prose, as handed to every agent.
pub const CRITERION: &str = "An operation is the decisive error when (1) it is faulty, \
(2) no operation strictly upstream of it is faulty, and (3) replacing its faulty outputs with \
correct ones, while every strictly downstream operation behaves ideally, would make the final \
answer correct. Report the earliest operation satisfying all three conditions.";

pub const DEFAULT_MAX_OPS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorType {
    Annotation,
    Judge,
    Extraction,
    Update,
    Deletion,
    Retrieval,
    Response,
}

impl ErrorType {
    pub const ALL: [ErrorType; 7] = [
        ErrorType::Annotation,
        ErrorType::Judge,
        ErrorType::Extraction,
        ErrorType::Update,
        ErrorType::Deletion,
        ErrorType::Retrieval,
        ErrorType::Response,
    ];

    /// Pipeline faults, as opposed to evaluation-side ones.
    pub const SYSTEM: [ErrorType; 5] = [
        ErrorType::Extraction,
        ErrorType::Update,
        ErrorType::Deletion,
        ErrorType::Retrieval,
        ErrorType::Response,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorType::Annotation => "annotation",
            ErrorType::Judge => "judge",
            ErrorType::Extraction => "extraction",
            ErrorType::Update => "update",
            ErrorType::Deletion => "deletion",
            ErrorType::Retrieval => "retrieval",
            ErrorType::Response => "response",
        }
    }

    pub fn is_system(self) -> bool {
        Self::SYSTEM.contains(&self)
    }

    pub fn describe(self) -> &'static str {
        match self {
            ErrorType::Annotation => {
                "the evidence or reference answer of the test case itself is wrong or insufficient"
            }
            ErrorType::Judge => "the answer was acceptable but the automatic grader rejected it",
            ErrorType::Extraction => "the needed fact never made it into any memory unit",
            ErrorType::Update => "a memory unit held the fact until an update rewrote or degraded it",
            ErrorType::Deletion => "a memory unit holding the fact was removed",
            ErrorType::Retrieval => "the store held the fact but retrieval left it out of the context",
            ErrorType::Response => "the context held the fact but the final answer was still wrong",
        }
    }
}

impl fmt::Display for ErrorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown error type `{0}`")]
pub struct UnknownErrorType(pub String);

impl FromStr for ErrorType {
    type Err = UnknownErrorType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(UnknownErrorType(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Termination {
    Report,
    Budget,
}

/// Outcome of one attribution run on one failed case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub case_id: String,
    /// Empty when the run ended on budget.
    pub predicted_op_id: String,
    pub error_type: Option<ErrorType>,
    pub explanation: String,
    pub meter: CostMeter,
    pub iterations: u32,
    pub terminated_by: Termination,
    /// Largest working-context estimate observed after a management pass.
    pub peak_context_tokens: u64,
}

pub trait FaultOracle {
    fn is_faulty(&self, op_id: &str) -> bool;
}

impl FaultOracle for OpSet {
    fn is_faulty(&self, op_id: &str) -> bool {
        self.contains(op_id)
    }
}

/// Binary outcome indicator: `true` means failure (`Z = 1`). With an
/// empty intervention it reports the original outcome.
pub trait OutcomeOracle {
    fn fails(&self, graph: &ExecutionGraph, intervention: &OpSet) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{0} operations exceed the enumeration limit of {1}")]
    TooLarge(usize, usize),
    #[error("operation precedence is not a total order")]
    NotSequential,
    #[error("no operation is faulty")]
    NoFault,
    #[error("no faulty operation forms a valid singleton cut-set")]
    NoValidSingleton,
    #[error("result for unknown case `{0}`")]
    UnknownCase(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutSetVerdict {
    pub candidate: OpSet,
    pub all_faulty: bool,
    pub ancestors_correct: bool,
    pub rescues: bool,
}

impl CutSetVerdict {
    pub fn valid(&self) -> bool {
        self.all_faulty && self.ancestors_correct && self.rescues
    }
}

pub fn check_candidate(
    graph: &ExecutionGraph,
    candidate: &OpSet,
    faults: &dyn FaultOracle,
    outcome: &dyn OutcomeOracle,
) -> Result<CutSetVerdict, AttributionError> {
    check_indexed(&graph.index(), candidate, faults, outcome)
}

fn check_indexed(
    index: &GraphIndex<'_>,
    candidate: &OpSet,
    faults: &dyn FaultOracle,
    outcome: &dyn OutcomeOracle,
) -> Result<CutSetVerdict, AttributionError> {
    let members: Vec<&String> = candidate.iter().collect();
    let ancestors = index.op_ancestors(&members)?;
    Ok(CutSetVerdict {
        candidate: candidate.clone(),
        all_faulty: candidate.iter().all(|o| faults.is_faulty(o)),
        ancestors_correct: ancestors.iter().all(|o| !faults.is_faulty(o)),
        rescues: !outcome.fails(index.graph(), candidate),
    })
}

/// Lexicographic k-combinations of `0..n`.
fn combinations(n: usize, k: usize) -> impl Iterator<Item = Vec<usize>> {
    let mut current: Option<Vec<usize>> = (k <= n).then(|| (0..k).collect());
    std::iter::from_fn(move || {
        let out = current.clone()?;
        let mut next = out.clone();
        let mut i = k;
        loop {
            if i == 0 {
                current = None;
                break;
            }
            i -= 1;
            if next[i] < n - k + i {
                next[i] += 1;
                for j in i + 1..k {
                    next[j] = next[j - 1] + 1;
                }
                current = Some(next);
                break;
            }
        }
        Some(out)
    })
}

/// Every decisive error set, by exhaustive enumeration in order of size
/// then lexicographic op ids.
pub fn brute_force_decisive_sets(
    graph: &ExecutionGraph,
    faults: &dyn FaultOracle,
    outcome: &dyn OutcomeOracle,
    max_ops: usize,
) -> Result<Vec<OpSet>, AttributionError> {
    let n = graph.operations.len();
    if n > max_ops {
        return Err(AttributionError::TooLarge(n, max_ops));
    }
    let index = graph.index();
    let mut ids: Vec<&String> = graph.operations.keys().collect();
    ids.sort();
    let faulty: Vec<bool> = ids.iter().map(|id| faults.is_faulty(id)).collect();
    let mut kept: Vec<OpSet> = Vec::new();
    for size in 0..=n {
        for combo in combinations(n, size) {
            // cheap rejection: condition one needs every member faulty
            if !combo.iter().all(|&i| faulty[i]) {
                continue;
            }
            let candidate: OpSet = combo.iter().map(|&i| ids[i].clone()).collect();
            if kept.iter().any(|k| k.is_subset(&candidate)) {
                continue;
            }
            if check_indexed(&index, &candidate, faults, outcome)?.valid() {
                kept.push(candidate);
            }
        }
    }
    Ok(kept)
}

/// For strictly sequential executions: the earliest faulty operation whose
/// singleton is a valid cut-set.
pub fn singleton_decisive(
    graph: &ExecutionGraph,
    faults: &dyn FaultOracle,
    outcome: &dyn OutcomeOracle,
) -> Result<String, AttributionError> {
    let index = graph.index();
    if !index.dag().is_total_order() {
        return Err(AttributionError::NotSequential);
    }
    let mut ops: Vec<_> = graph.operations.values().collect();
    ops.sort_by(|a, b| (a.ts_start, &a.op_id).cmp(&(b.ts_start, &b.op_id)));
    let faulty: Vec<_> = ops.into_iter().filter(|o| faults.is_faulty(&o.op_id)).collect();
    if faulty.is_empty() {
        return Err(AttributionError::NoFault);
    }
    for op in faulty {
        let candidate: OpSet = [op.op_id.clone()].into();
        if check_indexed(&index, &candidate, faults, outcome)?.valid() {
            return Ok(op.op_id.clone());
        }
    }
    Err(AttributionError::NoValidSingleton)
}

/// Ground-truth label of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub op_id: String,
    pub error_type: ErrorType,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub cases: usize,
    /// Error-type accuracy in [0, 1].
    pub eta: f64,
    /// Faulty-operation identification accuracy in [0, 1].
    pub oia: f64,
    pub mean_tokens_k: f64,
    pub mean_minutes: f64,
}

impl Scores {
    /// Two-decimal percentage table row.
    pub fn percent_row(&self) -> String {
        format!(
            "ETA {:.2}  OIA {:.2}  tokens(k) {:.2}  minutes {:.2}  cases {}",
            self.eta * 100.0,
            self.oia * 100.0,
            self.mean_tokens_k,
            self.mean_minutes,
            self.cases
        )
    }
}

pub fn score(results: &[AttributionResult], truths: &BTreeMap<String, Truth>) -> Result<Scores, AttributionError> {
    let n = results.len();
    if n == 0 {
        return Ok(Scores {
            cases: 0,
            eta: 0.0,
            oia: 0.0,
            mean_tokens_k: 0.0,
            mean_minutes: 0.0,
        });
    }
    let (mut types, mut ops, mut tokens, mut secs) = (0usize, 0usize, 0u64, 0.0f64);
    for r in results {
        let truth = truths
            .get(&r.case_id)
            .ok_or_else(|| AttributionError::UnknownCase(r.case_id.clone()))?;
        types += usize::from(r.error_type == Some(truth.error_type));
        ops += usize::from(r.predicted_op_id == truth.op_id);
        tokens += r.meter.total_tokens();
        secs += r.meter.wall_time_secs;
    }
    let nf = n as f64;
    Ok(Scores {
        cases: n,
        eta: types as f64 / nf,
        oia: ops as f64 / nf,
        mean_tokens_k: tokens as f64 / 1000.0 / nf,
        mean_minutes: secs / 60.0 / nf,
    })
}

/// Checks that `ids` are ordered upstream-first under the precedence DAG.
pub fn is_upstream_order(graph: &ExecutionGraph, ids: &[String]) -> bool {
    let index = graph.index();
    let dag = index.dag();
    ids.windows(2)
        .all(|w| match (dag.position(&w[0]), dag.position(&w[1])) {
            (Some(a), Some(b)) => !dag.closure(&[b], Direction::Down).contains(&a),
            _ => false,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combination_order() {
        let got: Vec<Vec<usize>> = combinations(4, 2).collect();
        assert_eq!(
            got,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(combinations(3, 0).count(), 1);
        assert_eq!(combinations(2, 3).count(), 0);
        assert_eq!((0..=5).map(|k| combinations(5, k).count()).sum::<usize>(), 32);
    }

    #[test]
    fn error_type_parsing() {
        assert_eq!("Retrieval".parse::<ErrorType>().unwrap(), ErrorType::Retrieval);
        assert!("bogus".parse::<ErrorType>().is_err());
        assert_eq!(ErrorType::ALL.len(), 7);
        assert_eq!(ErrorType::ALL.iter().filter(|t| t.is_system()).count(), 5);
    }

    fn result(case: &str, op: &str, t: ErrorType, tokens: u64, secs: f64) -> AttributionResult {
        AttributionResult {
            case_id: case.into(),
            predicted_op_id: op.into(),
            error_type: Some(t),
            explanation: String::new(),
            meter: CostMeter {
                input_tokens: tokens,
                output_tokens: 0,
                wall_time_secs: secs,
            },
            iterations: 1,
            terminated_by: Termination::Report,
            peak_context_tokens: 0,
        }
    }

    fn truths(n: usize) -> BTreeMap<String, Truth> {
        (0..n)
            .map(|i| {
                (
                    format!("c{i}"),
                    Truth {
                        op_id: format!("o{i}"),
                        error_type: ErrorType::Retrieval,
                    },
                )
            })
            .collect()
    }

    #[test]
    fn score_fixtures() {
        let all: Vec<_> = (0..4)
            .map(|i| result(&format!("c{i}"), &format!("o{i}"), ErrorType::Retrieval, 0, 0.0))
            .collect();
        let s = score(&all, &truths(4)).unwrap();
        assert_eq!((s.eta, s.oia), (1.0, 1.0));

        let mixed = vec![
            result("c0", "o0", ErrorType::Retrieval, 0, 0.0),
            result("c1", "x", ErrorType::Retrieval, 0, 0.0),
            result("c2", "x", ErrorType::Retrieval, 0, 0.0),
            result("c3", "x", ErrorType::Update, 0, 0.0),
        ];
        let s = score(&mixed, &truths(4)).unwrap();
        assert_eq!((s.eta, s.oia), (0.75, 0.25));

        let costs = vec![
            result("c0", "o0", ErrorType::Retrieval, 1000, 60.0),
            result("c1", "o1", ErrorType::Retrieval, 3000, 180.0),
        ];
        let s = score(&costs, &truths(2)).unwrap();
        assert_eq!((s.mean_tokens_k, s.mean_minutes), (2.0, 2.0));
        assert_eq!(
            s.percent_row(),
            "ETA 100.00  OIA 100.00  tokens(k) 2.00  minutes 2.00  cases 2"
        );
        assert!(matches!(
            score(&[result("zz", "o", ErrorType::Update, 0, 0.0)], &truths(1)),
            Err(AttributionError::UnknownCase(_))
        ));
    }
}
