//! Deterministic generator of synthetic memory-pipeline traces with one
//! optional injected fault, plus the propagation semantics that serve as
//! ground truth for attribution.
//!
//! Every trace has three sessions: `memory_construction` (extract, update
//! and delete operations threading a `memory_store` state variable),
//! `retrieval` (embed, search, assemble) and `response` (prompt, answer).
//! One message is the planted evidence; it carries the golden answer
//! verbatim and no other message contains it.

mod judge;

pub use judge::{ObsTwinJudge, OmniscientJudge};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{ErrorType, OpSet, OutcomeOracle, Truth};
use crate::explorer::CaseSpec;
use crate::graph::{Direction, ExecutionGraph, GraphIndex, Metadata, VarRef};
use crate::recorder::{Endpoint, RecorderError, TraceContext, VarConfig, MEM0_DICT};
use crate::retrieval::{Corpus, RAW_MESSAGE};

pub const DELETION_MARKER: &str = "__DELETED__";

// graph metadata keys carrying the case description
pub const META_CASE_ID: &str = "case.id";
pub const META_SEED: &str = "case.seed";
pub const META_QUESTION: &str = "case.question_var";
pub const META_GOLDEN: &str = "case.golden_answer";
pub const META_EVIDENCE: &str = "case.evidence";
pub const META_PREDICTION: &str = "case.prediction_var";
pub const META_TRUTH_OP: &str = "case.truth_op_id";
pub const META_TRUTH_TYPE: &str = "case.truth_error_type";
pub const META_OUTCOME: &str = "case.outcome";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error(transparent)]
    Recorder(#[from] RecorderError),
    #[error("malformed manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub n_messages: usize,
    pub memories_per_message: usize,
    pub update_prob: f64,
    pub delete_prob: f64,
    pub top_k: usize,
    /// One of the five pipeline error types, or `None` for a clean run.
    pub fault: Option<ErrorType>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_messages: 40,
            memories_per_message: 1,
            update_prob: 0.2,
            delete_prob: 0.02,
            top_k: 10,
            fault: None,
        }
    }
}

impl SimConfig {
    pub fn with_seed(seed: u64, fault: Option<ErrorType>) -> Self {
        Self {
            seed,
            fault,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.update_prob) || !(0.0..=1.0).contains(&self.delete_prob) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.top_k == 0 {
            return bad("top_k must be at least 1");
        }
        if self.n_messages == 0 {
            return bad("n_messages must be at least 1");
        }
        if self.memories_per_message == 0 {
            return bad("memories_per_message must be at least 1");
        }
        match self.fault {
            Some(t) if !t.is_system() => Err(SimError::Config(format!(
                "`{t}` is an evaluation-side error type and cannot be injected"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultCase {
    pub case_id: String,
    pub seed: u64,
    pub graph: ExecutionGraph,
    pub question_var: VarRef,
    pub golden_answer: String,
    pub evidence: Vec<VarRef>,
    pub prediction_var: VarRef,
    pub truth_op_id: Option<String>,
    pub truth_error_type: Option<ErrorType>,
    /// `true` when the final answer is wrong (`Z = 1`).
    pub failed: bool,
}

impl FaultCase {
    pub fn spec(&self) -> CaseSpec {
        CaseSpec {
            case_id: self.case_id.clone(),
            question_var: self.question_var.clone(),
            golden_answer: self.golden_answer.clone(),
            evidence: self.evidence.clone(),
        }
    }

    pub fn truth(&self) -> Option<Truth> {
        Some(Truth {
            op_id: self.truth_op_id.clone()?,
            error_type: self.truth_error_type?,
        })
    }

    /// The generator's fault labels.
    pub fn faulty_ops(&self) -> OpSet {
        self.truth_op_id.iter().cloned().collect()
    }

    pub fn propagation(&self) -> PropagationOracle<'_> {
        PropagationOracle::new(&self.graph, self.faulty_ops(), self.prediction_var.clone())
    }
}

struct Topic {
    fact: &'static str,
    question: &'static str,
    unit: &'static str,
    answers: [&'static str; 8],
}

const TOPICS: [Topic; 6] = [
    Topic {
        fact: "I finally picked up my new car last weekend, it is a {} and I love driving it.",
        question: "What new car did the user pick up?",
        unit: "User's new car is a {}.",
        answers: [
            "Ferrari",
            "Porsche",
            "Maserati",
            "Lamborghini",
            "Bugatti",
            "Koenigsegg",
            "Pagani",
            "McLaren",
        ],
    },
    Topic {
        fact: "We adopted a puppy and named her {} after a long family debate.",
        question: "What did the user name the adopted puppy?",
        unit: "User's adopted puppy is named {}.",
        answers: [
            "Biscuit",
            "Marmalade",
            "Pretzel",
            "Waffles",
            "Juniper",
            "Clementine",
            "Dumpling",
            "Paprika",
        ],
    },
    Topic {
        fact: "Big news, we are relocating to {} in the spring for my job.",
        question: "Which city is the user relocating to?",
        unit: "User is relocating to {} in the spring.",
        answers: [
            "Lisbon",
            "Kyoto",
            "Reykjavik",
            "Montevideo",
            "Ljubljana",
            "Tallinn",
            "Valparaiso",
            "Marrakesh",
        ],
    },
    Topic {
        fact: "I signed up for weekly {} lessons at the community music school.",
        question: "Which instrument lessons did the user sign up for?",
        unit: "User takes weekly {} lessons.",
        answers: [
            "cello",
            "bassoon",
            "harpsichord",
            "ukulele",
            "theremin",
            "accordion",
            "mandolin",
            "oboe",
        ],
    },
    Topic {
        fact: "My grandmother taught me her secret {} recipe yesterday.",
        question: "Which recipe did the user's grandmother teach them?",
        unit: "User learned their grandmother's {} recipe.",
        answers: [
            "goulash",
            "ratatouille",
            "moussaka",
            "paella",
            "pierogi",
            "tagine",
            "bibimbap",
            "jambalaya",
        ],
    },
    Topic {
        fact: "I joined a local {} club and practice every Saturday morning.",
        question: "Which club did the user join?",
        unit: "User joined a local {} club.",
        answers: [
            "fencing",
            "curling",
            "rowing",
            "lacrosse",
            "archery",
            "bouldering",
            "badminton",
            "orienteering",
        ],
    },
];

const CHATTER: [&str; 8] = [
    "Work was busy today, I spent most of the afternoon in {} meetings.",
    "The weather has been {} all week, so I stayed inside and read.",
    "I need to remember to buy {} on the way home.",
    "My sister called to talk about her {} plans.",
    "I watched a documentary about {} migration last night.",
    "The train was late again this morning because of {}.",
    "We had dinner with friends and talked about {} for hours.",
    "I am thinking about repainting the {} a lighter color.",
];

const FILLERS: [[&str; 4]; 8] = [
    ["budget", "planning", "design", "review"],
    ["rainy", "windy", "grey", "humid"],
    ["milk and bread", "apples", "eggs and coffee", "dish soap"],
    ["wedding", "birthday", "graduation", "anniversary"],
    ["whale", "bird", "salmon", "butterfly"],
    ["signal problems", "track works", "a power outage", "heavy snow"],
    ["politics", "travel", "old movies", "gardening"],
    ["kitchen", "hallway", "bedroom", "study"],
];

/// Uniform index in `0..n`, platform independent.
fn pick(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n as u32) as usize
}

fn fill(template: &str, slot: &str) -> String {
    template.replacen("{}", slot, 1)
}

fn unit_text(id: &str, revision: u32, text: &str) -> String {
    format!("id={id}\nrevision={revision}\ntext={text}")
}

struct Unit {
    id: String,
    var: VarRef,
    text: String,
    revision: u32,
}

struct Builder {
    ctx: TraceContext,
    store: Option<VarRef>,
    store_rev: u32,
    live: Vec<Unit>,
}

impl Builder {
    fn store_snapshot(&mut self) -> Endpoint {
        let ids: Vec<&str> = self.live.iter().map(|u| u.id.as_str()).collect();
        let value = format!("id=memory_store\nrevision={}\nunits={}", self.store_rev, ids.join(","));
        self.store_rev += 1;
        Endpoint::snapshot(value, VarConfig::new("memory_state").identity("by-field:id"))
    }

    /// Links the current store (or `first_source` for the very first
    /// write) to a fresh store version.
    fn step_store(&mut self, first_source: &VarRef) -> Result<(), SimError> {
        let src = self.store.clone().unwrap_or_else(|| first_source.clone());
        let snap = self.store_snapshot();
        let e = self.ctx.comment_link(&src, snap, "store update", Metadata::new())?;
        self.store = Some(e.dst);
        Ok(())
    }

    fn begin_op(&mut self, name: &str, category: &str, comment: String) -> Result<String, SimError> {
        Ok(self.ctx.begin_operation(name, category, comment, Metadata::new())?)
    }

    fn end_op(&mut self) -> Result<(), SimError> {
        Ok(self.ctx.end_operation()?)
    }

    fn rewrite_unit(&mut self, idx: usize, text: String, op_comment: &str) -> Result<(), SimError> {
        let unit_cfg = VarConfig::new("memory_unit").identity(MEM0_DICT);
        let unit = &self.live[idx];
        let rev = unit.revision + 1;
        let snap = Endpoint::snapshot(unit_text(&unit.id, rev, &text), unit_cfg);
        let src = unit.var.clone();
        let e = self.ctx.comment_link(&src, snap, op_comment, Metadata::new())?;
        let unit = &mut self.live[idx];
        unit.var = e.dst.clone();
        unit.text = text;
        unit.revision = rev;
        self.step_store(&e.dst)
    }

    fn delete_unit(&mut self, idx: usize) -> Result<(), SimError> {
        let unit = self.live.remove(idx);
        let marker = VarConfig::new("deletion_marker").comment("constant deletion marker");
        let e = self.ctx.comment_link(
            &unit.var,
            Endpoint::snapshot(DELETION_MARKER, marker),
            "delete",
            Metadata::new(),
        )?;
        self.step_store(&e.dst)
    }
}

/// Builds one trace. Pure function of `config`; `case_id` only names it.
pub fn generate(config: &SimConfig, case_id: &str) -> Result<FaultCase, SimError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let topic = &TOPICS[pick(&mut rng, TOPICS.len())];
    let golden_idx = pick(&mut rng, topic.answers.len());
    let golden = topic.answers[golden_idx];
    let wrong = topic.answers[(golden_idx + 1 + pick(&mut rng, topic.answers.len() - 1)) % topic.answers.len()];
    let evidence_idx = pick(&mut rng, config.n_messages);
    let fault = config.fault;

    let mut b = Builder {
        ctx: TraceContext::new(case_id),
        store: None,
        store_rev: 0,
        live: Vec::new(),
    };
    let mut truth_op: Option<String> = None;
    let unit_cfg = VarConfig::new("memory_unit").identity(MEM0_DICT);
    let msg_cfg = VarConfig::new(RAW_MESSAGE);

    b.ctx.begin_session(
        "memory_construction",
        "incremental memory construction",
        Metadata::new(),
    )?;
    let mut evidence_msg: Option<VarRef> = None;
    let mut evidence_unit: Option<String> = None;
    let mut next_unit = 0usize;
    for i in 0..config.n_messages {
        let is_evidence = i == evidence_idx;
        let body = if is_evidence {
            fill(topic.fact, golden)
        } else {
            let t = pick(&mut rng, CHATTER.len());
            fill(CHATTER[t], FILLERS[t][pick(&mut rng, 4)])
        };
        debug_assert!(is_evidence || !body.to_lowercase().contains(&golden.to_lowercase()));
        let msg = b.ctx.comment_variable(&format!("[message {i}] {body}"), &msg_cfg)?;
        if is_evidence {
            evidence_msg = Some(msg.clone());
        }

        let op = b.begin_op(
            "extract_memory",
            "extraction",
            format!("Extract memory units from message {i}."),
        )?;
        for m in 0..config.memories_per_message {
            let id = format!("mem_{next_unit}");
            next_unit += 1;
            let text = match (is_evidence, m, fault) {
                (true, 0, Some(ErrorType::Extraction)) => "User mentioned some personal news.".to_string(),
                (true, 0, _) => fill(topic.unit, golden),
                (_, 0, _) => format!("User said: {body}"),
                _ => format!("User said: {body} (detail {m})"),
            };
            let e = b.ctx.comment_link(
                &msg,
                Endpoint::snapshot(unit_text(&id, 0, &text), unit_cfg.clone()),
                "extract",
                Metadata::new(),
            )?;
            if is_evidence && m == 0 {
                evidence_unit = Some(id.clone());
                if fault == Some(ErrorType::Extraction) {
                    truth_op = Some(op.clone());
                }
            }
            b.live.push(Unit {
                id,
                var: e.dst,
                text,
                revision: 0,
            });
        }
        b.step_store(&msg)?;
        b.end_op()?;

        // at most one maintenance operation per message
        let ev_pos = evidence_unit
            .as_ref()
            .and_then(|id| b.live.iter().position(|u| &u.id == id));
        if is_evidence && matches!(fault, Some(ErrorType::Update | ErrorType::Deletion)) {
            let pos = ev_pos.expect("evidence unit was just extracted");
            if fault == Some(ErrorType::Update) {
                truth_op = Some(b.begin_op("update_memory", "update", "Update an existing memory unit.".into())?);
                b.rewrite_unit(pos, fill(topic.unit, wrong), "update")?;
            } else {
                truth_op = Some(b.begin_op("delete_memory", "deletion", "Delete an outdated memory unit.".into())?);
                b.delete_unit(pos)?;
            }
            b.end_op()?;
            continue;
        }
        let others: Vec<usize> = (0..b.live.len()).filter(|&p| Some(p) != ev_pos).collect();
        if others.is_empty() {
            continue;
        }
        let roll: f64 = rng.gen();
        if roll < config.update_prob {
            let p = others[pick(&mut rng, others.len())];
            b.begin_op("update_memory", "update", "Update an existing memory unit.".into())?;
            let text = format!("{} (confirmed again)", b.live[p].text);
            b.rewrite_unit(p, text, "update")?;
            b.end_op()?;
        } else if roll < config.update_prob + config.delete_prob {
            let p = others[pick(&mut rng, others.len())];
            b.begin_op("delete_memory", "deletion", "Delete an outdated memory unit.".into())?;
            b.delete_unit(p)?;
            b.end_op()?;
        }
    }
    b.ctx.end_session()?;

    b.ctx
        .begin_session("retrieval", "memory retrieval for the question", Metadata::new())?;
    let question = b.ctx.comment_variable(topic.question, &VarConfig::new("question"))?;
    let store = b.store.clone().expect("at least one message was processed");

    b.begin_op(
        "embed_query",
        "retrieval",
        "Embed the question for vector search.".into(),
    )?;
    let qe = b
        .ctx
        .comment_link(
            &question,
            Endpoint::snapshot(
                format!("id=query_embedding\nmodel=hashing-256\ntext={}", topic.question),
                VarConfig::new("query_embedding"),
            ),
            "embed",
            Metadata::new(),
        )?
        .dst;
    b.ctx.comment_link(&store, &qe, "search space", Metadata::new())?;
    b.end_op()?;

    let search_op = b.begin_op(
        "search_memory",
        "retrieval",
        format!("Retrieve the top {} memory units.", config.top_k),
    )?;
    if fault == Some(ErrorType::Retrieval) {
        truth_op = Some(search_op);
    }
    let ev_live = evidence_unit
        .as_ref()
        .and_then(|id| b.live.iter().position(|u| &u.id == id));
    let mut ranked: Vec<usize> = Vec::new();
    if let Some(p) = ev_live {
        if fault != Some(ErrorType::Retrieval) {
            ranked.push(p);
        }
    }
    let corpus =
        Corpus::new(b.live.iter().map(|u| (u.var.clone(), u.text.clone())).collect()).expect("unit ids are unique");
    let terms = crate::retrieval::tokenize(topic.question).into_iter().collect();
    let mut scored: Vec<(f64, usize)> = (0..b.live.len())
        .filter(|&p| Some(p) != ev_live)
        .map(|p| (corpus.bm25(p, &terms), p))
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    ranked.extend(scored.into_iter().map(|(_, p)| p));
    ranked.truncate(config.top_k);

    let mut listing = String::from("id=search_results");
    for &p in &ranked {
        let _ = write!(listing, "\n{}: {}", b.live[p].id, b.live[p].text);
    }
    let results_cfg = VarConfig::new("retrieved_units").identity("by-field:id");
    let results = b
        .ctx
        .comment_link(&qe, Endpoint::snapshot(listing, results_cfg), "query", Metadata::new())?
        .dst;
    b.ctx.comment_link(&store, &results, "search space", Metadata::new())?;
    for &p in &ranked {
        let var = b.live[p].var.clone();
        b.ctx.comment_link(&var, &results, "retrieved", Metadata::new())?;
    }
    b.end_op()?;

    b.begin_op(
        "assemble_context",
        "retrieval",
        "Assemble retrieved memories into context.".into(),
    )?;
    let mut context_text = String::from("Relevant memories:");
    for &p in &ranked {
        let _ = write!(context_text, "\n- {}", b.live[p].text);
    }
    let context = b
        .ctx
        .comment_link(
            &results,
            Endpoint::snapshot(context_text.clone(), VarConfig::new("retrieved_context")),
            "assemble",
            Metadata::new(),
        )?
        .dst;
    b.end_op()?;
    b.ctx.end_session()?;

    b.ctx.begin_session("response", "answer generation", Metadata::new())?;
    b.begin_op("build_prompt", "response", "Build the answer prompt.".into())?;
    let prompt_text = format!(
        "Answer the question using only the memories below.\n{context_text}\nQuestion: {}",
        topic.question
    );
    let prompt = b
        .ctx
        .comment_link(
            &context,
            Endpoint::snapshot(prompt_text, VarConfig::new("prompt")),
            "prompt",
            Metadata::new(),
        )?
        .dst;
    b.ctx.comment_link(&question, &prompt, "question", Metadata::new())?;
    b.end_op()?;

    let gen_op = b.begin_op("generate_answer", "response", "Generate the final answer.".into())?;
    let knows = ranked.iter().any(|&p| b.live[p].text.contains(golden));
    let answer = if fault == Some(ErrorType::Response) {
        truth_op = Some(gen_op);
        format!("Answer: {wrong}")
    } else if knows {
        format!("Answer: {golden}")
    } else {
        "Answer: I do not know.".to_string()
    };
    let prediction = b
        .ctx
        .comment_link(
            &prompt,
            Endpoint::snapshot(answer.clone(), VarConfig::new("prediction")),
            "answer",
            Metadata::new(),
        )?
        .dst;
    b.end_op()?;
    b.ctx.end_session()?;

    let failed = !answer.to_lowercase().contains(&golden.to_lowercase());
    let evidence = vec![evidence_msg.expect("evidence message emitted")];
    let meta = [
        (META_CASE_ID, case_id.to_string()),
        (META_SEED, config.seed.to_string()),
        (META_QUESTION, question.to_string()),
        (META_GOLDEN, golden.to_string()),
        (
            META_EVIDENCE,
            evidence.iter().map(VarRef::to_string).collect::<Vec<_>>().join(","),
        ),
        (META_PREDICTION, prediction.to_string()),
        (META_TRUTH_OP, truth_op.clone().unwrap_or_default()),
        (META_TRUTH_TYPE, fault.map(|t| t.to_string()).unwrap_or_default()),
        (META_OUTCOME, u8::from(failed).to_string()),
    ];
    for (k, v) in meta {
        b.ctx.set_metadata(k, v)?;
    }
    let graph = b.ctx.finish()?;
    Ok(FaultCase {
        case_id: case_id.to_string(),
        seed: config.seed,
        graph,
        question_var: question,
        golden_answer: golden.to_string(),
        evidence,
        prediction_var: prediction,
        truth_op_id: truth_op,
        truth_error_type: fault,
        failed,
    })
}

/// Ground-truth outcome semantics: an operation's outputs are corrupted
/// when it is faulty and neither intervened on nor downstream of the
/// intervention, or when it reads a corrupted input. Intervention only
/// suppresses an operation's own fault; corruption arriving through its
/// inputs still flows. The run fails iff the target variable is corrupted.
pub struct PropagationOracle<'g> {
    index: GraphIndex<'g>,
    faulty: OpSet,
    target: VarRef,
    order: Vec<usize>,
}

impl<'g> PropagationOracle<'g> {
    pub fn new(graph: &'g ExecutionGraph, faulty: OpSet, target: VarRef) -> Self {
        let index = graph.index();
        let order = index
            .dag()
            .topo_order()
            .expect("valid graphs have an acyclic operation relation");
        Self {
            index,
            faulty,
            target,
            order,
        }
    }

    pub fn corrupted_ops(&self, intervention: &OpSet) -> OpSet {
        let dag = self.index.dag();
        let seeds: Vec<usize> = intervention.iter().filter_map(|o| dag.position(o)).collect();
        let idealized = dag.closure(&seeds, Direction::Down);
        let mut bad = vec![false; dag.len()];
        for &i in &self.order {
            let id = &dag.ids()[i];
            let own_fault = self.faulty.contains(id) && !intervention.contains(id) && !idealized.contains(&i);
            bad[i] = own_fault
                || self
                    .index
                    .inputs_of(id)
                    .unwrap_or_default()
                    .iter()
                    .any(|v| self.var_bad(v, &bad));
        }
        (0..dag.len())
            .filter(|&i| bad[i])
            .map(|i| dag.ids()[i].clone())
            .collect()
    }

    fn var_bad(&self, v: &VarRef, bad: &[bool]) -> bool {
        let dag = self.index.dag();
        self.index
            .producers_of(v)
            .into_iter()
            .any(|p| dag.position(p).is_some_and(|i| bad[i]))
    }

    pub fn target(&self) -> &VarRef {
        &self.target
    }
}

impl OutcomeOracle for PropagationOracle<'_> {
    fn fails(&self, _graph: &ExecutionGraph, intervention: &OpSet) -> bool {
        let bad_ops = self.corrupted_ops(intervention);
        self.index
            .producers_of(&self.target)
            .into_iter()
            .any(|p| bad_ops.contains(p))
    }
}

/// Reads the case description a generated trace carries in its metadata.
pub fn case_from_graph(graph: &ExecutionGraph) -> Option<(CaseSpec, Option<Truth>)> {
    let get = |k: &str| graph.metadata.get(k);
    let spec = CaseSpec {
        case_id: get(META_CASE_ID).cloned().unwrap_or_else(|| graph.graph_id.clone()),
        question_var: get(META_QUESTION)?.parse().ok()?,
        golden_answer: get(META_GOLDEN)?.clone(),
        evidence: get(META_EVIDENCE)
            .map(|s| {
                s.split(',')
                    .filter(|x| !x.is_empty())
                    .filter_map(|x| x.parse().ok())
                    .collect()
            })
            .unwrap_or_default(),
    };
    let truth = match (get(META_TRUTH_OP), get(META_TRUTH_TYPE)) {
        (Some(op), Some(t)) if !op.is_empty() => Some(Truth {
            op_id: op.clone(),
            error_type: t.parse().ok()?,
        }),
        _ => None,
    };
    Some((spec, truth))
}

/// Per-stratum counts by largest remainder; ties go to earlier strata.
pub fn stratified_counts(n: usize, weights: &[u32]) -> Vec<usize> {
    let total: u64 = weights.iter().map(|&w| u64::from(w)).sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights
        .iter()
        .map(|&w| (n as u64 * u64::from(w) / total) as usize)
        .collect();
    let mut rema: Vec<(u64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| (n as u64 * u64::from(w) % total, i))
        .collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = n - counts.iter().sum::<usize>();
    for &(_, i) in rema.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Stratified suite: counts per stratum from `mix` weights, cases
/// interleaved round-robin across strata. Case `i` uses seed
/// `base_seed * 1_000_003 + i`.
pub fn make_suite(
    n_cases: usize,
    base_seed: u64,
    mix: &[(Option<ErrorType>, u32)],
    template: &SimConfig,
) -> Result<Vec<FaultCase>, SimError> {
    let weights: Vec<u32> = mix.iter().map(|(_, w)| *w).collect();
    let mut left = stratified_counts(n_cases, &weights);
    let mut cases = Vec::with_capacity(n_cases);
    while cases.len() < n_cases {
        for (s, (fault, _)) in mix.iter().enumerate() {
            if left[s] == 0 {
                continue;
            }
            left[s] -= 1;
            let i = cases.len() as u64;
            let config = SimConfig {
                seed: base_seed.wrapping_mul(1_000_003).wrapping_add(i),
                fault: *fault,
                ..template.clone()
            };
            cases.push(generate(&config, &format!("case-{i:04}"))?);
        }
    }
    Ok(cases)
}

/// Equal weights over the five pipeline error types.
pub fn uniform_system_mix() -> Vec<(Option<ErrorType>, u32)> {
    ErrorType::SYSTEM.iter().map(|&t| (Some(t), 1)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub seed: u64,
    pub truth: Option<Truth>,
}

/// Tab-separated `case_id seed truth_op_id truth_error_type`, with `-`
/// for missing truth fields.
pub fn write_manifest(cases: &[FaultCase]) -> String {
    let mut out = String::new();
    for c in cases {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            c.case_id,
            c.seed,
            c.truth_op_id.as_deref().unwrap_or("-"),
            c.truth_error_type.map(|t| t.as_str()).unwrap_or("-")
        );
    }
    out
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, SimError> {
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| SimError::Manifest { line: n + 1, message };
        let cols: Vec<&str> = line.split('\t').collect();
        let [case_id, seed, op, ty] = cols[..] else {
            return Err(err(format!("expected 4 tab-separated fields, found {}", cols.len())));
        };
        let seed = seed.parse().map_err(|_| err(format!("bad seed `{seed}`")))?;
        let truth = match (op, ty) {
            ("-", "-") => None,
            (op, ty) => Some(Truth {
                op_id: op.to_string(),
                error_type: ty
                    .parse()
                    .map_err(|e: crate::attribution::UnknownErrorType| err(e.to_string()))?,
            }),
        };
        entries.push(ManifestEntry {
            case_id: case_id.to_string(),
            seed,
            truth,
        });
    }
    Ok(entries)
}

/// Truth table keyed by case id, for scoring.
pub fn truths_of(cases: &[FaultCase]) -> BTreeMap<String, Truth> {
    cases
        .iter()
        .filter_map(|c| Some((c.case_id.clone(), c.truth()?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::persist;

    fn case(seed: u64, fault: Option<ErrorType>) -> FaultCase {
        generate(&SimConfig::with_seed(seed, fault), "t").unwrap()
    }

    #[test]
    fn clean_case_answers_correctly() {
        for seed in 0..20 {
            let c = case(seed, None);
            assert!(!c.failed, "seed {seed}");
            assert!(c.graph.validate().is_empty(), "seed {seed}");
            assert!(c.truth().is_none());
            assert!(!c.propagation().fails(&c.graph, &OpSet::new()));
        }
    }

    #[test]
    fn every_fault_fails_and_is_rescued_by_its_op() {
        for t in ErrorType::SYSTEM {
            for seed in 0..10 {
                let c = case(seed, Some(t));
                assert!(c.failed, "{t} seed {seed}");
                assert!(c.graph.validate().is_valid(), "{t} seed {seed}");
                let oracle = c.propagation();
                assert!(oracle.fails(&c.graph, &OpSet::new()));
                assert!(!oracle.fails(&c.graph, &c.faulty_ops()));
                let op = c.graph.operation(c.truth_op_id.as_ref().unwrap()).unwrap();
                assert_eq!(op.category, t.as_str());
            }
        }
    }

    #[test]
    fn evaluation_side_types_are_rejected() {
        for t in [ErrorType::Annotation, ErrorType::Judge] {
            assert!(matches!(
                generate(&SimConfig::with_seed(1, Some(t)), "t"),
                Err(SimError::Config(_))
            ));
        }
        let bad = SimConfig {
            top_k: 0,
            ..SimConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generation_is_pure() {
        let a = case(7, Some(ErrorType::Update));
        let b = case(7, Some(ErrorType::Update));
        assert_eq!(
            persist::export(&a.graph, true).unwrap(),
            persist::export(&b.graph, true).unwrap()
        );
    }

    #[test]
    fn only_evidence_mentions_golden() {
        for seed in 0..30 {
            let c = case(seed, None);
            let golden = c.golden_answer.to_lowercase();
            for chain in c.graph.variables_in_category(RAW_MESSAGE) {
                let hit = chain.versions[0].value.to_lowercase().contains(&golden);
                let is_ev = c.evidence[0].var_id == chain.var_id;
                assert_eq!(hit, is_ev, "seed {seed}");
            }
        }
    }

    #[test]
    fn extraction_fault_seed7_loses_fact() {
        let c = case(7, Some(ErrorType::Extraction));
        for chain in c.graph.variables_in_category("memory_unit") {
            for v in &chain.versions {
                assert!(!v.value.contains(&c.golden_answer));
            }
        }
    }

    #[test]
    fn retrieval_fault_seed7_excludes_live_unit() {
        let c = case(7, Some(ErrorType::Retrieval));
        let g = &c.graph;
        let ix = g.index();
        let search = c.truth_op_id.clone().unwrap();
        let golden_units: Vec<_> = g
            .variables_in_category("memory_unit")
            .filter(|ch| ch.latest().unwrap().value.contains(&c.golden_answer))
            .collect();
        assert_eq!(golden_units.len(), 1);
        let unit = golden_units[0];
        let latest = VarRef::new(unit.var_id.clone(), unit.latest().unwrap().version);
        assert!(!ix.inputs_of(&search).unwrap().contains(&latest));
        // the unit is still listed in the store the search reads
        let store_in: Vec<_> = ix
            .inputs_of(&search)
            .unwrap()
            .into_iter()
            .filter(|v| g.variable(&v.var_id).unwrap().category == "memory_state")
            .collect();
        let store_text = &g.version(&store_in[0]).unwrap().value;
        let unit_id = crate::recorder::field_value(&unit.versions[0].value, "id").unwrap();
        assert!(store_text.split(['=', ',', '\n']).any(|t| t == unit_id));
        // a correct downstream op does not rescue
        let oracle = c.propagation();
        let assemble = ix
            .dag()
            .successors(ix.dag().position(&search).unwrap())
            .iter()
            .next()
            .copied()
            .unwrap();
        let downstream: OpSet = [ix.dag().ids()[assemble].clone()].into();
        assert!(oracle.fails(g, &downstream));
    }

    #[test]
    fn small_graphs_are_sequential() {
        for seed in 0..50 {
            let config = SimConfig {
                seed,
                n_messages: 3,
                fault: Some(ErrorType::SYSTEM[seed as usize % 5]),
                ..SimConfig::default()
            };
            let c = generate(&config, "t").unwrap();
            assert!(c.graph.operations.len() <= 12);
            assert!(c.graph.index().dag().is_total_order(), "seed {seed}");
        }
    }

    #[test]
    fn suite_stratification() {
        let template = SimConfig {
            n_messages: 4,
            ..SimConfig::default()
        };
        let s = make_suite(5, 3, &[(Some(ErrorType::Retrieval), 1)], &template).unwrap();
        assert!(s
            .iter()
            .all(|c| c.failed && c.truth_error_type == Some(ErrorType::Retrieval)));
        let s = make_suite(
            4,
            3,
            &[(Some(ErrorType::Extraction), 2), (Some(ErrorType::Response), 2)],
            &template,
        )
        .unwrap();
        let n_ext = s
            .iter()
            .filter(|c| c.truth_error_type == Some(ErrorType::Extraction))
            .count();
        assert_eq!(n_ext, 2);
        assert_eq!(stratified_counts(200, &[1; 5]), vec![40; 5]);
        assert_eq!(stratified_counts(7, &[1, 1, 1]), vec![3, 2, 2]);
    }

    #[test]
    fn manifest_round_trip() {
        let template = SimConfig {
            n_messages: 3,
            ..SimConfig::default()
        };
        let s = make_suite(3, 9, &[(None, 1), (Some(ErrorType::Deletion), 2)], &template).unwrap();
        let text = write_manifest(&s);
        let parsed = parse_manifest(&text).unwrap();
        assert_eq!(parsed.len(), 3);
        for (e, c) in parsed.iter().zip(&s) {
            assert_eq!(e.seed, c.seed);
            assert_eq!(e.truth, c.truth());
        }
        assert!(parse_manifest("a\tb\n").is_err());
        let (spec, truth) = case_from_graph(&s[1].graph).unwrap();
        assert_eq!(spec, s[1].spec());
        assert_eq!(truth, s[1].truth());
    }
}
