use std::collections::{BTreeMap, BTreeSet, VecDeque};

use proptest::prelude::*;
use proptest::sample::Index;
use regex::Regex;
use tracegraph::attribution::{
    brute_force_decisive_sets, check_candidate, score, AttributionResult, ErrorType, OpSet, Termination, Truth,
};
use tracegraph::explorer::{render_operation_subgraph, RenderMode, ToExploreList};
use tracegraph::faultsim::PropagationOracle;
use tracegraph::graph::{ExecutionGraph, VarRef};
use tracegraph::model::CostMeter;
use tracegraph::obs::build_log;
use tracegraph::persist;
use tracegraph::recorder::{Endpoint, TraceContext, VarConfig};

const WORDS: [&str; 6] = ["apple", "river", "stone", "cloud", "ember", "maple"];
const SENTINEL: &str = "ZQXSENTINEL";

#[derive(Debug, Clone)]
struct OpScript {
    new_session: bool,
    reads: Vec<Index>,
    writes: Vec<usize>,
}

fn op_script() -> impl Strategy<Value = OpScript> {
    (
        any::<bool>(),
        prop::collection::vec(any::<Index>(), 0..3),
        prop::collection::vec(0..WORDS.len(), 1..3),
    )
        .prop_map(|(new_session, reads, writes)| OpScript {
            new_session,
            reads,
            writes,
        })
}

/// Replays a script through the recorder. Each operation links every read
/// to every written snapshot; an operation with nothing to read records a
/// fresh input of its own.
fn record(script: &[OpScript]) -> ExecutionGraph {
    let mut ctx = TraceContext::new("prop");
    let mut known: Vec<VarRef> = Vec::new();
    ctx.begin_session("s", "", Default::default()).unwrap();
    for (i, op) in script.iter().enumerate() {
        if op.new_session && i > 0 {
            ctx.end_session().unwrap();
            ctx.begin_session("s", "", Default::default()).unwrap();
        }
        ctx.begin_operation(format!("step{i}"), "extraction", "", Default::default())
            .unwrap();
        let mut reads: Vec<VarRef> = op
            .reads
            .iter()
            .filter(|_| !known.is_empty())
            .map(|ix| ix.get(&known).clone())
            .collect();
        if reads.is_empty() {
            let fresh = format!("input {i} {SENTINEL}");
            reads.push(ctx.comment_variable(&fresh, &VarConfig::new("raw_message")).unwrap());
        }
        for &w in &op.writes {
            for r in &reads {
                let dst = Endpoint::snapshot(format!("{} {SENTINEL}", WORDS[w]), VarConfig::new("memory_unit"));
                let edge = ctx.comment_link(r.clone(), dst, "", Default::default()).unwrap();
                known.push(edge.dst);
            }
        }
        known.extend(reads);
        ctx.end_operation().unwrap();
    }
    ctx.end_session().unwrap();
    ctx.finish().unwrap()
}

fn script() -> impl Strategy<Value = Vec<OpScript>> {
    prop::collection::vec(op_script(), 1..10)
}

/// Precedence straight from the edge list: a -> b when some version a
/// writes is read by b.
fn naive_successors(g: &ExecutionGraph) -> BTreeMap<String, BTreeSet<String>> {
    let mut ins: BTreeMap<&str, BTreeSet<&VarRef>> = BTreeMap::new();
    let mut outs: BTreeMap<&str, BTreeSet<&VarRef>> = BTreeMap::new();
    for e in &g.edges {
        ins.entry(&e.op_id).or_default().insert(&e.src);
        outs.entry(&e.op_id).or_default().insert(&e.dst);
    }
    let mut succ: BTreeMap<String, BTreeSet<String>> =
        g.operations.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
    for a in g.operations.keys() {
        for b in g.operations.keys() {
            let (Some(oa), Some(ib)) = (outs.get(a.as_str()), ins.get(b.as_str())) else {
                continue;
            };
            if a != b && !oa.is_disjoint(ib) {
                succ.get_mut(a).unwrap().insert(b.clone());
            }
        }
    }
    succ
}

fn bfs(adj: &BTreeMap<String, BTreeSet<String>>, start: &str) -> BTreeSet<String> {
    let mut seen = BTreeSet::new();
    let mut queue: VecDeque<&str> = adj[start].iter().map(String::as_str).collect();
    while let Some(n) = queue.pop_front() {
        if seen.insert(n.to_string()) {
            queue.extend(adj[n].iter().map(String::as_str));
        }
    }
    seen
}

fn reverse(adj: &BTreeMap<String, BTreeSet<String>>) -> BTreeMap<String, BTreeSet<String>> {
    let mut rev: BTreeMap<String, BTreeSet<String>> = adj.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
    for (a, bs) in adj {
        for b in bs {
            rev.get_mut(b).unwrap().insert(a.clone());
        }
    }
    rev
}

fn latest_output(g: &ExecutionGraph) -> VarRef {
    g.edges.iter().max_by_key(|e| g.ts_of(&e.dst)).unwrap().dst.clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn recorded_scripts_are_valid_and_point_forward(s in script()) {
        let g = record(&s);
        prop_assert!(g.validate().is_valid());
        for e in &g.edges {
            prop_assert!(g.ts_of(&e.src) < g.ts_of(&e.dst));
        }
        prop_assert_eq!(g.operations.len(), s.len());
    }

    #[test]
    fn closures_match_naive_bfs(s in script()) {
        let g = record(&s);
        let down = naive_successors(&g);
        let up = reverse(&down);
        for op in g.operations.keys() {
            prop_assert_eq!(g.op_descendants(&[op]).unwrap(), bfs(&down, op));
            prop_assert_eq!(g.op_ancestors(&[op]).unwrap(), bfs(&up, op));
        }
    }

    #[test]
    fn canonical_export_is_a_fixed_point(s in script()) {
        let g = record(&s);
        let a = persist::export(&g, true).unwrap();
        let back = persist::import(&a).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(persist::export(&back, true).unwrap(), a.clone());
        let loose = persist::import(&persist::export(&g, false).unwrap()).unwrap();
        prop_assert_eq!(persist::export(&loose, true).unwrap(), a);
    }

    #[test]
    fn decisive_sets_are_the_minimal_valid_candidates(s in script(), mask in any::<u16>()) {
        let g = record(&s);
        let mut ids: Vec<String> = g.operations.keys().cloned().collect();
        ids.sort();
        let faulty: OpSet = ids.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, id)| id.clone()).collect();
        let outcome = PropagationOracle::new(&g, faulty.clone(), latest_output(&g));
        let got = brute_force_decisive_sets(&g, &faulty, &outcome, 12).unwrap();

        let up = reverse(&naive_successors(&g));
        let mut valid: Vec<OpSet> = Vec::new();
        for bits in 0u32..(1 << ids.len()) {
            let cand: OpSet = ids.iter().enumerate().filter(|(i, _)| bits >> i & 1 == 1).map(|(_, id)| id.clone()).collect();
            // strict: the candidate's own members never count as its ancestors
            let ancestors: BTreeSet<String> = cand.iter().flat_map(|c| bfs(&up, c)).filter(|a| !cand.contains(a)).collect();
            let ok = cand.iter().all(|c| faulty.contains(c))
                && ancestors.iter().all(|a| !faulty.contains(a))
                && !tracegraph::attribution::OutcomeOracle::fails(&outcome, &g, &cand);
            let verdict = check_candidate(&g, &cand, &faulty, &outcome).unwrap();
            prop_assert_eq!(ok, verdict.valid(), "{:?} faulty {:?} anc {:?}", verdict, faulty, ancestors);
            if ok {
                valid.push(cand);
            }
        }
        let mut minimal: Vec<OpSet> = valid
            .iter()
            .filter(|v| !valid.iter().any(|w| w != *v && w.is_subset(v)))
            .cloned()
            .collect();
        minimal.sort_by(|a, b| a.len().cmp(&b.len()).then(a.iter().cmp(b.iter())));
        prop_assert_eq!(got, minimal);
    }

    #[test]
    fn preview_never_shows_values(s in script()) {
        let g = record(&s);
        let index = g.index();
        for op in g.operations.keys() {
            let preview = render_operation_subgraph(&index, op, RenderMode::Preview, 0, 4000).unwrap();
            prop_assert!(!preview.contains(SENTINEL));
            let full = render_operation_subgraph(&index, op, RenderMode::Full, 0, usize::MAX).unwrap();
            prop_assert!(full.contains(SENTINEL));
        }
    }

    #[test]
    fn operation_log_hides_variable_ids(s in script()) {
        let g = record(&s);
        let text = build_log(&g).render();
        let ids = Regex::new(r"\bv\d+(#\d+)?\b").unwrap();
        prop_assert!(!ids.is_match(&text), "{}", text);
        prop_assert_eq!(build_log(&g).len(), g.operations.len());
    }

    #[test]
    fn explore_list_pops_earliest_first(entries in prop::collection::vec((0u32..50, 0u64..1000), 0..40), cap in 1usize..20) {
        let mut list = ToExploreList::new(cap);
        for (v, ts) in &entries {
            let _ = list.insert(VarRef::new(format!("v{v}"), 0), *ts);
            prop_assert!(list.len() <= cap);
        }
        let mut last = None;
        while let Some((ts, r)) = list.pop() {
            prop_assert!(last.is_none_or(|l| l <= (ts, r.clone())));
            last = Some((ts, r));
        }
    }

    #[test]
    fn score_ignores_result_order(
        rows in prop::collection::vec((0usize..7, 0usize..7, 0u64..10_000, 0.0f64..600.0), 1..20),
        seed in any::<u64>(),
    ) {
        let truths: BTreeMap<String, Truth> = (0..rows.len())
            .map(|i| (format!("c{i}"), Truth { op_id: format!("o{}", i % 3), error_type: ErrorType::ALL[i % 7] }))
            .collect();
        let results: Vec<AttributionResult> = rows
            .iter()
            .enumerate()
            .map(|(i, &(op, t, tokens, secs))| AttributionResult {
                case_id: format!("c{i}"),
                predicted_op_id: format!("o{op}"),
                error_type: Some(ErrorType::ALL[t]),
                explanation: String::new(),
                meter: CostMeter { input_tokens: tokens, output_tokens: 0, wall_time_secs: secs },
                iterations: 1,
                terminated_by: Termination::Report,
                peak_context_tokens: 0,
            })
            .collect();
        let mut shuffled = results.clone();
        let n = shuffled.len();
        shuffled.rotate_left((seed as usize) % n);
        shuffled.swap(0, n - 1);
        let a = score(&results, &truths).unwrap();
        let b = score(&shuffled, &truths).unwrap();
        prop_assert_eq!(a.eta, b.eta);
        prop_assert_eq!(a.oia, b.oia);
        prop_assert!((a.mean_tokens_k - b.mean_tokens_k).abs() < 1e-9);
        prop_assert!((a.mean_minutes - b.mean_minutes).abs() < 1e-9);
    }
}
