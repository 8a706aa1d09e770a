use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tracegraph"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin().args(args).current_dir(dir).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn generate(dir: &Path, n: &str) {
    let out = run(
        &[
            "bench",
            "generate",
            "--out",
            "suite",
            "--n",
            n,
            "--seed",
            "5",
            "--n-messages",
            "12",
        ],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_exit_codes() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "1");
    assert_eq!(code(&run(&["validate", "suite/case-0000.trace.json"], dir.path())), 0);
    assert_eq!(code(&run(&["validate", "missing.trace.json"], dir.path())), 2);
    fs::write(dir.path().join("junk.trace.json"), "{not json").unwrap();
    assert_eq!(code(&run(&["validate", "junk.trace.json"], dir.path())), 2);

    // an edge pointing at an unknown version is a violation, not a parse failure
    let text = fs::read_to_string(dir.path().join("suite/case-0000.trace.json")).unwrap();
    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    let edges = doc["edges"].as_array_mut().unwrap();
    edges[0]["dst"]["version"] = serde_json::json!(9999);
    fs::write(dir.path().join("bad.trace.json"), serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = run(&["validate", "bad.trace.json"], dir.path());
    assert_eq!(code(&out), 1, "{}", stdout(&out));
}

#[test]
fn viz_writes_dot_beside_input() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "1");
    assert_eq!(code(&run(&["viz", "suite/case-0000.trace.json"], dir.path())), 0);
    let dot = fs::read_to_string(dir.path().join("suite/case-0000.dot")).unwrap();
    assert!(dot.starts_with("digraph"));
    assert_eq!(code(&run(&["viz", "nope.trace.json"], dir.path())), 2);
}

#[test]
fn attribute_reports_and_runs_out_of_budget() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "2");
    let manifest = fs::read_to_string(dir.path().join("suite/manifest.tsv")).unwrap();
    let truth_op = manifest.lines().next().unwrap().split('\t').nth(2).unwrap().to_string();

    let out = run(
        &[
            "attribute",
            "suite/case-0000.trace.json",
            "--seed-evidence",
            "--out",
            "r.json",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    let result: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(result["predicted_op_id"], truth_op.as_str());
    assert_eq!(result["terminated_by"], "report");

    fs::write(
        dir.path().join("script.json"),
        r#"["Looking.\n{\"tool\": \"pop_next\", \"args\": {}}"]"#,
    )
    .unwrap();
    let out = run(
        &[
            "attribute",
            "suite/case-0000.trace.json",
            "--backend",
            "scripted:script.json",
            "--max-iters",
            "5",
        ],
        dir.path(),
    );
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    let result: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(result["iterations"], 5);
    assert_eq!(result["predicted_op_id"], "");
}

#[test]
fn bench_is_deterministic_across_job_counts() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "6");
    for (out, jobs) in [("r1", "1"), ("r4", "4")] {
        let o = run(
            &["bench", "run", "--suite", "suite", "--out", out, "--jobs", jobs],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("r1/results.json")).unwrap();
    let b = fs::read(dir.path().join("r4/results.json")).unwrap();
    assert_eq!(a, b);

    let o = run(&["bench", "score", "--suite", "suite", "--results", "r1"], dir.path());
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("100.00   100.00"), "{}", stdout(&o));
    let scores: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("r1/scores.json")).unwrap()).unwrap();
    assert_eq!(scores["eta"], 1.0);
    assert_eq!(scores["cases"], 6);
}

#[test]
fn report_and_optimize_with_scripted_backend() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "2");
    let o = run(&["bench", "run", "--suite", "suite", "--out", "r"], dir.path());
    assert_eq!(code(&o), 0);

    fs::write(
        dir.path().join("report.json"),
        r##"["# Failures\nBoth cases lose the fact early.\n"]"##,
    )
    .unwrap();
    let o = run(
        &["report", "r", "--backend", "scripted:report.json", "--out", "report.md"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(
        fs::read_to_string(dir.path().join("report.md")).unwrap(),
        "# Failures\nBoth cases lose the fact early.\n"
    );

    // a prompt bound to no operation in the suite stays byte-identical
    let untouched = "{\"other\":{\"text\":\"keep\",\"bound_ops\":[\"no_such_op\"]}}";
    fs::write(dir.path().join("reg.json"), untouched).unwrap();
    fs::write(dir.path().join("opt.json"), r#"["rewritten prompt"]"#).unwrap();
    let args = [
        "optimize",
        "--suite",
        "suite",
        "--results",
        "r",
        "--registry",
        "reg.json",
        "--backend",
        "scripted:opt.json",
        "--out",
        "reg2.json",
    ];
    assert_eq!(code(&run(&args, dir.path())), 0);
    assert_eq!(fs::read_to_string(dir.path().join("reg2.json")).unwrap(), untouched);

    let bound = r#"{"extract":{"text":"v1","bound_ops":["extract_memory","update_memory","delete_memory"]},
        "other":{"text":"keep","bound_ops":["no_such_op"]}}"#;
    fs::write(dir.path().join("reg.json"), bound).unwrap();
    assert_eq!(code(&run(&args, dir.path())), 0);
    let reg: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("reg2.json")).unwrap()).unwrap();
    assert_eq!(reg["extract"]["text"], "rewritten prompt");
    assert_eq!(reg["extract"]["history"], serde_json::json!(["v1"]));
    assert_eq!(reg["other"]["text"], "keep");
}

#[test]
fn unknown_backend_is_rejected() {
    let dir = TempDir::new().unwrap();
    generate(dir.path(), "1");
    let o = run(
        &["attribute", "suite/case-0000.trace.json", "--backend", "mystery"],
        dir.path(),
    );
    assert_eq!(code(&o), 2);
}

fn golden_trace() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/golden/seed7.trace.json")
}

#[test]
fn empty_graph_renders_minimal_dot() {
    let dir = TempDir::new().unwrap();
    let empty = r#"{"format_version":"tracegraph/1","graph_id":"e","metadata":{},"sessions":[],"operations":[],"variables":[],"edges":[]}"#;
    fs::write(dir.path().join("e.trace.json"), empty).unwrap();
    assert_eq!(code(&run(&["viz", "e.trace.json", "-o", "e.dot"], dir.path())), 0);
    let dot = fs::read_to_string(dir.path().join("e.dot")).unwrap();
    assert!(dot.starts_with("digraph") && dot.trim_end().ends_with('}'));
    assert!(!dot.contains("->"));
}

#[test]
fn violation_code_is_printed() {
    let dir = TempDir::new().unwrap();
    let mut doc: serde_json::Value = serde_json::from_slice(&fs::read(golden_trace()).unwrap()).unwrap();
    doc["edges"][0]["op_id"] = serde_json::json!("o999");
    fs::write(dir.path().join("bad.trace.json"), serde_json::to_vec(&doc).unwrap()).unwrap();
    let out = run(&["validate", "bad.trace.json"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stdout(&out).contains("o999"), "{}", stdout(&out));
}

#[test]
fn seed7_case_attributes_in_both_methods() {
    let dir = TempDir::new().unwrap();
    let trace = golden_trace();
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(&trace).unwrap()).unwrap();
    let truth = doc["metadata"]["case.truth_op_id"].as_str().unwrap().to_string();
    let kind = doc["metadata"]["case.truth_error_type"].as_str().unwrap().to_string();
    for method in ["graph", "obs"] {
        let out = run(&["attribute", trace.to_str().unwrap(), "--method", method], dir.path());
        assert_eq!(code(&out), 0, "{method}");
        let r: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
        assert_eq!(r["predicted_op_id"], truth.as_str(), "{method}");
        assert_eq!(r["error_type"], kind.as_str(), "{method}");
    }
}

fn result_json(case: &str, op: &str) -> serde_json::Value {
    serde_json::json!({
        "case_id": case, "predicted_op_id": op, "error_type": "extraction", "explanation": "",
        "meter": {"input_tokens": 1000, "output_tokens": 0, "wall_time_secs": 0.0},
        "iterations": 1, "terminated_by": "report", "peak_context_tokens": 0
    })
}

#[test]
fn mixed_fixture_scores_half() {
    let dir = TempDir::new().unwrap();
    fs::create_dir_all(dir.path().join("suite")).unwrap();
    fs::create_dir_all(dir.path().join("r")).unwrap();
    fs::write(
        dir.path().join("suite/manifest.tsv"),
        "a\t1\to1\textraction\nb\t2\to2\textraction\n",
    )
    .unwrap();
    let results = serde_json::json!([result_json("a", "o1"), result_json("b", "o9")]);
    fs::write(dir.path().join("r/results.json"), results.to_string()).unwrap();
    let out = run(&["bench", "score", "--suite", "suite", "--results", "r"], dir.path());
    assert_eq!(code(&out), 0);
    let table = stdout(&out);
    assert!(table.contains("100.00    50.00"), "{table}");
}

#[test]
fn report_revisions_and_idle_optimize() {
    let dir = TempDir::new().unwrap();
    fs::create_dir_all(dir.path().join("none")).unwrap();
    fs::create_dir_all(dir.path().join("nine")).unwrap();
    fs::write(dir.path().join("none/results.json"), "[]").unwrap();
    let nine: Vec<_> = (0..9).map(|i| result_json(&format!("c{i}"), "o1")).collect();
    fs::write(
        dir.path().join("nine/results.json"),
        serde_json::Value::from(nine).to_string(),
    )
    .unwrap();
    fs::write(dir.path().join("s.json"), r#"["body"]"#).unwrap();

    let out = run(
        &["report", "none", "--backend", "scripted:s.json", "-o", "empty.md"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert_eq!(fs::read_to_string(dir.path().join("empty.md")).unwrap(), "");

    let out = run(
        &["report", "nine", "--backend", "scripted:s.json", "-o", "nine.md"],
        dir.path(),
    );
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).starts_with("3 revision(s)"), "{}", stdout(&out));

    let registry = "{ \"p\": {\"text\": \"t\", \"bound_ops\": [\"extract_memory\"]} }\n";
    fs::write(dir.path().join("reg.json"), registry).unwrap();
    let args = [
        "optimize",
        "--suite",
        ".",
        "--results",
        "none",
        "--registry",
        "reg.json",
        "--backend",
        "scripted:s.json",
        "-o",
        "reg2.json",
    ];
    assert_eq!(code(&run(&args, dir.path())), 0);
    assert_eq!(fs::read(dir.path().join("reg2.json")).unwrap(), registry.as_bytes());
}

#[test]
fn viz_of_golden_trace_matches_golden_dot() {
    let dir = TempDir::new().unwrap();
    let out = run(&["viz", golden_trace().to_str().unwrap(), "-o", "g.dot"], dir.path());
    assert_eq!(code(&out), 0);
    let want = fs::read(golden_trace().with_file_name("seed7.dot")).unwrap();
    assert_eq!(fs::read(dir.path().join("g.dot")).unwrap(), want);
}
