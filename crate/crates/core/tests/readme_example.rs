use tracegraph::recorder::{Endpoint, TraceContext, VarConfig};

#[test]
fn readme_recording_example() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("tracegraph-readme-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut ctx = TraceContext::new("run-1");
    ctx.begin_session("memory_construction", "", Default::default())?;
    let msg = ctx.comment_variable("I moved to Lisbon last spring.", &VarConfig::new("raw_message"))?;
    ctx.begin_operation(
        "extract_memory",
        "extraction",
        "LLM fact extraction",
        Default::default(),
    )?;
    let fact = Endpoint::snapshot(
        "id=m1\ntext=lives in Lisbon",
        VarConfig::new("memory_unit").identity("mem0-dict"),
    );
    ctx.comment_link(msg, fact, "extracted", Default::default())?;
    ctx.end_operation()?;
    ctx.end_session()?;
    let graph = ctx.finish()?;
    std::fs::write(dir.join("run-1.trace.json"), tracegraph::persist::export(&graph, true)?)?;
    let back = tracegraph::persist::import(&std::fs::read(dir.join("run-1.trace.json"))?)?;
    assert_eq!(back, graph);
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
