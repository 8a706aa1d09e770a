//! Chat-model backends, tool-call directives and cost metering shared by
//! the attribution agents, the report writer and the prompt optimizer.

use std::collections::BTreeMap;
use std::env;
use std::fs;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const ENV_URL: &str = "TRACEGRAPH_LLM_URL";
pub const ENV_MODEL: &str = "TRACEGRAPH_LLM_MODEL";
pub const ENV_KEY: &str = "TRACEGRAPH_LLM_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
            Role::Tool => "tool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_name: Option<String>,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }

    pub fn tool(name: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_name: Some(name.into()),
        }
    }

    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_name: None,
        }
    }
}

/// Description of one tool offered to the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    /// (argument name, description)
    pub args: Vec<(String, String)>,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str, args: &[(&str, &str)]) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            args: args.iter().map(|(a, d)| (a.to_string(), d.to_string())).collect(),
        }
    }
}

/// Human-readable schema listing, embedded in system instructions.
pub fn render_tool_schema(tools: &[ToolSpec]) -> String {
    let mut out = String::from(
        "End every reply with exactly one tool call on its own final line, as a JSON object:\n\
         {\"tool\": \"<name>\", \"args\": {\"<arg>\": \"<string value>\"}}\n\
         Anything before that line is treated as reasoning.\n\nTools:\n",
    );
    for t in tools {
        out.push_str(&format!("- {}: {}\n", t.name, t.description));
        for (a, d) in &t.args {
            out.push_str(&format!("    {a}: {d}\n"));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default)]
    pub args: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn new(tool: &str, args: &[(&str, &str)]) -> Self {
        Self {
            tool: tool.to_string(),
            args: args.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// The directive line a model would emit for this call.
    pub fn to_line(&self) -> String {
        serde_json::json!({"tool": self.tool, "args": self.args}).to_string()
    }

    pub fn arg(&self, name: &str) -> Option<&str> {
        self.args.get(name).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("protocol error: {0}")]
pub struct ProtocolError(pub String);

/// Extracts the tool directive from the last non-empty line of an
/// assistant reply.
pub fn parse_tool_call(content: &str, tools: &[ToolSpec]) -> Result<ToolCall, ProtocolError> {
    let line = content
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .ok_or_else(|| ProtocolError("empty reply; expected a tool call".into()))?;
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| ProtocolError(format!("last line is not a JSON tool call: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| ProtocolError("tool call must be a JSON object".into()))?;
    let tool = obj
        .get("tool")
        .and_then(|t| t.as_str())
        .ok_or_else(|| ProtocolError("tool call lacks a string `tool` field".into()))?
        .to_string();
    if !tools.iter().any(|t| t.name == tool) {
        return Err(ProtocolError(format!("unknown tool `{tool}`")));
    }
    let mut args = BTreeMap::new();
    match obj.get("args") {
        None | Some(serde_json::Value::Null) => {}
        Some(serde_json::Value::Object(map)) => {
            for (k, v) in map {
                args.insert(k.clone(), arg_string(k, v)?);
            }
        }
        Some(_) => return Err(ProtocolError("`args` must be an object".into())),
    }
    Ok(ToolCall { tool, args })
}

fn arg_string(key: &str, v: &serde_json::Value) -> Result<String, ProtocolError> {
    use serde_json::Value;
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::String(s) => Ok(s.clone()),
                Value::Number(n) => Ok(n.to_string()),
                _ => Err(ProtocolError(format!("argument `{key}` holds a nested value"))),
            })
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.join(",")),
        _ => Err(ProtocolError(format!("argument `{key}` must be a string"))),
    }
}

/// `ceil(utf8_len / 4)`.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CostMeter {
    pub input_tokens: u64,
    pub output_tokens: u64,
    pub wall_time_secs: f64,
}

impl CostMeter {
    pub fn total_tokens(&self) -> u64 {
        self.input_tokens + self.output_tokens
    }

    pub fn add(&mut self, other: &CostMeter) {
        self.input_tokens += other.input_tokens;
        self.output_tokens += other.output_tokens;
        self.wall_time_secs += other.wall_time_secs;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("backend error: {message}")]
pub struct BackendError {
    pub message: String,
    pub retryable: bool,
}

impl BackendError {
    pub fn fatal(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: false,
        }
    }

    pub fn transient(message: impl Into<String>) -> Self {
        Self {
            message: message.into(),
            retryable: true,
        }
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    /// Deterministic backends contribute no wall time to meters, which
    /// keeps their runs bit-reproducible.
    fn is_deterministic(&self) -> bool {
        false
    }

    fn complete(&self, turns: &[ChatTurn], temperature: f64, tools: &[ToolSpec]) -> Result<ChatTurn, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn immediate() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::ZERO,
        }
    }
}

/// Calls the backend, retrying transient failures with exponential
/// backoff. Every attempt is charged to the meter.
pub fn complete_with_meter(
    backend: &dyn Backend,
    turns: &[ChatTurn],
    temperature: f64,
    tools: &[ToolSpec],
    meter: &mut CostMeter,
    retry: &RetryPolicy,
) -> Result<ChatTurn, BackendError> {
    let prompt_tokens: u64 = turns.iter().map(|t| estimate_tokens(&t.content)).sum();
    let mut attempt = 0;
    loop {
        meter.input_tokens += prompt_tokens;
        let started = Instant::now();
        let result = backend.complete(turns, temperature, tools);
        if !backend.is_deterministic() {
            meter.wall_time_secs += started.elapsed().as_secs_f64();
        }
        match result {
            Ok(reply) => {
                meter.output_tokens += estimate_tokens(&reply.content);
                return Ok(reply);
            }
            Err(e) if e.retryable && attempt < retry.max_retries => {
                let delay = retry.base_delay.saturating_mul(1 << attempt);
                if !delay.is_zero() {
                    thread::sleep(delay);
                }
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Replays a fixed list of replies in order; the last reply repeats once
/// the script is exhausted.
pub struct ScriptedBackend {
    replies: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies,
            cursor: Mutex::new(0),
        }
    }

    /// Loads a JSON array of reply strings.
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path).map_err(|e| BackendError::fatal(format!("{}: {e}", path.display())))?;
        let replies: Vec<String> =
            serde_json::from_str(&text).map_err(|e| BackendError::fatal(format!("{}: {e}", path.display())))?;
        Ok(Self::new(replies))
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn complete(&self, _: &[ChatTurn], _: f64, _: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        let mut cursor = self.cursor.lock().expect("script cursor poisoned");
        let reply = self
            .replies
            .get(*cursor)
            .or_else(|| self.replies.last())
            .ok_or_else(|| BackendError::fatal("empty script"))?;
        *cursor += 1;
        Ok(ChatTurn::assistant(reply.clone()))
    }
}

type ReplyFn = dyn Fn(&[ChatTurn]) -> Result<String, BackendError> + Send + Sync;

/// Backend driven by a closure over the conversation so far.
pub struct FnBackend {
    name: String,
    deterministic: bool,
    reply: Box<ReplyFn>,
}

impl FnBackend {
    pub fn new(
        name: impl Into<String>,
        deterministic: bool,
        reply: impl Fn(&[ChatTurn]) -> Result<String, BackendError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            deterministic,
            reply: Box::new(reply),
        }
    }
}

impl Backend for FnBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn is_deterministic(&self) -> bool {
        self.deterministic
    }

    fn complete(&self, turns: &[ChatTurn], _: f64, _: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        (self.reply)(turns).map(ChatTurn::assistant)
    }
}

/// Chat-completions over HTTP: POSTs `{model, messages, temperature}` and
/// reads `choices[0].message.content`. Tool observations are sent as user
/// messages tagged with the tool name.
pub struct HttpBackend {
    url: String,
    model: String,
    key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: String,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireContent,
}

#[derive(Deserialize)]
struct WireContent {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(url: impl Into<String>, model: impl Into<String>, key: Option<String>) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| BackendError::fatal(e.to_string()))?;
        Ok(Self {
            url: url.into(),
            model: model.into(),
            key,
            client,
        })
    }

    /// Reads `TRACEGRAPH_LLM_URL`, `TRACEGRAPH_LLM_MODEL` and the optional
    /// `TRACEGRAPH_LLM_KEY`.
    pub fn from_env() -> Result<Self, BackendError> {
        let url = env::var(ENV_URL).map_err(|_| BackendError::fatal(format!("{ENV_URL} is not set")))?;
        let model = env::var(ENV_MODEL).map_err(|_| BackendError::fatal(format!("{ENV_MODEL} is not set")))?;
        Self::new(url, model, env::var(ENV_KEY).ok())
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.model
    }

    fn complete(&self, turns: &[ChatTurn], temperature: f64, _: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        let messages = turns
            .iter()
            .map(|t| match t.role {
                Role::Tool => WireMessage {
                    role: "user",
                    content: format!(
                        "[tool result: {}]\n{}",
                        t.tool_name.as_deref().unwrap_or("?"),
                        t.content
                    ),
                },
                r => WireMessage {
                    role: r.as_str(),
                    content: t.content.clone(),
                },
            })
            .collect();
        let body = WireRequest {
            model: &self.model,
            messages,
            temperature,
        };
        let mut req = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::transient(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            return Err(BackendError {
                message: format!("HTTP {status}"),
                retryable,
            });
        }
        let parsed: WireResponse = resp
            .json()
            .map_err(|e| BackendError::fatal(format!("malformed response: {e}")))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::fatal("response has no choices[0].message.content"))?;
        Ok(ChatTurn::assistant(content))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn tools() -> Vec<ToolSpec> {
        vec![
            ToolSpec::new("pop_next", "", &[]),
            ToolSpec::new("add_to_explore", "", &[("vars", "")]),
        ]
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("12345678"), 2);
        assert_eq!(estimate_tokens("123456789"), 3);
        assert_eq!(estimate_tokens("é"), 1);
    }

    #[test]
    fn scripted_meter_accumulates() {
        let backend = ScriptedBackend::new(vec!["OK".into()]);
        let mut meter = CostMeter::default();
        let turns = [ChatTurn::user("12345678")];
        let r = complete_with_meter(&backend, &turns, 1.0, &[], &mut meter, &RetryPolicy::immediate()).unwrap();
        assert_eq!(r.content, "OK");
        assert_eq!(meter.output_tokens, 1);
        assert_eq!(meter.input_tokens, 2);
        complete_with_meter(&backend, &turns, 1.0, &[], &mut meter, &RetryPolicy::immediate()).unwrap();
        assert_eq!((meter.input_tokens, meter.output_tokens), (4, 2));
        assert_eq!(meter.wall_time_secs, 0.0);
    }

    #[test]
    fn retries_count_tokens_and_give_up() {
        let calls = AtomicU32::new(0);
        let flaky = FnBackend::new("flaky", true, move |_| {
            if calls.fetch_add(1, Ordering::SeqCst) < 2 {
                Err(BackendError::transient("503"))
            } else {
                Ok("done".into())
            }
        });
        let mut meter = CostMeter::default();
        let turns = [ChatTurn::user("abcd")];
        complete_with_meter(&flaky, &turns, 1.0, &[], &mut meter, &RetryPolicy::immediate()).unwrap();
        assert_eq!(meter.input_tokens, 3);

        let dead = FnBackend::new("dead", true, |_| Err(BackendError::transient("down")));
        let mut meter = CostMeter::default();
        let err = complete_with_meter(&dead, &turns, 1.0, &[], &mut meter, &RetryPolicy::immediate()).unwrap_err();
        assert!(err.retryable);
        assert_eq!(meter.input_tokens, 4);

        let fatal = FnBackend::new("fatal", true, |_| Err(BackendError::fatal("bad key")));
        let mut meter = CostMeter::default();
        assert!(complete_with_meter(&fatal, &turns, 1.0, &[], &mut meter, &RetryPolicy::immediate()).is_err());
        assert_eq!(meter.input_tokens, 1);
    }

    #[test]
    fn tool_call_parsing() {
        let call = parse_tool_call("thinking...\n{\"tool\": \"pop_next\", \"args\": {}}\n", &tools()).unwrap();
        assert_eq!(call.tool, "pop_next");
        let call = parse_tool_call(r#"{"tool":"add_to_explore","args":{"vars":["v1#0","v2#3"]}}"#, &tools()).unwrap();
        assert_eq!(call.arg("vars"), Some("v1#0,v2#3"));
        assert!(parse_tool_call("no json here", &tools()).is_err());
        assert!(parse_tool_call(r#"{"tool":"rm_rf","args":{}}"#, &tools()).is_err());
        assert!(parse_tool_call(r#"{"tool":"pop_next","args":{"x":{"y":1}}}"#, &tools()).is_err());
        assert!(parse_tool_call("", &tools()).is_err());
        let line = ToolCall::new("add_to_explore", &[("vars", "v1#0")]).to_line();
        assert_eq!(parse_tool_call(&line, &tools()).unwrap().arg("vars"), Some("v1#0"));
    }

    #[test]
    fn scripted_repeats_last_reply() {
        let b = ScriptedBackend::new(vec!["a".into(), "b".into()]);
        let got: Vec<String> = (0..4).map(|_| b.complete(&[], 1.0, &[]).unwrap().content).collect();
        assert_eq!(got, ["a", "b", "b", "b"]);
        assert!(ScriptedBackend::new(vec![]).complete(&[], 1.0, &[]).is_err());
    }
}
