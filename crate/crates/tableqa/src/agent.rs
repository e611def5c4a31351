//! Multi-turn episode orchestration against a pluggable chat endpoint.
//!
//! An episode starts from the rendered system and user prompts, then loops:
//! request an assistant message, parse it, dispatch tool calls, append the
//! tool response, and stop on a final answer, turn cap, context exhaustion,
//! a run of unparseable turns, or an endpoint failure. Tool errors never
//! abort an episode; they go back to the model as tool output.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{Corpus, QaExample};
use crate::protocol::{
    self, parse_assistant_message, render_system_prompt, render_tool_response,
    render_user_prompt, ToolCallRequest,
};
use crate::retrieval::{render_search_results, Bm25Index};
use crate::sandbox::{execute_sql, SqlLimits, SqlRequest, ToolResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// Wire request: posted as JSON to a chat-completion endpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub max_tokens: u32,
    pub temperature: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub usage: Option<Usage>,
}

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("bad endpoint response: {0}")]
    Protocol(String),
    #[error("script exhausted for question {question:?} at assistant turn {turn}")]
    ScriptExhausted { question: String, turn: usize },
    #[error("no script for question {0:?}")]
    UnknownQuestion(String),
}

/// A chat-completion endpoint. Implementations must be usable from multiple
/// threads at once.
pub trait LlmEndpoint: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, EndpointError>;
}

/// Counts tokens for tool outputs and for prompts when the endpoint reports
/// no usage.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Deterministic approximate counter: one token per maximal alphanumeric run
/// plus one per maximal run of non-alphanumeric, non-whitespace characters.
/// Whitespace separates runs and is never counted.
#[derive(Debug, Clone, Copy, Default)]
pub struct ApproxCounter;

impl TokenCounter for ApproxCounter {
    fn count(&self, text: &str) -> u64 {
        #[derive(PartialEq, Clone, Copy)]
        enum Class {
            Word,
            Punct,
            Space,
        }
        let mut count = 0u64;
        let mut prev = Class::Space;
        for c in text.chars() {
            let class = if c.is_alphanumeric() {
                Class::Word
            } else if c.is_whitespace() {
                Class::Space
            } else {
                Class::Punct
            };
            if class != Class::Space && class != prev {
                count += 1;
            }
            prev = class;
        }
        count
    }
}

/// Replays scripted assistant responses, keyed by the question extracted from
/// the user prompt. The n-th request for a question returns the n-th scripted
/// response, which makes episodes fully deterministic.
#[derive(Debug, Clone)]
pub struct ScriptedEndpoint {
    scripts: BTreeMap<String, Vec<String>>,
    catch_all: Option<Vec<String>>,
}

/// One scripted conversation in a fixture file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub question_id: String,
    pub question: String,
    pub responses: Vec<String>,
}

const QUESTION_MARKER: &str = "**Question**: ";

impl ScriptedEndpoint {
    /// A script that answers every question with the same response sequence.
    pub fn single(responses: Vec<String>) -> Self {
        ScriptedEndpoint {
            scripts: BTreeMap::new(),
            catch_all: Some(responses),
        }
    }

    pub fn from_entries(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        ScriptedEndpoint {
            scripts: entries
                .into_iter()
                .map(|e| (e.question, e.responses))
                .collect(),
            catch_all: None,
        }
    }

    /// Load a line-delimited script fixture.
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptEntry = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            entries.push(entry);
        }
        Ok(ScriptedEndpoint::from_entries(entries))
    }

    fn question_of(request: &ChatRequest) -> Option<&str> {
        request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .and_then(|m| m.content.find(QUESTION_MARKER).map(|i| &m.content[i + QUESTION_MARKER.len()..]))
    }
}

impl LlmEndpoint for ScriptedEndpoint {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, EndpointError> {
        let question = Self::question_of(request).unwrap_or_default();
        let responses = match self.scripts.get(question) {
            Some(r) => r,
            None => self
                .catch_all
                .as_ref()
                .ok_or_else(|| EndpointError::UnknownQuestion(question.to_string()))?,
        };
        let turn = request
            .messages
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .count();
        let content = responses
            .get(turn)
            .ok_or_else(|| EndpointError::ScriptExhausted {
                question: question.to_string(),
                turn,
            })?;
        Ok(ChatResponse {
            content: content.clone(),
            usage: None,
        })
    }
}

/// Resolves tool calls. The CLI runs tools in-process; the server-backed
/// variant lives with the HTTP client.
pub trait ToolDispatcher: Send + Sync {
    fn dispatch(&self, call: &ToolCallRequest) -> ToolResult;
}

/// In-process tools over a shared read-only corpus and index.
pub struct LocalTools<'a> {
    pub corpus: &'a Corpus,
    pub index: &'a Bm25Index,
    pub limits: SqlLimits,
    pub default_top_k: usize,
}

impl LocalTools<'_> {
    fn search(&self, call: &ToolCallRequest) -> ToolResult {
        let keywords = match call.arguments.get("keywords").and_then(Value::as_str) {
            Some(k) => k,
            None => return ToolResult::error("error: missing required argument \"keywords\""),
        };
        let top_k = match call.arguments.get("top_k") {
            None => self.default_top_k,
            Some(v) => match v.as_u64() {
                Some(k) if k >= 1 => k as usize,
                _ => return ToolResult::error("error: top_k must be a positive integer"),
            },
        };
        match self.index.search(keywords, top_k) {
            Ok(hits) => ToolResult {
                ok: true,
                rows_returned: hits.len(),
                truncated: false,
                payload: render_search_results(&hits, self.corpus),
            },
            Err(e) => ToolResult::error(format!("error: {e}")),
        }
    }

    fn code_interpreter(&self, call: &ToolCallRequest) -> ToolResult {
        // The schema names the argument `sql_query`; the code-block
        // placeholder substitutes into `code`. Accept either.
        let sql = ["sql_query", protocol::CODE_PLACEHOLDER_KEY]
            .iter()
            .find_map(|k| call.arguments.get(*k).and_then(Value::as_str))
            .filter(|s| !s.trim().is_empty());
        match sql {
            Some(sql) => execute_sql(
                self.corpus,
                &SqlRequest {
                    sql_query: sql.to_string(),
                },
                &self.limits,
            ),
            None => ToolResult::error("error: missing SQL (pass \"sql_query\" or a <code> block)"),
        }
    }
}

impl ToolDispatcher for LocalTools<'_> {
    fn dispatch(&self, call: &ToolCallRequest) -> ToolResult {
        match call.name.as_str() {
            "search" => self.search(call),
            "code_interpreter" => self.code_interpreter(call),
            other => ToolResult::error(format!("error: unknown tool {other:?}")),
        }
    }
}

/// Episode limits and request parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Token budget for the whole conversation (16K evaluation default).
    pub context_window: u64,
    /// Assistant-turn cap; 0 means unlimited.
    pub max_turns: u32,
    /// top_k used when a search call omits it.
    pub default_top_k: usize,
    /// Consecutive unparseable assistant turns tolerated before giving up.
    pub malformed_budget: u32,
    pub max_tokens: u32,
    pub temperature: f64,
    pub model: String,
    pub retries: u32,
    #[serde(with = "duration_millis")]
    pub retry_backoff: Duration,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            context_window: 16_384,
            max_turns: 0,
            default_top_k: 8,
            malformed_budget: 3,
            max_tokens: 2048,
            temperature: 0.0,
            model: "default".to_string(),
            retries: 2,
            retry_backoff: Duration::from_millis(200),
        }
    }
}

impl EpisodeConfig {
    /// Training-style runs use the smaller 8K window.
    pub fn training() -> Self {
        EpisodeConfig {
            context_window: 8_192,
            ..EpisodeConfig::default()
        }
    }
}

mod duration_millis {
    use super::Duration;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        (d.as_millis() as u64).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    TurnCap,
    ContextExhausted,
    Malformed,
    EndpointError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptMessage {
    pub role: Role,
    pub content: String,
    pub tokens: u64,
    /// True when the count came from endpoint-reported usage.
    pub reported: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallLogEntry {
    pub turn: u32,
    pub name: String,
    pub arguments: serde_json::Map<String, Value>,
    pub ok: bool,
}

/// Raw usage reports per assistant turn, recorded verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageLogEntry {
    pub turn: u32,
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTranscript {
    pub question_id: String,
    pub messages: Vec<TranscriptMessage>,
    pub tool_calls: Vec<ToolCallLogEntry>,
    pub usage_log: Vec<UsageLogEntry>,
    pub final_answer: Option<Vec<String>>,
    pub termination: Termination,
    pub turns: u32,
    pub total_tokens: u64,
    pub endpoint_error: Option<String>,
}

/// Run one episode to termination.
pub fn run_episode(
    q: &QaExample,
    endpoint: &dyn LlmEndpoint,
    tools: &dyn ToolDispatcher,
    counter: &dyn TokenCounter,
    cfg: &EpisodeConfig,
) -> EpisodeTranscript {
    let system = render_system_prompt(&protocol::default_tool_schemas());
    let user = render_user_prompt(&q.question)
        .unwrap_or_else(|_| format!("{}(empty question)", QUESTION_MARKER));

    let mut messages: Vec<TranscriptMessage> = Vec::new();
    let push = |messages: &mut Vec<TranscriptMessage>,
                role: Role,
                content: String,
                tokens: u64,
                reported: bool| {
        messages.push(TranscriptMessage {
            role,
            content,
            tokens,
            reported,
        });
    };
    push(&mut messages, Role::System, system.clone(), counter.count(&system), false);
    push(&mut messages, Role::User, user.clone(), counter.count(&user), false);

    let mut tool_log: Vec<ToolCallLogEntry> = Vec::new();
    let mut usage_log: Vec<UsageLogEntry> = Vec::new();
    let mut turns: u32 = 0;
    let mut malformed_streak: u32 = 0;
    let mut final_answer: Option<Vec<String>> = None;
    let mut endpoint_error: Option<String> = None;

    let termination = loop {
        if cfg.max_turns > 0 && turns >= cfg.max_turns {
            break Termination::TurnCap;
        }
        let running: u64 = messages.iter().map(|m| m.tokens).sum();
        if running >= cfg.context_window {
            break Termination::ContextExhausted;
        }

        let request = ChatRequest {
            model: cfg.model.clone(),
            messages: messages
                .iter()
                .map(|m| ChatMessage {
                    role: m.role,
                    content: m.content.clone(),
                })
                .collect(),
            max_tokens: cfg.max_tokens,
            temperature: cfg.temperature,
        };
        let response = match complete_with_retries(endpoint, &request, cfg) {
            Ok(r) => r,
            Err(e) => {
                endpoint_error = Some(e.to_string());
                break Termination::EndpointError;
            }
        };
        turns += 1;

        let usage = response.usage.unwrap_or_default();
        if response.usage.is_some() {
            usage_log.push(UsageLogEntry {
                turn: turns,
                usage,
            });
        }
        // First-turn prompt report is authoritative for the prompt-template
        // cost: true up the user message so the running sum honors it.
        if turns == 1 {
            if let Some(prompt_tokens) = usage.prompt_tokens {
                let system_tokens = messages[0].tokens;
                messages[1].tokens = prompt_tokens.saturating_sub(system_tokens);
                messages[1].reported = true;
            }
        }
        let (completion_tokens, reported) = match usage.completion_tokens {
            Some(t) => (t, true),
            None => (counter.count(&response.content), false),
        };
        push(
            &mut messages,
            Role::Assistant,
            response.content.clone(),
            completion_tokens,
            reported,
        );

        let parsed = parse_assistant_message(&response.content);
        if let Some(answer) = parsed.final_answer {
            final_answer = Some(answer);
            break Termination::Answered;
        }
        let results: Vec<(String, ToolResult)> = if parsed.tool_calls.is_empty() {
            malformed_streak += 1;
            if malformed_streak >= cfg.malformed_budget {
                break Termination::Malformed;
            }
            vec![(
                "protocol".to_string(),
                ToolResult::error(
                    "error: no valid <tool_call> or <answer> found in the last message",
                ),
            )]
        } else {
            malformed_streak = 0;
            parsed
                .tool_calls
                .iter()
                .map(|call| {
                    let result = tools.dispatch(call);
                    tool_log.push(ToolCallLogEntry {
                        turn: turns,
                        name: call.name.clone(),
                        arguments: call.arguments.clone(),
                        ok: result.ok,
                    });
                    (call.name.clone(), result)
                })
                .collect()
        };
        let tool_message = render_tool_response(&results);
        let tokens = counter.count(&tool_message);
        push(&mut messages, Role::Tool, tool_message, tokens, false);
    };

    let total_tokens = messages.iter().map(|m| m.tokens).sum();
    EpisodeTranscript {
        question_id: q.question_id.clone(),
        messages,
        tool_calls: tool_log,
        usage_log,
        final_answer,
        termination,
        turns,
        total_tokens,
        endpoint_error,
    }
}

fn complete_with_retries(
    endpoint: &dyn LlmEndpoint,
    request: &ChatRequest,
    cfg: &EpisodeConfig,
) -> Result<ChatResponse, EndpointError> {
    let mut attempt = 0;
    loop {
        match endpoint.complete(request) {
            Ok(r) => return Ok(r),
            Err(e) if attempt < cfg.retries => {
                std::thread::sleep(cfg.retry_backoff * 2u32.pow(attempt));
                attempt += 1;
                let _ = e;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Run episodes with bounded parallelism; transcripts come back in input
/// order and episodes never share mutable state.
pub fn run_batch(
    qs: &[QaExample],
    endpoint: &dyn LlmEndpoint,
    tools: &dyn ToolDispatcher,
    counter: &dyn TokenCounter,
    cfg: &EpisodeConfig,
    parallelism: usize,
) -> Vec<EpisodeTranscript> {
    assert!(parallelism >= 1, "parallelism must be >= 1");
    if qs.is_empty() {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<EpisodeTranscript>>> = Mutex::new(vec![None; qs.len()]);
    let workers = parallelism.min(qs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= qs.len() {
                    return;
                }
                let transcript = run_episode(&qs[i], endpoint, tools, counter, cfg);
                slots.lock().expect("batch slots lock")[i] = Some(transcript);
            });
        }
    });
    slots
        .into_inner()
        .expect("batch slots lock")
        .into_iter()
        .map(|t| t.expect("all episodes completed"))
        .collect()
}
