//! Prompt rendering and the tagged tool-call message format.
//!
//! Assistant messages carry tool calls as JSON objects inside
//! `<tool_call></tool_call>` XML tags; multi-line code arguments ride in a
//! `<code></code>` block after the JSON line, with the JSON holding a `"code"`
//! placeholder. Final answers arrive as `<answer>item1,item2,…</answer>`.
//!
//! Escaping: inside serialized JSON strings, `<` is emitted as `<` so no
//! protocol tag can appear literally; inside `<code>` blocks and
//! `<tool_response>` payloads, `&` and the protocol tags are entity-escaped
//! (`&amp;`, `&lt;tag>`). Parsing reverses both, so serialize-then-parse is
//! the identity even for tag-bearing content.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::sandbox::ToolResult;

/// Declared schema for one tool exposed to the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolSchema {
    pub name: String,
    pub description: String,
    /// `None` renders as `"parameters": null`.
    pub parameters: Option<Vec<ParamSpec>>,
}

/// One named parameter in a tool schema.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub ty: String,
    pub description: String,
    pub default: Option<Value>,
    pub required: bool,
}

/// The two tools the table-QA agent gets.
pub fn default_tool_schemas() -> Vec<ToolSchema> {
    vec![
        ToolSchema {
            name: "code_interpreter".to_string(),
            description: "SQL code interpreter".to_string(),
            parameters: None,
        },
        ToolSchema {
            name: "search".to_string(),
            description: "use key words to get a list of tables.".to_string(),
            parameters: Some(vec![
                ParamSpec {
                    name: "keywords".to_string(),
                    ty: "str".to_string(),
                    description: "key words used for searching (sentence is accepted)."
                        .to_string(),
                    default: None,
                    required: true,
                },
                ParamSpec {
                    name: "top_k".to_string(),
                    ty: "int".to_string(),
                    description: "top k tables to return.".to_string(),
                    default: Some(Value::from(8)),
                    required: false,
                },
            ]),
        },
    ]
}

/// A parsed (or to-be-serialized) tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallRequest {
    pub name: String,
    pub arguments: Map<String, Value>,
    /// Multi-line code carried in a `<code>` block. When present, the
    /// `"code"` argument holds the same text (post-substitution state).
    pub code_block: Option<String>,
}

impl ToolCallRequest {
    pub fn new(name: impl Into<String>, arguments: Map<String, Value>) -> Self {
        ToolCallRequest {
            name: name.into(),
            arguments,
            code_block: None,
        }
    }

    pub fn with_code(
        name: impl Into<String>,
        mut arguments: Map<String, Value>,
        code: impl Into<String>,
    ) -> Self {
        let code = code.into();
        arguments.insert(CODE_PLACEHOLDER_KEY.to_string(), Value::String(code.clone()));
        ToolCallRequest {
            name: name.into(),
            arguments,
            code_block: Some(code),
        }
    }
}

/// Everything extracted from one assistant message.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParsedAssistantTurn {
    pub tool_calls: Vec<ToolCallRequest>,
    pub final_answer: Option<Vec<String>>,
    pub free_text: String,
    pub diagnostics: Vec<ParseDiagnostic>,
}

/// A skipped span, with the reason it was skipped. Never fatal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseDiagnostic {
    pub offset: usize,
    pub reason: String,
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("question must not be empty")]
    EmptyQuestion,
}

/// Argument key the code block substitutes into.
pub const CODE_PLACEHOLDER_KEY: &str = "code";

const TOOL_CALL_OPEN: &str = "<tool_call>";
const TOOL_CALL_CLOSE: &str = "</tool_call>";
const CODE_OPEN: &str = "<code>";
const CODE_CLOSE: &str = "</code>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TOOL_RESPONSE_OPEN: &str = "<tool_response>";
const TOOL_RESPONSE_CLOSE: &str = "</tool_response>";

const SYSTEM_HEAD: &str = "You are Qwen, created by Alibaba Cloud. You are a helpful assistant.

# Tools

You may call one or more functions to assist with the user query.

You are provided with function signatures within <tools></tools> XML tags:
<tools>
";

const SYSTEM_TAIL: &str = "</tools>

For each function call, return a json object with function name and arguments within <tool_call></tool_call> XML tags:
<tool_call>
{\"name\": <function-name>, \"arguments\": <args-json-object>}
</tool_call>
For code parameters, use placeholders first, and then put the code within <code></code> XML tags, such as:
<tool_call>
{\"name\": <function-name>, \"arguments\": {\"code\": \"\"}}
<code>
Here is the code.
</code>
</tool_call>";

const USER_HEAD: &str = "You are tasked with solving an open-domain table question answering problem. You must use tools to search for tables and execute SQL queries to find the answer. Follow the instructions below carefully:

- Always use the table name you searched as the target of your SQL queries.
- Set a proper `top_k` value to cover enough candidates and avoid omitting possible tables.
- Some tables have the similar schema with the same schema types. You can set proper `top_k` to access them and union them together help you better get the answer.
- Always perform both search and SQL steps, even if you \"know\" the answer, to ensure correctness.
- You may invoke tools in any order or combination until you have confidence in your result.
- The answer should be either a single item or a list of items. When you have the final answer, format it exactly as `<answer>item1,item2,\u{2026}</answer>` with no extra words or punctuation.

**Question**: ";

/// Render the system prompt with the schema list serialized one per line
/// inside `<tools></tools>`.
pub fn render_system_prompt(schemas: &[ToolSchema]) -> String {
    let mut out = String::from(SYSTEM_HEAD);
    for schema in schemas {
        out.push_str(&schema_line(schema));
        out.push('\n');
    }
    out.push_str(SYSTEM_TAIL);
    out
}

/// Render the user prompt with the question substituted at the end.
pub fn render_user_prompt(question: &str) -> Result<String, ProtocolError> {
    if question.trim().is_empty() {
        return Err(ProtocolError::EmptyQuestion);
    }
    Ok(format!("{USER_HEAD}{question}"))
}

/// One `{"type": "function", ...}` line for the `<tools>` block.
fn schema_line(schema: &ToolSchema) -> String {
    let mut s = String::from("{\"type\": \"function\", \"function\": {\"name\": ");
    write_json_string(&schema.name, &mut s);
    s.push_str(", \"description\": ");
    write_json_string(&schema.description, &mut s);
    s.push_str(", \"parameters\": ");
    match &schema.parameters {
        None => s.push_str("null"),
        Some(params) => {
            s.push_str("{\"type\": \"object\", \"properties\": {");
            for (i, p) in params.iter().enumerate() {
                if i > 0 {
                    s.push_str(", ");
                }
                write_json_string(&p.name, &mut s);
                s.push_str(": {\"type\": ");
                write_json_string(&p.ty, &mut s);
                s.push_str(", \"description\": ");
                write_json_string(&p.description, &mut s);
                if let Some(default) = &p.default {
                    s.push_str(", \"default\": ");
                    write_python_style(default, &mut s);
                }
                s.push('}');
            }
            s.push_str("}, \"required\": [");
            let mut first = true;
            for p in params.iter().filter(|p| p.required) {
                if !first {
                    s.push_str(", ");
                }
                first = false;
                write_json_string(&p.name, &mut s);
            }
            s.push_str("]}");
        }
    }
    s.push_str("}}");
    s
}

/// JSON writer with `", "` / `": "` separators (the spacing the templates
/// use) and `<` escaped as `<` inside strings so serialized values can
/// never introduce a protocol tag.
fn write_python_style(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(true) => out.push_str("true"),
        Value::Bool(false) => out.push_str("false"),
        Value::Number(n) => out.push_str(&n.to_string()),
        Value::String(s) => write_json_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_python_style(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            out.push('{');
            for (i, (k, val)) in map.iter().enumerate() {
                if i > 0 {
                    out.push_str(", ");
                }
                write_json_string(k, out);
                out.push_str(": ");
                write_python_style(val, out);
            }
            out.push('}');
        }
    }
}

fn write_json_string(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            '<' => out.push_str("\\u003c"),
            c if (c as u32) < 0x20 => {
                out.push_str(&format!("\\u{:04x}", c as u32));
            }
            c => out.push(c),
        }
    }
    out.push('"');
}

fn escape_tagged(s: &str, tags: &[&str]) -> String {
    let mut out = s.replace('&', "&amp;");
    for tag in tags {
        let escaped = format!("&lt;{}", &tag[1..]);
        out = out.replace(tag, &escaped);
    }
    out
}

fn unescape_tagged(s: &str, tags: &[&str]) -> String {
    let mut out = s.to_string();
    for tag in tags {
        let escaped = format!("&lt;{}", &tag[1..]);
        out = out.replace(&escaped, tag);
    }
    out.replace("&amp;", "&")
}

const CODE_TAGS: [&str; 4] = [TOOL_CALL_OPEN, TOOL_CALL_CLOSE, CODE_OPEN, CODE_CLOSE];
const RESPONSE_TAGS: [&str; 2] = [TOOL_RESPONSE_OPEN, TOOL_RESPONSE_CLOSE];

/// Serialize a tool call to the tagged text format. Inverse of parsing for
/// well-formed requests.
pub fn serialize_tool_call(req: &ToolCallRequest) -> String {
    let mut args = req.arguments.clone();
    if req.code_block.is_some() {
        args.insert(
            CODE_PLACEHOLDER_KEY.to_string(),
            Value::String(String::new()),
        );
    }
    let mut json = String::new();
    let mut obj = Map::new();
    obj.insert("name".to_string(), Value::String(req.name.clone()));
    obj.insert("arguments".to_string(), Value::Object(args));
    write_python_style(&Value::Object(obj), &mut json);

    let mut out = String::new();
    out.push_str(TOOL_CALL_OPEN);
    out.push('\n');
    out.push_str(&json);
    if let Some(code) = &req.code_block {
        out.push('\n');
        out.push_str(CODE_OPEN);
        out.push('\n');
        out.push_str(&escape_tagged(code, &CODE_TAGS));
        out.push('\n');
        out.push_str(CODE_CLOSE);
    }
    out.push('\n');
    out.push_str(TOOL_CALL_CLOSE);
    out
}

/// Wrap tool results for the single tool-role message of a turn.
pub fn render_tool_response(results: &[(String, ToolResult)]) -> String {
    results
        .iter()
        .map(|(_, r)| {
            format!(
                "{}\n{}\n{}",
                TOOL_RESPONSE_OPEN,
                escape_tagged(&r.payload, &RESPONSE_TAGS),
                TOOL_RESPONSE_CLOSE
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Recover the payloads from a rendered tool-response message.
pub fn parse_tool_response(message: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = message;
    while let Some(open) = rest.find(TOOL_RESPONSE_OPEN) {
        let after = &rest[open + TOOL_RESPONSE_OPEN.len()..];
        match after.find(TOOL_RESPONSE_CLOSE) {
            Some(close) => {
                let body = strip_outer_newlines(&after[..close]);
                out.push(unescape_tagged(body, &RESPONSE_TAGS));
                rest = &after[close + TOOL_RESPONSE_CLOSE.len()..];
            }
            None => break,
        }
    }
    out
}

fn strip_outer_newlines(s: &str) -> &str {
    let s = s.strip_prefix('\n').unwrap_or(s);
    s.strip_suffix('\n').unwrap_or(s)
}

/// Parse an assistant message. Total over arbitrary strings: malformed spans
/// become diagnostics, never errors.
pub fn parse_assistant_message(text: &str) -> ParsedAssistantTurn {
    let mut turn = ParsedAssistantTurn::default();
    let mut outside = String::new();
    let mut rest = text;
    let mut offset = 0usize;

    while let Some(open) = rest.find(TOOL_CALL_OPEN) {
        outside.push_str(&rest[..open]);
        let span_offset = offset + open;
        let after = &rest[open + TOOL_CALL_OPEN.len()..];
        match after.find(TOOL_CALL_CLOSE) {
            Some(close) => {
                let body = &after[..close];
                match parse_tool_call_body(body) {
                    Ok(call) => turn.tool_calls.push(call),
                    Err(reason) => turn.diagnostics.push(ParseDiagnostic {
                        offset: span_offset,
                        reason,
                    }),
                }
                let consumed = open + TOOL_CALL_OPEN.len() + close + TOOL_CALL_CLOSE.len();
                offset += consumed;
                rest = &rest[consumed..];
            }
            None => {
                turn.diagnostics.push(ParseDiagnostic {
                    offset: span_offset,
                    reason: "unclosed <tool_call> tag".to_string(),
                });
                // Keep the orphan text as free text.
                outside.push_str(&rest[open..]);
                rest = "";
                break;
            }
        }
    }
    outside.push_str(rest);

    // Final answer: the last well-formed span outside tool calls.
    let mut free_text = String::new();
    let mut scan = outside.as_str();
    let mut last_answer: Option<String> = None;
    while let Some(open) = scan.find(ANSWER_OPEN) {
        let after = &scan[open + ANSWER_OPEN.len()..];
        match after.find(ANSWER_CLOSE) {
            Some(close) => {
                free_text.push_str(&scan[..open]);
                last_answer = Some(after[..close].to_string());
                scan = &after[close + ANSWER_CLOSE.len()..];
            }
            None => break,
        }
    }
    free_text.push_str(scan);
    turn.free_text = free_text;
    turn.final_answer =
        last_answer.map(|body| body.split(',').map(|item| item.trim().to_string()).collect());
    turn
}

/// Body of one `<tool_call>` span: a JSON object, optionally followed by a
/// `<code>` block; anything else is malformed.
fn parse_tool_call_body(body: &str) -> Result<ToolCallRequest, String> {
    let mut stream = serde_json::Deserializer::from_str(body).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => return Err(format!("invalid JSON: {e}")),
        None => return Err("empty tool_call body".to_string()),
    };
    let json_end = stream.byte_offset();
    let obj = value.as_object().ok_or("tool call JSON is not an object")?;
    let name = obj
        .get("name")
        .and_then(Value::as_str)
        .ok_or("missing string field \"name\"")?
        .to_string();
    let mut arguments = obj
        .get("arguments")
        .and_then(Value::as_object)
        .cloned()
        .ok_or("missing object field \"arguments\"")?;

    let remainder = body[json_end..].trim();
    let code_block = if remainder.is_empty() {
        None
    } else if let Some(after_open) = remainder.strip_prefix(CODE_OPEN) {
        let close = after_open
            .find(CODE_CLOSE)
            .ok_or("unclosed <code> tag inside tool_call")?;
        let tail = after_open[close + CODE_CLOSE.len()..].trim();
        if !tail.is_empty() {
            return Err(format!("trailing content after </code>: {tail:?}"));
        }
        let code = unescape_tagged(strip_outer_newlines(&after_open[..close]), &CODE_TAGS);
        Some(code)
    } else {
        return Err(format!(
            "unexpected content after tool call JSON: {:?}",
            truncate_for_diag(remainder)
        ));
    };

    if let Some(code) = &code_block {
        arguments.insert(
            CODE_PLACEHOLDER_KEY.to_string(),
            Value::String(code.clone()),
        );
    }
    Ok(ToolCallRequest {
        name,
        arguments,
        code_block,
    })
}

fn truncate_for_diag(s: &str) -> String {
    const MAX: usize = 40;
    if s.len() <= MAX {
        s.to_string()
    } else {
        let mut cut = MAX;
        while !s.is_char_boundary(cut) {
            cut -= 1;
        }
        format!("{}...", &s[..cut])
    }
}
