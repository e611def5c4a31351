//! Sandboxed SQL execution against an ingested corpus.
//!
//! Model-authored SQL is untrusted. Statements are gated to a single
//! SELECT / WITH...SELECT by inspecting the statement head and rejecting
//! separators outside string literals; the session itself is opened read-only
//! with `query_only` on, so even a gating miss cannot write. Long-running
//! queries are interrupted from a watchdog thread.

use std::sync::mpsc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;

/// One SQL statement to execute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SqlRequest {
    pub sql_query: String,
}

/// Outcome of a tool invocation, rendered for the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolResult {
    pub ok: bool,
    pub payload: String,
    pub rows_returned: usize,
    pub truncated: bool,
}

impl ToolResult {
    pub fn error(msg: impl Into<String>) -> ToolResult {
        ToolResult {
            ok: false,
            payload: msg.into(),
            rows_returned: 0,
            truncated: false,
        }
    }
}

/// Execution limits. Defaults keep tool output small enough for an 8K/16K
/// context window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SqlLimits {
    pub row_cap: usize,
    pub char_cap: usize,
    #[serde(with = "duration_millis")]
    pub timeout: Duration,
}

impl Default for SqlLimits {
    fn default() -> Self {
        SqlLimits {
            row_cap: 50,
            char_cap: 4000,
            timeout: Duration::from_secs(5),
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

const REJECTION: &str = "error: only a single SELECT statement is allowed";
const TIMEOUT_MSG: &str = "error: query timed out";
const TRUNCATION_MARKER: &str = "... (truncated)";

/// Statement gate: accepts exactly one SELECT or WITH...SELECT statement.
///
/// Leading whitespace and SQL comments are skipped before the head keyword is
/// checked; `;` is rejected anywhere outside string literals except as a
/// trailing terminator.
pub fn is_read_only_select(sql: &str) -> bool {
    let trimmed = sql.trim();
    if trimmed.is_empty() {
        return false;
    }
    let body = skip_leading_trivia(trimmed);
    let head: String = body
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect::<String>()
        .to_ascii_uppercase();
    if head != "SELECT" && head != "WITH" {
        return false;
    }
    !has_inner_separator(trimmed)
}

/// Skip whitespace, `-- ...` line comments, and `/* ... */` block comments.
fn skip_leading_trivia(mut s: &str) -> &str {
    loop {
        s = s.trim_start();
        if let Some(rest) = s.strip_prefix("--") {
            s = match rest.find('\n') {
                Some(i) => &rest[i + 1..],
                None => "",
            };
        } else if let Some(rest) = s.strip_prefix("/*") {
            s = match rest.find("*/") {
                Some(i) => &rest[i + 2..],
                None => "",
            };
        } else {
            return s;
        }
    }
}

/// True when a `;` appears outside string literals and comments before the
/// final position (a single trailing terminator is tolerated).
fn has_inner_separator(sql: &str) -> bool {
    let bytes = sql.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\'' | b'"' | b'`' => {
                let quote = bytes[i];
                i += 1;
                while i < bytes.len() {
                    if bytes[i] == quote {
                        // Doubled quote escapes itself inside the literal.
                        if i + 1 < bytes.len() && bytes[i + 1] == quote {
                            i += 2;
                            continue;
                        }
                        break;
                    }
                    i += 1;
                }
            }
            b'-' if i + 1 < bytes.len() && bytes[i + 1] == b'-' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
                continue;
            }
            b'/' if i + 1 < bytes.len() && bytes[i + 1] == b'*' => {
                i += 2;
                while i + 1 < bytes.len() && !(bytes[i] == b'*' && bytes[i + 1] == b'/') {
                    i += 1;
                }
                i += 1;
            }
            b';' => {
                // Only whitespace, comments, or nothing may follow.
                let tail = skip_leading_trivia(&sql[i + 1..]);
                return !tail.is_empty();
            }
            _ => {}
        }
        i += 1;
    }
    false
}

/// Execute one sandboxed SQL statement against the corpus.
///
/// The result payload is a header line of column names followed by one
/// tab-separated line per row, truncated at `row_cap` rows or `char_cap`
/// characters with a trailing marker line. Engine errors come back verbatim
/// in the payload so the model can self-correct.
pub fn execute_sql(corpus: &Corpus, req: &SqlRequest, limits: &SqlLimits) -> ToolResult {
    let sql = req.sql_query.trim();
    if sql.is_empty() {
        return ToolResult::error("error: empty sql_query");
    }
    if !is_read_only_select(sql) {
        return ToolResult::error(REJECTION);
    }
    let conn = match corpus.read_only_session() {
        Ok(c) => c,
        Err(e) => return ToolResult::error(format!("error: {e}")),
    };

    // Watchdog: interrupt the connection if the query outlives the deadline.
    let handle = conn.get_interrupt_handle();
    let (cancel_tx, cancel_rx) = mpsc::channel::<()>();
    let timeout = limits.timeout;
    let watchdog = std::thread::spawn(move || {
        if cancel_rx.recv_timeout(timeout).is_err() {
            handle.interrupt();
        }
    });
    let outcome = run_query(&conn, sql, limits);
    let _ = cancel_tx.send(());
    let _ = watchdog.join();

    match outcome {
        Ok(result) => result,
        Err(err) => {
            // The only interrupt source is our own watchdog.
            let interrupted = matches!(
                err,
                rusqlite::Error::SqliteFailure(
                    rusqlite::ffi::Error {
                        code: rusqlite::ffi::ErrorCode::OperationInterrupted,
                        ..
                    },
                    _,
                )
            ) || err.to_string().contains("interrupted");
            if interrupted {
                ToolResult::error(TIMEOUT_MSG)
            } else {
                ToolResult::error(err.to_string())
            }
        }
    }
}

fn run_query(
    conn: &rusqlite::Connection,
    sql: &str,
    limits: &SqlLimits,
) -> Result<ToolResult, rusqlite::Error> {
    let mut stmt = conn.prepare(sql)?;
    let ncols = stmt.column_count();
    let header = stmt
        .column_names()
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join("\t");

    let mut payload = header;
    let mut rows_returned = 0usize;
    let mut truncated = false;
    if payload.len() > limits.char_cap {
        let mut cut = limits.char_cap;
        while cut > 0 && !payload.is_char_boundary(cut) {
            cut -= 1;
        }
        payload.truncate(cut);
        truncated = true;
    }
    let mut rows = stmt.query([])?;
    while let Some(row) = rows.next()? {
        if rows_returned >= limits.row_cap {
            truncated = true;
            break;
        }
        let mut cells = Vec::with_capacity(ncols);
        for i in 0..ncols {
            cells.push(render_value(row.get_ref(i)?));
        }
        let line = cells.join("\t");
        if payload.len() + 1 + line.len() > limits.char_cap {
            truncated = true;
            break;
        }
        payload.push('\n');
        payload.push_str(&line);
        rows_returned += 1;
    }
    if truncated {
        payload.push('\n');
        payload.push_str(TRUNCATION_MARKER);
    }
    Ok(ToolResult {
        ok: true,
        payload,
        rows_returned,
        truncated,
    })
}

fn render_value(v: rusqlite::types::ValueRef<'_>) -> String {
    use rusqlite::types::ValueRef;
    match v {
        ValueRef::Null => "NULL".to_string(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(f) => f.to_string(),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => {
            let mut s = String::with_capacity(2 + b.len() * 2);
            s.push_str("0x");
            for byte in b {
                use std::fmt::Write;
                write!(s, "{byte:02x}").expect("write to string");
            }
            s
        }
    }
}
