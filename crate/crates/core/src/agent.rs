//! ReAct controller loop over four database tools, with per-iteration
//! timing and token accounting.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{EngineAdapter, EngineError};
use crate::llmclient::{
    ChatExchange, ChatResponse, LlmBackend, LlmError, Message, RecordedExchange, ReplayBackend,
    Role, TokenUsage, ToolCall, ToolSchema,
};
use crate::resultset::ResultTable;

pub const DEFAULT_SYSTEM_PROMPT: &str = "\
You are an agent that answers questions by writing SQL for a relational database.
Work step by step. You can use these tools:

list_tables: input is ignored. Returns the names of all tables, one per line.
get_schema: input is a comma-separated list of tables, or {\"tables\": [..]}. Returns each table's CREATE TABLE statement and a few sample rows.
check_query: input is a SQL query. An expert reviews it for common mistakes and replies \"query OK\" or a corrected query. Always check a query before running it.
run_query: input is a SQL query. Executes it and returns the result. Only run a query once you are confident it is correct; the episode ends after the first run.

Reply in exactly this format:
Thought: what you plan to do next
Action: one of list_tables, get_schema, check_query, run_query
Action Input: the input for the tool

When you know the answer without running anything else, reply:
Thought: why you are done
Final Answer: the SQL query that answers the question

Never invent table or column names. Query only the columns the question asks for.";

pub const DEFAULT_CHECKER_PROMPT: &str = "\
Double check the SQL query below for common mistakes, including:
- using NOT IN with NULL values
- using UNION when UNION ALL should have been used
- using BETWEEN for exclusive ranges
- data type mismatches in predicates and missing casts
- properly quoting identifiers and string literals
- using the correct number of arguments for functions
- joining on the correct columns

If there are any of the above mistakes, rewrite the query and reply with the corrected query only. If there are no mistakes, reply with exactly: query OK";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ToolId {
    ListTables,
    GetSchema,
    CheckQuery,
    RunQuery,
}

impl ToolId {
    pub const ALL: [ToolId; 4] = [ToolId::ListTables, ToolId::GetSchema, ToolId::CheckQuery, ToolId::RunQuery];

    pub fn name(self) -> &'static str {
        match self {
            ToolId::ListTables => "list_tables",
            ToolId::GetSchema => "get_schema",
            ToolId::CheckQuery => "check_query",
            ToolId::RunQuery => "run_query",
        }
    }

    pub fn from_name(name: &str) -> Option<ToolId> {
        ToolId::ALL.into_iter().find(|t| t.name() == name)
    }

    fn description(self) -> &'static str {
        match self {
            ToolId::ListTables => "List all tables in the database.",
            ToolId::GetSchema => "Return the CREATE TABLE statement and sample rows for the given tables.",
            ToolId::CheckQuery => "Review a SQL query for common mistakes before running it.",
            ToolId::RunQuery => "Execute a SQL query and return its result.",
        }
    }

    pub fn schema(self) -> ToolSchema {
        let parameters = match self {
            ToolId::ListTables => serde_json::json!({"type": "object", "properties": {}}),
            ToolId::GetSchema => serde_json::json!({
                "type": "object",
                "properties": {"tables": {"type": "array", "items": {"type": "string"}}},
                "required": ["tables"]
            }),
            ToolId::CheckQuery | ToolId::RunQuery => serde_json::json!({
                "type": "object",
                "properties": {"query": {"type": "string"}},
                "required": ["query"]
            }),
        };
        ToolSchema {
            name: self.name().to_string(),
            description: self.description().to_string(),
            parameters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    List,
    Schema,
    Check,
    Run,
    Finalize,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::List, Stage::Schema, Stage::Check, Stage::Run, Stage::Finalize];
    pub const TOOLS: [Stage; 4] = [Stage::List, Stage::Schema, Stage::Check, Stage::Run];

    pub fn name(self) -> &'static str {
        match self {
            Stage::List => "list",
            Stage::Schema => "schema",
            Stage::Check => "check",
            Stage::Run => "run",
            Stage::Finalize => "finalize",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What an iteration did: call one tool, or give the final answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Action {
    Tool(ToolId),
    FinalAnswer,
}

impl Action {
    pub fn stage(self) -> Stage {
        match self {
            Action::Tool(ToolId::ListTables) => Stage::List,
            Action::Tool(ToolId::GetSchema) => Stage::Schema,
            Action::Tool(ToolId::CheckQuery) => Stage::Check,
            Action::Tool(ToolId::RunQuery) => Stage::Run,
            Action::FinalAnswer => Stage::Finalize,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Tool(t) => f.write_str(t.name()),
            Action::FinalAnswer => f.write_str("final_answer"),
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "final_answer" {
            return Ok(Action::FinalAnswer);
        }
        ToolId::from_name(s)
            .map(Action::Tool)
            .ok_or_else(|| format!("unknown action {s:?}"))
    }
}

impl From<Action> for String {
    fn from(a: Action) -> String {
        a.to_string()
    }
}

impl TryFrom<String> for Action {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iteration {
    pub index: usize,
    pub thought: String,
    pub action: Action,
    pub action_input: String,
    pub observation: String,
    /// Raw controller reply.
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCall>,
    /// Seconds since the episode started.
    pub started_at: f64,
    pub ended_at: f64,
    pub llm_seconds: f64,
    pub tool_seconds: f64,
    pub usage: TokenUsage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checker_usage: Option<TokenUsage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes_scanned: Option<u64>,
    #[serde(default)]
    pub retries: u32,
}

impl Iteration {
    pub fn duration(&self) -> f64 {
        self.ended_at - self.started_at
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Completed,
    Exhausted,
    ToolError,
    LlmError,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Completed => "completed",
            Outcome::Exhausted => "exhausted",
            Outcome::ToolError => "tool-error",
            Outcome::LlmError => "llm-error",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub question: String,
    pub model_id: String,
    #[serde(skip)]
    pub iterations: Vec<Iteration>,
    pub outcome: Outcome,
    #[serde(default)]
    pub final_sql: Option<String>,
    #[serde(default)]
    pub final_result: Option<ResultTable>,
    pub started_at: f64,
    pub ended_at: f64,
    #[serde(default)]
    pub error: Option<String>,
    pub usage_total: TokenUsage,
    /// Tokens spent on a reply that never became an iteration (e.g. an
    /// unparseable final message). Billed to the finalize stage.
    #[serde(default)]
    pub tail_usage: TokenUsage,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl AgentTrace {
    pub fn empty(question: &str, model_id: &str) -> Self {
        AgentTrace {
            question: question.to_string(),
            model_id: model_id.to_string(),
            iterations: Vec::new(),
            outcome: Outcome::Completed,
            final_sql: None,
            final_result: None,
            started_at: 0.0,
            ended_at: 0.0,
            error: None,
            usage_total: TokenUsage::default(),
            tail_usage: TokenUsage::default(),
            warnings: Vec::new(),
        }
    }

    pub fn e2e_seconds(&self) -> f64 {
        self.ended_at - self.started_at
    }

    /// Engine runtime of the query that produced `final_result`.
    pub fn t_gen(&self) -> Option<f64> {
        self.final_result.as_ref()?;
        self.iterations
            .iter()
            .rev()
            .find(|it| it.action == Action::Tool(ToolId::RunQuery) && it.engine_seconds.is_some())
            .and_then(|it| it.engine_seconds)
    }

    pub fn count_actions(&self, action: Action) -> usize {
        self.iterations.iter().filter(|it| it.action == action).count()
    }

    /// Episode log: a header line followed by one line per iteration.
    pub fn to_jsonl(&self) -> String {
        let mut header = serde_json::to_value(self).expect("trace serializes");
        header
            .as_object_mut()
            .unwrap()
            .insert("kind".into(), Value::from("episode"));
        let mut out = serde_json::to_string(&header).unwrap();
        out.push('\n');
        for it in &self.iterations {
            let mut v = serde_json::to_value(it).expect("iteration serializes");
            v.as_object_mut()
                .unwrap()
                .insert("kind".into(), Value::from("iteration"));
            out.push_str(&serde_json::to_string(&v).unwrap());
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, String> {
        let mut trace: Option<AgentTrace> = None;
        let mut iterations = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut v: Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", i + 1))?;
            let kind = v
                .as_object_mut()
                .and_then(|o| o.remove("kind"))
                .and_then(|k| k.as_str().map(str::to_string))
                .ok_or_else(|| format!("line {}: missing kind", i + 1))?;
            match kind.as_str() {
                "episode" if trace.is_none() => {
                    trace = Some(serde_json::from_value(v).map_err(|e| format!("line {}: {e}", i + 1))?)
                }
                "iteration" => {
                    iterations.push(serde_json::from_value(v).map_err(|e| format!("line {}: {e}", i + 1))?)
                }
                other => return Err(format!("line {}: unexpected kind {other:?}", i + 1)),
            }
        }
        let mut trace = trace.ok_or("episode log has no header line")?;
        trace.iterations = iterations;
        Ok(trace)
    }

    /// Episode log with every timing field zeroed, for comparing replays.
    pub fn canonical_jsonl(&self) -> String {
        let mut t = self.clone();
        t.started_at = 0.0;
        t.ended_at = 0.0;
        for it in &mut t.iterations {
            it.started_at = 0.0;
            it.ended_at = 0.0;
            it.llm_seconds = 0.0;
            it.tool_seconds = 0.0;
            if it.engine_seconds.is_some() {
                it.engine_seconds = Some(0.0);
            }
        }
        t.to_jsonl()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub max_iterations: usize,
    pub sample_rows: usize,
    pub terminate_after_first_run: bool,
    pub system_prompt: String,
    pub checker_prompt: String,
    pub observation_limit: usize,
    /// Rows of a run_query result echoed back to the model.
    pub observation_rows: usize,
    pub retry: RetryPolicy,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            max_iterations: 15,
            sample_rows: 3,
            terminate_after_first_run: true,
            system_prompt: DEFAULT_SYSTEM_PROMPT.to_string(),
            checker_prompt: DEFAULT_CHECKER_PROMPT.to_string(),
            observation_limit: 4000,
            observation_rows: 20,
            retry: RetryPolicy::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.retry.attempts == 0 {
            return Err("retry.attempts must be at least 1".into());
        }
        Ok(())
    }
}

/// Failure of a tool that cannot be turned into an observation.
#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("checker: {0}")]
    Checker(#[from] LlmError),
    #[error("empty query")]
    EmptyQuery,
}

pub fn tool_list_tables(engine: &dyn EngineAdapter) -> Result<String, ToolError> {
    Ok(engine.list_tables()?.join("\n"))
}

/// DDL per table, each followed by up to `sample_rows` rows. Unknown tables
/// yield an observation naming them rather than an error.
pub fn tool_get_schema(
    engine: &dyn EngineAdapter,
    tables: &[String],
    sample_rows: usize,
) -> Result<String, ToolError> {
    let mut blocks = Vec::new();
    for table in tables {
        let ddl = match engine.get_create_table(table) {
            Ok(ddl) => ddl,
            Err(EngineError::UnknownTable(t)) => {
                blocks.push(format!("table not found: {t}"));
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut block = ddl;
        if sample_rows > 0 {
            let sample = engine.sample_rows(table, sample_rows)?;
            block.push_str(&format!(
                "\n\n/*\n{} rows from {table} table:\n{}\n*/",
                sample.num_rows(),
                sample.render_grid(sample_rows)
            ));
        }
        blocks.push(block);
    }
    Ok(blocks.join("\n\n"))
}

/// Asks the checker model to review `sql`; returns its verdict verbatim.
pub fn tool_check_query(
    llm: &dyn LlmBackend,
    sql: &str,
    checker_prompt: &str,
    retry: &RetryPolicy,
) -> Result<(String, TokenUsage, u32), ToolError> {
    if sql.trim().is_empty() {
        return Err(ToolError::EmptyQuery);
    }
    let messages = [Message::system(checker_prompt), Message::user(sql)];
    let (exchange, retries) = complete_with_retry(llm, &messages, &[], retry)?;
    Ok((exchange.response.text, exchange.usage, retries))
}

pub fn tool_run_query(
    engine: &dyn EngineAdapter,
    sql: &str,
) -> Result<(ResultTable, f64, Option<u64>), ToolError> {
    if sql.trim().is_empty() {
        return Err(ToolError::EmptyQuery);
    }
    let out = engine.execute_timed(sql)?;
    Ok((out.table, out.seconds, out.bytes_scanned))
}

fn complete_with_retry(
    llm: &dyn LlmBackend,
    messages: &[Message],
    tools: &[ToolSchema],
    policy: &RetryPolicy,
) -> Result<(ChatExchange, u32), LlmError> {
    let mut backoff = Duration::from_millis(policy.initial_backoff_ms);
    let mut attempt = 1;
    loop {
        match llm.complete(messages, tools) {
            Ok(x) => return Ok((x, attempt - 1)),
            Err(e) if e.is_transient() && attempt < policy.attempts => {
                log::warn!("LLM call failed (attempt {attempt}): {e}; retrying");
                std::thread::sleep(backoff);
                backoff *= 2;
                attempt += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Parsed {
    thought: String,
    action: Action,
    input: String,
}

fn marker_at(text: &str, marker: &str) -> Option<(usize, usize)> {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim_start();
        if trimmed.starts_with(marker) {
            let start = offset + (line.len() - trimmed.len());
            return Some((start, start + marker.len()));
        }
        offset += line.len();
    }
    None
}

fn parse_text_reply(text: &str) -> Result<Parsed, String> {
    let action = marker_at(text, "Action:");
    let final_answer = marker_at(text, "Final Answer:");
    let head_end = match (action, final_answer) {
        (Some(_), Some(_)) => return Err("reply has both an Action and a Final Answer".into()),
        (Some((s, _)), None) | (None, Some((s, _))) => s,
        (None, None) => return Err("reply has neither an Action nor a Final Answer".into()),
    };
    let head = text[..head_end].trim();
    let thought = head.strip_prefix("Thought:").unwrap_or(head).trim().to_string();

    if let Some((_, body)) = final_answer {
        return Ok(Parsed {
            thought,
            action: Action::FinalAnswer,
            input: text[body..].trim().to_string(),
        });
    }
    let (_, name_start) = action.unwrap();
    let rest = &text[name_start..];
    let name_line = rest.lines().next().unwrap_or("");
    let name = name_line.trim().trim_matches(|c| c == '`' || c == '"' || c == '\'');
    let tool = ToolId::from_name(name).ok_or_else(|| format!("unknown tool {name:?}"))?;
    let input = match marker_at(rest, "Action Input:") {
        Some((_, s)) => {
            let body = &rest[s..];
            let body = match marker_at(body, "Observation:") {
                Some((cut, _)) => &body[..cut],
                None => body,
            };
            body.trim().to_string()
        }
        None if tool == ToolId::ListTables => String::new(),
        None => return Err(format!("{name} needs an Action Input")),
    };
    Ok(Parsed {
        thought,
        action: Action::Tool(tool),
        input,
    })
}

fn parse_reply(response: &ChatResponse) -> Result<Parsed, String> {
    match &response.tool_call {
        Some(call) => {
            let tool = ToolId::from_name(&call.name).ok_or_else(|| format!("unknown tool {:?}", call.name))?;
            let input = match &call.arguments {
                Value::Null => String::new(),
                Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            Ok(Parsed {
                thought: response.text.trim().to_string(),
                action: Action::Tool(tool),
                input,
            })
        }
        None => parse_text_reply(&response.text),
    }
}

/// Removes a surrounding markdown code fence, if any.
pub fn strip_fences(text: &str) -> String {
    let t = text.trim();
    if let Some(open) = t.find("```") {
        let after = &t[open + 3..];
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(after.len());
        let body = &after[body_start..];
        let body = body.find("```").map(|i| &body[..i]).unwrap_or(body);
        return body.trim().to_string();
    }
    t.to_string()
}

fn query_from_input(input: &str) -> String {
    let t = input.trim();
    if t.starts_with('{') {
        if let Ok(Value::Object(o)) = serde_json::from_str::<Value>(t) {
            if let Some(q) = o.get("query").or_else(|| o.get("sql")).and_then(Value::as_str) {
                return strip_fences(q);
            }
        }
    } else if t.starts_with('"') {
        if let Ok(Value::String(q)) = serde_json::from_str::<Value>(t) {
            return strip_fences(&q);
        }
    }
    strip_fences(t)
}

fn tables_from_input(input: &str) -> Vec<String> {
    let t = input.trim();
    let from_values = |vals: &[Value]| -> Vec<String> {
        vals.iter().filter_map(|v| v.as_str().map(|s| s.trim().to_string())).collect()
    };
    match serde_json::from_str::<Value>(t) {
        Ok(Value::Array(a)) => return from_values(&a),
        Ok(Value::Object(o)) => {
            match o.get("tables").or_else(|| o.get("table_names")) {
                Some(Value::Array(a)) => return from_values(a),
                Some(Value::String(s)) => return tables_from_input(s),
                _ => return Vec::new(),
            }
        }
        Ok(Value::String(s)) => return tables_from_input(&s),
        _ => {}
    }
    t.split(',')
        .map(|s| s.trim().trim_matches(|c| c == '`' || c == '"' || c == '\'').to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn looks_like_sql(text: &str) -> bool {
    let first = text.split_whitespace().next().unwrap_or("").to_ascii_uppercase();
    first == "SELECT" || first == "WITH"
}

fn truncate_observation(text: String, limit: usize) -> String {
    let n = text.chars().count();
    if n <= limit {
        return text;
    }
    let kept: String = text.chars().take(limit).collect();
    format!("{kept}\n[observation truncated: {} of {n} characters omitted]", n - limit)
}

fn render_result(table: &ResultTable, rows: usize) -> String {
    let mut s = table.render_grid(rows);
    if table.num_rows() > rows {
        s.push_str(&format!("\n({} rows, first {rows} shown)", table.num_rows()));
    } else {
        s.push_str(&format!("\n({} rows)", table.num_rows()));
    }
    s
}

/// Runs one ReAct episode to completion.
pub fn run_agent(
    question: &str,
    config: &AgentConfig,
    llm: &dyn LlmBackend,
    engine: &dyn EngineAdapter,
) -> AgentTrace {
    let clock = Instant::now();
    let now = || clock.elapsed().as_secs_f64();
    let mut trace = AgentTrace::empty(question, llm.model_id());
    let schemas: Vec<ToolSchema> = if llm.supports_tools() {
        ToolId::ALL.iter().map(|t| t.schema()).collect()
    } else {
        Vec::new()
    };
    let mut messages = vec![
        Message::system(config.system_prompt.clone()),
        Message::user(format!("Question: {question}")),
    ];
    let mut last_end = 0.0;
    let mut outcome = None;

    for index in 0..config.max_iterations.max(1) {
        let started_at = last_end;
        let llm_clock = Instant::now();
        let (exchange, retries) = match complete_with_retry(llm, &messages, &schemas, &config.retry) {
            Ok(x) => x,
            Err(e) => {
                trace.error = Some(e.to_string());
                outcome = Some(Outcome::LlmError);
                break;
            }
        };
        let llm_seconds = llm_clock.elapsed().as_secs_f64();
        trace.usage_total.add(&exchange.usage);
        let parsed = match parse_reply(&exchange.response) {
            Ok(p) => p,
            Err(e) => {
                trace.tail_usage.add(&exchange.usage);
                trace.error = Some(format!("unparseable reply: {e}"));
                outcome = Some(Outcome::LlmError);
                break;
            }
        };

        let tool_clock = Instant::now();
        let mut it = Iteration {
            index,
            thought: parsed.thought,
            action: parsed.action,
            action_input: parsed.input.clone(),
            observation: String::new(),
            response: exchange.response.text.clone(),
            tool_call: exchange.response.tool_call.clone(),
            started_at,
            ended_at: started_at,
            llm_seconds,
            tool_seconds: 0.0,
            usage: exchange.usage,
            checker_usage: None,
            engine_seconds: None,
            bytes_scanned: None,
            retries,
        };
        let mut stop = None;
        let observation: String = match parsed.action {
            Action::FinalAnswer => {
                let answer = strip_fences(&parsed.input);
                if trace.final_sql.is_none() && looks_like_sql(&answer) {
                    trace.final_sql = Some(answer);
                }
                stop = Some(Outcome::Completed);
                String::new()
            }
            Action::Tool(ToolId::ListTables) => match tool_list_tables(engine) {
                Ok(obs) => obs,
                Err(e) => {
                    stop = Some(Outcome::ToolError);
                    format!("Error: {e}")
                }
            },
            Action::Tool(ToolId::GetSchema) => {
                let tables = tables_from_input(&parsed.input);
                if tables.is_empty() {
                    "Error: no table names given".to_string()
                } else {
                    match tool_get_schema(engine, &tables, config.sample_rows) {
                        Ok(obs) => obs,
                        Err(e) => {
                            stop = Some(Outcome::ToolError);
                            format!("Error: {e}")
                        }
                    }
                }
            }
            Action::Tool(ToolId::CheckQuery) => {
                let sql = query_from_input(&parsed.input);
                match tool_check_query(llm, &sql, &config.checker_prompt, &config.retry) {
                    Ok((verdict, usage, r)) => {
                        trace.usage_total.add(&usage);
                        it.checker_usage = Some(usage);
                        it.retries += r;
                        verdict
                    }
                    Err(ToolError::EmptyQuery) => "Error: empty query".to_string(),
                    Err(e) => {
                        stop = Some(Outcome::ToolError);
                        format!("Error: {e}")
                    }
                }
            }
            Action::Tool(ToolId::RunQuery) => {
                let sql = query_from_input(&parsed.input);
                match tool_run_query(engine, &sql) {
                    Ok((table, seconds, bytes)) => {
                        it.engine_seconds = Some(seconds);
                        it.bytes_scanned = bytes;
                        let obs = render_result(&table, config.observation_rows);
                        trace.final_sql = Some(sql);
                        trace.final_result = Some(table);
                        if config.terminate_after_first_run {
                            stop = Some(Outcome::Completed);
                        }
                        obs
                    }
                    Err(e) => {
                        trace.final_sql = Some(sql);
                        trace.final_result = None;
                        stop = Some(Outcome::ToolError);
                        format!("Error: {e}")
                    }
                }
            }
        };
        if stop == Some(Outcome::ToolError) {
            trace.error = Some(observation.trim_start_matches("Error: ").to_string());
        }
        it.observation = truncate_observation(observation, config.observation_limit);
        it.tool_seconds = tool_clock.elapsed().as_secs_f64();
        it.ended_at = now();
        last_end = it.ended_at;

        match &exchange.response.tool_call {
            Some(call) => {
                let mut m = Message::new(Role::Assistant, exchange.response.text.clone());
                m.tool_call = Some(call.clone());
                messages.push(m);
                let mut obs = Message::new(Role::Tool, it.observation.clone());
                obs.tool_call_id = Some(call.id.clone());
                messages.push(obs);
            }
            None => {
                messages.push(Message::new(Role::Assistant, exchange.response.text.clone()));
                messages.push(Message::user(format!("Observation: {}", it.observation)));
            }
        }
        trace.iterations.push(it);
        if stop.is_some() {
            outcome = stop;
            break;
        }
    }

    trace.outcome = outcome.unwrap_or(Outcome::Exhausted);
    trace.ended_at = now().max(last_end);
    trace
}

/// Rebuilds a replay script from an episode log: each controller reply
/// followed, for check iterations, by the checker's verdict.
pub fn replay_from_trace(trace: &AgentTrace) -> ReplayBackend {
    let entry = |text: &str, tool_call: Option<ToolCall>, usage: TokenUsage, secs: f64| RecordedExchange {
        fingerprint: None,
        response: ChatResponse {
            text: text.to_string(),
            tool_call,
        },
        usage,
        latency_ms: Some((secs * 1000.0).round() as u64),
    };
    let mut script = Vec::new();
    for it in &trace.iterations {
        script.push(entry(&it.response, it.tool_call.clone(), it.usage, it.llm_seconds));
        if let Some(usage) = it.checker_usage {
            script.push(entry(&it.observation, None, usage, it.tool_seconds));
        }
    }
    ReplayBackend::new(&trace.model_id, script).lenient()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageShare {
    pub stage: Stage,
    pub seconds: f64,
    /// Share of end-to-end time.
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageBreakdown {
    pub e2e_seconds: f64,
    /// One entry per stage, in [`Stage::ALL`] order.
    pub stages: Vec<StageShare>,
}

impl StageBreakdown {
    pub fn share(&self, stage: Stage) -> &StageShare {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage present")
    }

    /// Percentages of the four tool stages over their own sum, leaving the
    /// finalize stage out.
    pub fn tool_percentages(&self) -> [f64; 4] {
        let secs: Vec<f64> = Stage::TOOLS.iter().map(|s| self.share(*s).seconds).collect();
        let total: f64 = secs.iter().sum();
        let mut out = [0.0; 4];
        if total > 0.0 {
            for (o, s) in out.iter_mut().zip(&secs) {
                *o = 100.0 * s / total;
            }
        }
        out
    }
}

/// Attributes each iteration's wall-clock time to the stage of its action.
/// Time outside any iteration goes to finalize.
pub fn stage_breakdown(trace: &AgentTrace) -> StageBreakdown {
    let e2e = trace.e2e_seconds().max(0.0);
    let mut seconds = [0.0f64; 5];
    let slot = |s: Stage| Stage::ALL.iter().position(|x| *x == s).unwrap();
    for it in &trace.iterations {
        seconds[slot(it.action.stage())] += it.duration().max(0.0);
    }
    let covered: f64 = seconds.iter().sum();
    seconds[slot(Stage::Finalize)] += (e2e - covered).max(0.0);
    let stages = Stage::ALL
        .iter()
        .zip(seconds)
        .map(|(stage, s)| StageShare {
            stage: *stage,
            seconds: s,
            percent: if e2e > 0.0 { 100.0 * s / e2e } else { 0.0 },
        })
        .collect();
    StageBreakdown {
        e2e_seconds: e2e,
        stages,
    }
}
