//! Multi-turn agent loop: query the model, parse its turn, run the requested
//! tool, feed the result back as an `<information>` block, repeat.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grammar::{parse_turn, SegmentKind, Termination, Trajectory};
use crate::http::{key_from_env, HttpError, JsonClient};
use crate::imagekit::ImageBuffer;
use crate::mat::{read_jsonl, BenchItem, MatError, Task};
use crate::sandbox::{self, CodeBackend, CodeRequest, CodeResponse, ExecStatus, Limits};
use crate::search::{format_information, SearchBackend, SearchQuery, SearchResult, DEFAULT_K};

pub const SEARCH_SYSTEM_PROMPT: &str = "\
You answer questions about an image, using a web search tool when the image alone is not enough.
Every reply must be exactly one <think>...</think> block followed by exactly one action:
  <search>query</search>  to look something up; results come back inside <information>...</information>
  <answer>final answer</answer>  when you are done
Break multi-hop questions into one search per hop. Keep answers short: an entity, number or phrase.";

pub const CODING_SYSTEM_PROMPT: &str = "\
You answer questions about an image that may be rotated, too dark, overexposed, blurred, noisy or cluttered.
Every reply must be exactly one <think>...</think> block followed by exactly one action:
  <code>program</code>  to process the image; the processed image comes back with an <information>...</information> block
  <answer>final answer</answer>  when you are done
The program receives the task image as `image` and should save its result.
Keep answers short: an entity, number or phrase.";

pub const BASELINE_SUFFIX: &str = "Answer the question directly.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Search,
    Coding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Environment,
}

/// Image attached to a message, referenced by content hash.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub name: String,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolStatus {
    Ok,
    Error,
    Timeout,
    /// The call was not made because the tool-call budget ran out.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub kind: SegmentKind,
    pub request: String,
    pub response: String,
    pub status: ToolStatus,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub task_id: String,
    pub mode: Mode,
    pub messages: Vec<Message>,
    pub trajectory: Trajectory,
    pub tool_events: Vec<ToolEvent>,
    pub final_answer: Option<String>,
    /// Pixel data for every attached image, keyed by sha256.
    #[serde(skip)]
    pub images: BTreeMap<String, ImageBuffer>,
}

impl Transcript {
    pub fn new(task_id: impl Into<String>, mode: Mode) -> Self {
        Self {
            task_id: task_id.into(),
            mode,
            messages: Vec::new(),
            trajectory: Trajectory {
                turns: Vec::new(),
                terminated_by: Termination::Budget,
            },
            tool_events: Vec::new(),
            final_answer: None,
            images: BTreeMap::new(),
        }
    }

    fn attach(&mut self, name: &str, img: &ImageBuffer) -> ImageRef {
        let sha = image_digest(img);
        self.images.entry(sha.clone()).or_insert_with(|| img.clone());
        ImageRef {
            name: name.to_string(),
            sha256: sha,
            width: img.width(),
            height: img.height(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Checks the event/segment correspondence and answer/termination invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        let tool_segments: Vec<_> = self.trajectory.segments().filter(|s| s.kind.is_tool_call()).collect();
        if tool_segments.len() != self.tool_events.len() {
            return Err(format!(
                "{} tool segments but {} tool events",
                tool_segments.len(),
                self.tool_events.len()
            ));
        }
        for (i, (seg, ev)) in tool_segments.iter().zip(&self.tool_events).enumerate() {
            if seg.kind != ev.kind || seg.body != ev.request {
                return Err(format!("tool event {i} does not match its segment"));
            }
        }
        if self.final_answer.is_some() != (self.trajectory.terminated_by == Termination::Answer) {
            return Err("final_answer must be set iff terminated by answer".into());
        }
        Ok(())
    }
}

/// Hex SHA-256 over width, height and raw RGB bytes.
pub fn image_digest(img: &ImageBuffer) -> String {
    let mut h = Sha256::new();
    h.update(img.width().to_be_bytes());
    h.update(img.height().to_be_bytes());
    h.update(img.pixels());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Http(#[from] HttpError),
    #[error("malformed completion: {0}")]
    Response(String),
    #[error("script for task {task} has no turn {turn}")]
    ScriptExhausted { task: String, turn: usize },
    #[error("{0}")]
    Other(String),
}

/// What a provider sees when asked for the next assistant turn.
pub struct TurnContext<'a> {
    pub task_id: &'a str,
    pub turn_index: usize,
    pub messages: &'a [Message],
    pub images: &'a BTreeMap<String, ImageBuffer>,
}

pub trait ModelProvider: Send + Sync {
    fn complete(&self, ctx: &TurnContext<'_>) -> Result<String, ModelError>;
}

/// Replays fixed responses by turn index, optionally per task id.
#[derive(Debug, Clone, Default)]
pub struct ScriptedModel {
    scripts: HashMap<String, Vec<String>>,
    default: Vec<String>,
    repeat_last: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRecord {
    pub id: String,
    pub turns: Vec<String>,
}

impl ScriptedModel {
    pub fn new(default: Vec<String>) -> Self {
        Self { default, ..Self::default() }
    }

    pub fn with_task(mut self, task: impl Into<String>, turns: Vec<String>) -> Self {
        self.scripts.insert(task.into(), turns);
        self
    }

    /// Keep returning the final scripted turn once the script runs out.
    pub fn repeat_last(mut self, yes: bool) -> Self {
        self.repeat_last = yes;
        self
    }

    /// JSON Lines of `{"id", "turns": [...]}`.
    pub fn load_jsonl(path: &Path) -> Result<Self, MatError> {
        let records: Vec<ScriptRecord> = read_jsonl(path)?;
        Ok(records.into_iter().fold(Self::default(), |m, r| m.with_task(r.id, r.turns)))
    }
}

impl ModelProvider for ScriptedModel {
    fn complete(&self, ctx: &TurnContext<'_>) -> Result<String, ModelError> {
        let script = self.scripts.get(ctx.task_id).unwrap_or(&self.default);
        let turn = match script.get(ctx.turn_index) {
            Some(t) => t,
            None if self.repeat_last && !script.is_empty() => script.last().expect("non-empty"),
            None => {
                return Err(ModelError::ScriptExhausted {
                    task: ctx.task_id.to_string(),
                    turn: ctx.turn_index,
                })
            }
        };
        Ok(turn.clone())
    }
}

/// Answers every task with an empty answer.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullModel;

impl ModelProvider for NullModel {
    fn complete(&self, _: &TurnContext<'_>) -> Result<String, ModelError> {
        Ok("<think>no model configured</think><answer></answer>".into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChatConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            retries: 3,
            temperature: 0.0,
            max_tokens: 1024,
        }
    }
}

/// Chat-completions client; images travel as base64 PNG data URLs.
pub struct ChatModel {
    cfg: ChatConfig,
    key: String,
    client: JsonClient,
}

impl ChatModel {
    pub fn new(cfg: ChatConfig) -> Result<Self, ModelError> {
        let key = key_from_env(&cfg.api_key_env)?;
        let client = JsonClient::new(Duration::from_secs_f64(cfg.timeout_secs), cfg.retries)?;
        Ok(Self { cfg, key, client })
    }

    pub fn request_body(&self, ctx: &TurnContext<'_>) -> Result<Value, ModelError> {
        let mut messages = Vec::with_capacity(ctx.messages.len());
        for m in ctx.messages {
            let role = match m.role {
                Role::System => "system",
                Role::Assistant => "assistant",
                // tool output is presented to the model as a user message
                Role::User | Role::Environment => "user",
            };
            if m.images.is_empty() {
                messages.push(json!({"role": role, "content": m.text}));
                continue;
            }
            let mut parts = vec![json!({"type": "text", "text": m.text})];
            for r in &m.images {
                let img = ctx
                    .images
                    .get(&r.sha256)
                    .ok_or_else(|| ModelError::Other(format!("image {} not in transcript", r.sha256)))?;
                let png = img.encode_png().map_err(|e| ModelError::Other(e.to_string()))?;
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:image/png;base64,{}", STANDARD.encode(png))}
                }));
            }
            messages.push(json!({"role": role, "content": parts}));
        }
        Ok(json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_tokens,
        }))
    }
}

impl ModelProvider for ChatModel {
    fn complete(&self, ctx: &TurnContext<'_>) -> Result<String, ModelError> {
        let body = self.request_body(ctx)?;
        let auth = format!("Bearer {}", self.key);
        let resp = self.client.post(&self.cfg.endpoint, &[("Authorization", &auth)], &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ModelError::Response("missing choices[0].message.content".into()))
    }
}

#[derive(Clone, Default)]
pub struct ToolSet {
    pub search: Option<Arc<dyn SearchBackend>>,
    pub code: Option<CodeBackend>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub max_turns: usize,
    pub max_tool_calls: usize,
    pub per_tool_timeout_secs: f64,
    pub mode: Mode,
    pub search_k: usize,
    /// Truncate each injected search snippet to this many characters.
    pub snippet_char_cap: Option<usize>,
    /// Tool-free protocol: the question gets the direct-answer suffix.
    pub baseline: bool,
    /// When false, latencies are recorded as 0 so transcripts are reproducible.
    pub record_latency: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            max_turns: 8,
            max_tool_calls: 6,
            per_tool_timeout_secs: 10.0,
            mode: Mode::Search,
            search_k: DEFAULT_K,
            snippet_char_cap: None,
            baseline: false,
            record_latency: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("model call failed on turn {turn}: {source}")]
    Model {
        turn: usize,
        #[source]
        source: ModelError,
    },
    #[error("no pending search/code segment to answer")]
    NoPendingTool,
    #[error("tool result kind {got:?} does not match pending segment {expected:?}")]
    ResultKindMismatch { expected: SegmentKind, got: SegmentKind },
    #[error("coding task {0} has no image")]
    MissingImage(String),
    #[error("invalid rollout config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ToolResult {
    Search(Result<Vec<SearchResult>, String>),
    Code(CodeResponse),
}

impl ToolResult {
    pub fn kind(&self) -> SegmentKind {
        match self {
            ToolResult::Search(_) => SegmentKind::Search,
            ToolResult::Code(_) => SegmentKind::Code,
        }
    }

    pub fn status(&self) -> ToolStatus {
        match self {
            ToolResult::Search(Ok(_)) => ToolStatus::Ok,
            ToolResult::Search(Err(_)) => ToolStatus::Error,
            ToolResult::Code(r) => match r.status {
                ExecStatus::Ok => ToolStatus::Ok,
                ExecStatus::Timeout => ToolStatus::Timeout,
                ExecStatus::RuntimeError | ExecStatus::ProtocolError => ToolStatus::Error,
            },
        }
    }
}

fn truncate_chars(s: &str, cap: usize) -> String {
    match s.char_indices().nth(cap) {
        Some((at, _)) => format!("{}…", &s[..at]),
        None => s.to_string(),
    }
}

/// Text placed inside the information block.
pub fn format_result(result: &ToolResult, snippet_char_cap: Option<usize>) -> String {
    match result {
        ToolResult::Search(Ok(hits)) => {
            let capped: Vec<SearchResult> = hits
                .iter()
                .map(|h| SearchResult {
                    snippet: snippet_char_cap.map_or_else(|| h.snippet.clone(), |c| truncate_chars(&h.snippet, c)),
                    ..h.clone()
                })
                .collect();
            format_information(&capped)
        }
        ToolResult::Search(Err(e)) => format!("search error: {e}"),
        ToolResult::Code(r) => match r.status {
            ExecStatus::Ok if r.stdout.is_empty() => "execution ok".into(),
            ExecStatus::Ok => format!("execution ok\n{}", r.stdout),
            ExecStatus::Timeout => format!("execution timeout: {}", r.stderr),
            ExecStatus::RuntimeError | ExecStatus::ProtocolError => format!("execution error: {}", r.stderr),
        },
    }
}

fn pending_tool(t: &Transcript) -> Option<SegmentKind> {
    if t.messages.last()?.role != Role::Assistant {
        return None;
    }
    let action = t.trajectory.turns.last()?.action()?;
    action.kind.is_tool_call().then_some(action.kind)
}

/// Appends the environment message answering the last assistant tool call.
pub fn inject_information(t: &mut Transcript, result: &ToolResult, snippet_char_cap: Option<usize>) -> Result<(), RolloutError> {
    let expected = pending_tool(t).ok_or(RolloutError::NoPendingTool)?;
    if expected != result.kind() {
        return Err(RolloutError::ResultKindMismatch {
            expected,
            got: result.kind(),
        });
    }
    let body = format_result(result, snippet_char_cap);
    let mut images = Vec::new();
    if let ToolResult::Code(r) = result {
        if r.status == ExecStatus::Ok {
            for (name, img) in &r.output_images {
                images.push(t.attach(name, img));
            }
        }
    }
    t.messages.push(Message {
        role: Role::Environment,
        text: format!("{}{body}{}", SegmentKind::Information.open(), SegmentKind::Information.close()),
        images,
    });
    Ok(())
}

fn run_tool(kind: SegmentKind, body: &str, image: Option<&ImageBuffer>, tools: &ToolSet, cfg: &RolloutConfig) -> ToolResult {
    match kind {
        SegmentKind::Search => ToolResult::Search(match &tools.search {
            None => Err("search tool unavailable".into()),
            Some(backend) => SearchQuery::new(body, cfg.search_k)
                .and_then(|q| backend.search(&q))
                .map_err(|e| e.to_string()),
        }),
        _ => ToolResult::Code(match (&tools.code, image) {
            (None, _) => CodeResponse::failure(ExecStatus::RuntimeError, "code tool unavailable".into()),
            (_, None) => CodeResponse::failure(ExecStatus::RuntimeError, "no image to process".into()),
            (Some(backend), Some(img)) => sandbox::execute(
                &CodeRequest {
                    code: body.to_string(),
                    input_images: vec![("image".into(), img.clone())],
                    limits: Limits {
                        wall_time_secs: cfg.per_tool_timeout_secs,
                        ..Limits::default()
                    },
                },
                backend,
            ),
        }),
    }
}

/// Runs one task to termination. Tool failures are reported to the model;
/// only a failing model call aborts the rollout.
pub fn run_rollout(
    task: &BenchItem,
    image: Option<&ImageBuffer>,
    model: &dyn ModelProvider,
    tools: &ToolSet,
    cfg: &RolloutConfig,
) -> Result<Transcript, RolloutError> {
    if cfg.max_turns == 0 || cfg.max_tool_calls == 0 {
        return Err(RolloutError::Config("budgets must be positive".into()));
    }
    if cfg.mode == Mode::Coding && image.is_none() {
        return Err(RolloutError::MissingImage(task.id.clone()));
    }
    let mut t = Transcript::new(&task.id, cfg.mode);
    let system = match cfg.mode {
        Mode::Search => SEARCH_SYSTEM_PROMPT,
        Mode::Coding => CODING_SYSTEM_PROMPT,
    };
    t.messages.push(Message {
        role: Role::System,
        text: system.into(),
        images: vec![],
    });
    let question = if cfg.baseline {
        format!("{} {BASELINE_SUFFIX}", task.question)
    } else {
        task.question.clone()
    };
    let images = image.map(|img| vec![t.attach("image", img)]).unwrap_or_default();
    t.messages.push(Message {
        role: Role::User,
        text: question,
        images,
    });

    for turn in 0..cfg.max_turns {
        let text = model
            .complete(&TurnContext {
                task_id: &task.id,
                turn_index: turn,
                messages: &t.messages,
                images: &t.images,
            })
            .map_err(|source| RolloutError::Model { turn, source })?;
        let parsed = parse_turn(&text);
        let action = parsed.action().cloned();
        let valid = parsed.valid;
        t.messages.push(Message {
            role: Role::Assistant,
            text,
            images: vec![],
        });
        t.trajectory.turns.push(parsed);
        let action = match action {
            Some(a) if valid => a,
            _ => {
                t.trajectory.terminated_by = Termination::FormatViolation;
                return Ok(t);
            }
        };
        if action.kind == SegmentKind::Answer {
            t.final_answer = Some(action.body.trim().to_string());
            t.trajectory.terminated_by = Termination::Answer;
            return Ok(t);
        }
        // every earlier turn made exactly one tool call
        if turn == cfg.max_tool_calls {
            t.tool_events.push(ToolEvent {
                kind: action.kind,
                request: action.body,
                response: "tool-call budget exhausted".into(),
                status: ToolStatus::Skipped,
                latency_ms: 0,
            });
            t.trajectory.terminated_by = Termination::Budget;
            return Ok(t);
        }
        let started = Instant::now();
        let result = run_tool(action.kind, &action.body, image, tools, cfg);
        let latency_ms = if cfg.record_latency { started.elapsed().as_millis() as u64 } else { 0 };
        inject_information(&mut t, &result, cfg.snippet_char_cap)?;
        t.tool_events.push(ToolEvent {
            kind: action.kind,
            request: action.body,
            response: format_result(&result, cfg.snippet_char_cap),
            status: result.status(),
            latency_ms,
        });
    }
    t.trajectory.terminated_by = Termination::Budget;
    Ok(t)
}

/// Mode implied by the item's task.
pub fn mode_for(item: &BenchItem) -> Mode {
    match item.task {
        Task::Coding => Mode::Coding,
        Task::Search => Mode::Search,
    }
}

/// Runs every item (in parallel), each in the mode its task implies.
/// Images are resolved against `base_dir`; a missing image only matters
/// for coding items.
pub fn run_batch(
    items: &[BenchItem],
    base_dir: &Path,
    model: &dyn ModelProvider,
    tools: &ToolSet,
    cfg: &RolloutConfig,
) -> Vec<Result<Transcript, RolloutError>> {
    items
        .par_iter()
        .map(|item| {
            let image = ImageBuffer::load_png(&base_dir.join(&item.image_path)).ok();
            let cfg = RolloutConfig {
                mode: mode_for(item),
                ..cfg.clone()
            };
            run_rollout(item, image.as_ref(), model, tools, &cfg)
        })
        .collect()
}
