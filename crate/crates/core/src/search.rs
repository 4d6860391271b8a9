//! Search tool backends.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::http::{key_from_env, HttpError, JsonClient};
use crate::reward::normalize_text;

pub const MAX_QUERY_CHARS: usize = 512;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("empty search query")]
    EmptyQuery,
    #[error("search configuration: {0}")]
    Config(String),
    #[error("search transport (retryable): {0}")]
    Transport(String),
    #[error("search response: {0}")]
    Response(String),
    #[error("corpus {path}: line {line}: {message}")]
    Corpus { path: String, line: usize, message: String },
}

impl SearchError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, SearchError::Transport(_))
    }
}

impl From<HttpError> for SearchError {
    fn from(e: HttpError) -> Self {
        match e {
            HttpError::MissingKey(_) => SearchError::Config(e.to_string()),
            e if e.is_retryable() => SearchError::Transport(e.to_string()),
            e => SearchError::Response(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchQuery {
    text: String,
    pub k: usize,
}

impl SearchQuery {
    /// Trims the text and truncates it to [`MAX_QUERY_CHARS`] characters.
    pub fn new(text: &str, k: usize) -> Result<Self, SearchError> {
        let trimmed = text.trim();
        if trimmed.is_empty() {
            return Err(SearchError::EmptyQuery);
        }
        Ok(Self {
            text: trimmed.chars().take(MAX_QUERY_CHARS).collect::<String>().trim_end().to_string(),
            k,
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub rank: usize,
    pub title: String,
    pub snippet: String,
    pub url: String,
}

pub trait SearchBackend: Send + Sync {
    fn search(&self, q: &SearchQuery) -> Result<Vec<SearchResult>, SearchError>;
}

/// `[rank] title — snippet (url)` per result, `no results` for none.
pub fn format_information(results: &[SearchResult]) -> String {
    if results.is_empty() {
        return "no results".to_string();
    }
    results
        .iter()
        .map(|r| format!("[{}] {} — {} ({})", r.rank, r.title, r.snippet, r.url))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureDocument {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

/// Offline index scored by distinct normalized-token overlap.
#[derive(Debug, Clone, Default)]
pub struct FixtureIndex {
    docs: Vec<(FixtureDocument, BTreeSet<String>)>,
}

impl FixtureIndex {
    pub fn new(docs: Vec<FixtureDocument>) -> Self {
        let docs = docs
            .into_iter()
            .map(|d| {
                let tokens = normalize_text(&format!("{} {}", d.title, d.text)).into_iter().collect();
                (d, tokens)
            })
            .collect();
        Self { docs }
    }

    /// Reads a JSON Lines corpus: one `{"id","title","text"}` per line.
    pub fn load_jsonl(path: &Path) -> Result<Self, SearchError> {
        let file = std::fs::File::open(path).map_err(|e| SearchError::Corpus {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut docs = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let err = |message: String| SearchError::Corpus {
                path: path.display().to_string(),
                line: i + 1,
                message,
            };
            let line = line.map_err(|e| err(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            docs.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
        }
        Ok(Self::new(docs))
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Documents with a positive score, best first, ties by id ascending.
    pub fn scored(&self, query: &str) -> Vec<(usize, &FixtureDocument)> {
        let q: BTreeSet<String> = normalize_text(query).into_iter().collect();
        let mut hits: Vec<(usize, &FixtureDocument)> = self
            .docs
            .iter()
            .map(|(d, toks)| (q.intersection(toks).count(), d))
            .filter(|(s, _)| *s > 0)
            .collect();
        hits.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
        hits
    }
}

impl SearchBackend for FixtureIndex {
    fn search(&self, q: &SearchQuery) -> Result<Vec<SearchResult>, SearchError> {
        Ok(self
            .scored(q.text())
            .into_iter()
            .take(q.k)
            .enumerate()
            .map(|(i, (_, d))| SearchResult {
                rank: i + 1,
                title: if d.title.is_empty() { d.id.clone() } else { d.title.clone() },
                snippet: d.text.clone(),
                url: d.url.clone().unwrap_or_else(|| format!("fixture://{}", d.id)),
            })
            .collect())
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct InFlight {
    max: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

impl InFlight {
    fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().expect("in-flight lock poisoned");
        while *used >= self.max {
            used = self.freed.wait(used).expect("in-flight lock poisoned");
        }
        *used += 1;
        InFlightGuard(self)
    }
}

struct InFlightGuard<'a>(&'a InFlight);

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.0.used.lock().expect("in-flight lock poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SerperConfig {
    pub endpoint: String,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub retries: u32,
    pub max_in_flight: usize,
}

impl Default for SerperConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://google.serper.dev/search".into(),
            api_key_env: "SERPER_API_KEY".into(),
            timeout_secs: 15.0,
            retries: 2,
            max_in_flight: 4,
        }
    }
}

/// Serper-shaped web search: `POST {q, num}` with an `X-API-KEY` header,
/// results read from `organic[].{title, snippet, link}`.
#[derive(Debug)]
pub struct SerperBackend {
    cfg: SerperConfig,
    client: JsonClient,
    in_flight: InFlight,
}

impl SerperBackend {
    pub fn new(cfg: SerperConfig) -> Result<Self, SearchError> {
        let client = JsonClient::new(Duration::from_secs_f64(cfg.timeout_secs), cfg.retries)?;
        let in_flight = InFlight {
            max: cfg.max_in_flight.max(1),
            used: Mutex::new(0),
            freed: Condvar::new(),
        };
        Ok(Self { cfg, client, in_flight })
    }

    pub fn parse_response(body: &serde_json::Value, k: usize) -> Result<Vec<SearchResult>, SearchError> {
        let Some(organic) = body.get("organic") else {
            return Ok(Vec::new());
        };
        let organic = organic
            .as_array()
            .ok_or_else(|| SearchError::Response("`organic` is not an array".into()))?;
        let text = |v: &serde_json::Value, f: &str| v.get(f).and_then(|x| x.as_str()).unwrap_or_default().to_string();
        Ok(organic
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, o)| SearchResult {
                rank: i + 1,
                title: text(o, "title"),
                snippet: text(o, "snippet"),
                url: text(o, "link"),
            })
            .collect())
    }
}

impl SearchBackend for SerperBackend {
    fn search(&self, q: &SearchQuery) -> Result<Vec<SearchResult>, SearchError> {
        if q.k == 0 {
            return Ok(Vec::new());
        }
        let key = key_from_env(&self.cfg.api_key_env)?;
        let _slot = self.in_flight.acquire();
        let body = self
            .client
            .post(&self.cfg.endpoint, &[("X-API-KEY", key.as_str())], &json!({ "q": q.text(), "num": q.k }))?;
        Self::parse_response(&body, q.k)
    }
}
