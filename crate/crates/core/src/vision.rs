//! Vision-language clients that read a score page and answer with four prompt sentences.

use std::fs;
use std::time::Duration;

use base64::Engine;
use serde_json::json;

use crate::error::{Error, Result};
use crate::prompts::{CorpusSource, PromptCorpus, PromptSet, ScorePage, PROMPTS_PER_PAGE};

pub const API_KEY_ENV: &str = "SCORE_VISION_API_KEY";
pub const INSTRUCTION_VERSION: &str = "vision-instruction/v1";
pub const INSTRUCTION_TEMPLATE: &str = include_str!("../assets/vision_instruction_v1.txt");

pub trait VisionClient: Sync {
    fn describe_page(&self, page: &ScorePage) -> Result<PromptSet>;

    fn source(&self) -> CorpusSource;
}

/// Answers from the shipped corpus; covers pages 1–7 and never reads images.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    corpus: PromptCorpus,
}

impl FixtureClient {
    pub fn new() -> Self {
        FixtureClient {
            corpus: PromptCorpus::fixture(),
        }
    }

    pub fn pages(&self) -> impl Iterator<Item = u32> + '_ {
        self.corpus.pages().iter().map(|p| p.page_number())
    }
}

impl Default for FixtureClient {
    fn default() -> Self {
        FixtureClient::new()
    }
}

impl VisionClient for FixtureClient {
    fn describe_page(&self, page: &ScorePage) -> Result<PromptSet> {
        self.corpus.page(page.page_number).cloned().ok_or_else(|| {
            let first = self.pages().next().unwrap_or(0);
            let last = self.pages().last().unwrap_or(0);
            Error::Input(format!(
                "fixture has no prompts for page {} (covers pages {first}-{last})",
                page.page_number
            ))
        })
    }

    fn source(&self) -> CorpusSource {
        CorpusSource::Fixture
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (1-based): doubles each time.
    pub fn backoff(&self, retry: u32) -> Duration {
        self.initial_backoff * 2u32.saturating_pow(retry.saturating_sub(1))
    }
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub base_url: String,
    pub model: String,
    pub retry: RetryPolicy,
    pub timeout: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
        }
    }
}

/// Chat-completion client: posts the instruction and the page image, parses four sentences.
pub struct ServiceClient {
    config: ServiceConfig,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl std::fmt::Debug for ServiceClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServiceClient")
            .field("config", &self.config)
            .field("api_key", &"<redacted>")
            .finish()
    }
}

enum Attempt {
    Retry(String),
    Fatal(Error),
}

impl ServiceClient {
    pub fn new(config: ServiceConfig, api_key: impl Into<String>) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| Error::Service(format!("cannot build HTTP client: {e}")))?;
        Ok(ServiceClient {
            config,
            api_key: api_key.into(),
            http,
        })
    }

    /// Reads the bearer token from `SCORE_VISION_API_KEY`.
    pub fn from_env(config: ServiceConfig) -> Result<Self> {
        match std::env::var(API_KEY_ENV) {
            Ok(key) if !key.trim().is_empty() => ServiceClient::new(config, key.trim()),
            _ => Err(Error::Service(format!("environment variable {API_KEY_ENV} is not set"))),
        }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn request_body(&self, mime: &str, image: &[u8]) -> serde_json::Value {
        let encoded = base64::engine::general_purpose::STANDARD.encode(image);
        json!({
            "model": self.config.model,
            "messages": [{
                "role": "user",
                "content": [
                    { "type": "text", "text": INSTRUCTION_TEMPLATE },
                    {
                        "type": "image_url",
                        "image_url": { "url": format!("data:{mime};base64,{encoded}") }
                    }
                ]
            }]
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> std::result::Result<String, Attempt> {
        let response = self
            .http
            .post(self.endpoint())
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| Attempt::Retry(format!("transport: {e}")))?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Retry(format!("HTTP {status}: {text}")));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(Error::Service(format!("HTTP {status}: {text}"))));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| {
            Attempt::Fatal(Error::Format {
                message: format!("response is not JSON: {e}"),
                raw: Some(text.clone()),
            })
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| {
                Attempt::Fatal(Error::Format {
                    message: "response has no choices[0].message.content".into(),
                    raw: Some(text),
                })
            })
    }

    /// Sends the page and returns the raw reply text, retrying transient failures.
    pub fn complete(&self, page: &ScorePage) -> Result<String> {
        let (mime, image) = read_page_image(page)?;
        let body = self.request_body(mime, &image);
        let mut last = String::new();
        for attempt in 1..=self.config.retry.attempts.max(1) {
            if attempt > 1 {
                std::thread::sleep(self.config.retry.backoff(attempt - 1));
            }
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(why)) => {
                    log::warn!("page {}: attempt {attempt} failed: {why}", page.page_number);
                    last = why;
                }
            }
        }
        Err(Error::Service(format!(
            "page {}: giving up after {} attempts: {last}",
            page.page_number, self.config.retry.attempts
        )))
    }
}

impl VisionClient for ServiceClient {
    fn describe_page(&self, page: &ScorePage) -> Result<PromptSet> {
        let raw = self.complete(page)?;
        let sentences = normalize_response(&raw)?;
        PromptSet::new(page.page_number, sentences).map_err(|e| Error::Format {
            message: e.to_string(),
            raw: Some(raw),
        })
    }

    fn source(&self) -> CorpusSource {
        CorpusSource::VisionService
    }
}

fn read_page_image(page: &ScorePage) -> Result<(&'static str, Vec<u8>)> {
    let path = page
        .image_ref
        .as_ref()
        .ok_or_else(|| Error::Input(format!("page {} has no image file", page.page_number)))?;
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read page image {}: {e}", path.display())))?;
    let mime = image_mime(&bytes).ok_or_else(|| Error::Input(format!("{} is neither PNG nor JPEG", path.display())))?;
    Ok((mime, bytes))
}

pub fn image_mime(bytes: &[u8]) -> Option<&'static str> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some("image/png")
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some("image/jpeg")
    } else {
        None
    }
}

/// Splits a reply into exactly four trimmed sentences, or fails with the raw text attached.
///
/// One sentence per line (numbering and bullets stripped) is the expected form.
/// A single paragraph is split at sentence terminators as a fallback.
pub fn normalize_response(raw: &str) -> Result<Vec<String>> {
    let lines: Vec<String> = raw
        .lines()
        .map(strip_marker)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    let sentences = if lines.len() == 1 {
        split_sentences(&lines[0])
    } else {
        lines
    };
    if sentences.len() != PROMPTS_PER_PAGE {
        return Err(Error::Format {
            message: format!(
                "expected {PROMPTS_PER_PAGE} sentences in vision response, found {}",
                sentences.len()
            ),
            raw: Some(raw.to_owned()),
        });
    }
    Ok(sentences)
}

fn strip_marker(line: &str) -> &str {
    let mut s = line.trim();
    s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.len() - s.trim_start_matches(|c: char| c.is_ascii_digit()).len();
    if digits > 0 {
        let rest = &s[digits..];
        if let Some(r) = rest.strip_prefix(['.', ')', ':']) {
            s = r.trim_start();
        }
    }
    s.trim_matches('"').trim()
}

fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        let at_break = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
        if at_break {
            let end = pos + c.len_utf8();
            let s = text[start..end].trim();
            if !s.is_empty() {
                out.push(s.to_owned());
            }
            start = end;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail.to_owned());
    }
    out
}
