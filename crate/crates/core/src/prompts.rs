//! Prompt sets, style prefixes and the on-disk prompt corpus.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vision::VisionClient;

pub const PROMPTS_PER_PAGE: usize = 4;
pub const CORPUS_SCHEMA_VERSION: u32 = 1;
/// Separator placed between a style prefix and the prompt sentence.
pub const PREFIX_SEPARATOR: &str = ", ";

/// Prompt texts for score pages 1–7, as shipped with the crate.
pub const FIXTURE_CORPUS_JSON: &str = include_str!("../assets/fixture_corpus_pages_1_7.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScorePage {
    pub page_number: u32,
    /// Raster image of the page. Clients that never look at pixels (the fixture) accept `None`.
    pub image_ref: Option<PathBuf>,
}

impl ScorePage {
    pub fn new(page_number: u32, image_ref: impl Into<PathBuf>) -> Self {
        ScorePage {
            page_number,
            image_ref: Some(image_ref.into()),
        }
    }

    pub fn without_image(page_number: u32) -> Self {
        ScorePage {
            page_number,
            image_ref: None,
        }
    }
}

/// Four prompt sentences for one page, in left-to-right reading order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    page_number: u32,
    prompts: [String; PROMPTS_PER_PAGE],
}

impl PromptSet {
    pub fn new(page_number: u32, prompts: Vec<String>) -> Result<Self> {
        if page_number == 0 {
            return Err(Error::Input("page numbers start at 1".into()));
        }
        let found = prompts.len();
        let prompts: [String; PROMPTS_PER_PAGE] = prompts.try_into().map_err(|_| {
            Error::format(format!(
                "page {page_number}: expected {PROMPTS_PER_PAGE} prompts, found {found}"
            ))
        })?;
        for (i, p) in prompts.iter().enumerate() {
            check_sentence(p).map_err(|why| Error::format(format!("page {page_number}: prompt {}: {why}", i + 1)))?;
        }
        Ok(PromptSet { page_number, prompts })
    }

    pub fn page_number(&self) -> u32 {
        self.page_number
    }

    pub fn prompts(&self) -> &[String; PROMPTS_PER_PAGE] {
        &self.prompts
    }
}

fn check_sentence(s: &str) -> std::result::Result<(), &'static str> {
    if s.is_empty() {
        Err("empty")
    } else if s.contains(['\n', '\r']) {
        Err("spans more than one line")
    } else if s.trim() != s {
        Err("has leading or trailing whitespace")
    } else {
        Ok(())
    }
}

/// Style-defining keywords prepended to every prompt, e.g. `sine wave is playing`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StylePrefix(String);

impl StylePrefix {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::Input("style prefix is empty".into()));
        }
        if text.trim() != text || text.contains(['\n', '\r']) {
            return Err(Error::Input(format!(
                "style prefix {text:?} must be a single trimmed line"
            )));
        }
        if text.ends_with(|c: char| c.is_ascii_punctuation()) {
            return Err(Error::Input(format!(
                "style prefix {text:?} must not end with punctuation"
            )));
        }
        Ok(StylePrefix(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn apply(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        Ok(format!("{}{PREFIX_SEPARATOR}{prompt}", self.0))
    }
}

/// `prefix + ", " + prompt`. Not idempotent: applying twice prefixes twice.
pub fn apply_prefix(prefix: &str, prompt: &str) -> Result<String> {
    StylePrefix::new(prefix)?.apply(prompt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusSource {
    Fixture,
    VisionService,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCorpus {
    prefix: StylePrefix,
    pages: Vec<PromptSet>,
    source: CorpusSource,
    /// Only service-generated corpora are stamped; fixture corpora stay byte-stable.
    created_at: Option<DateTime<Utc>>,
}

impl PromptCorpus {
    pub fn new(
        prefix: StylePrefix,
        pages: Vec<PromptSet>,
        source: CorpusSource,
        created_at: Option<DateTime<Utc>>,
    ) -> Result<Self> {
        for w in pages.windows(2) {
            if w[1].page_number <= w[0].page_number {
                return Err(Error::format(format!(
                    "page numbers must be strictly increasing: page {} follows page {}",
                    w[1].page_number, w[0].page_number
                )));
            }
        }
        Ok(PromptCorpus {
            prefix,
            pages,
            source,
            created_at,
        })
    }

    /// The shipped corpus for pages 1–7.
    pub fn fixture() -> PromptCorpus {
        PromptCorpus::from_json(FIXTURE_CORPUS_JSON).expect("shipped fixture corpus is valid")
    }

    pub fn prefix(&self) -> &StylePrefix {
        &self.prefix
    }

    pub fn pages(&self) -> &[PromptSet] {
        &self.pages
    }

    pub fn source(&self) -> CorpusSource {
        self.source
    }

    pub fn created_at(&self) -> Option<DateTime<Utc>> {
        self.created_at
    }

    pub fn page(&self, page_number: u32) -> Option<&PromptSet> {
        self.pages
            .binary_search_by_key(&page_number, |p| p.page_number)
            .ok()
            .map(|i| &self.pages[i])
    }

    pub fn prompt_count(&self) -> usize {
        self.pages.len() * PROMPTS_PER_PAGE
    }

    pub fn with_prefix(mut self, prefix: StylePrefix) -> Self {
        self.prefix = prefix;
        self
    }

    pub fn to_json(&self) -> String {
        let file = CorpusFile {
            schema_version: CORPUS_SCHEMA_VERSION,
            prefix: self.prefix.0.clone(),
            source: self.source,
            created_at: self.created_at.map(|t| t.to_rfc3339()),
            pages: self
                .pages
                .iter()
                .map(|p| PageEntry {
                    page: p.page_number,
                    prompts: p.prompts.to_vec(),
                })
                .collect(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("corpus serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<PromptCorpus> {
        let file: CorpusFile = serde_json::from_str(text).map_err(|e| Error::Format {
            message: format!("prompt corpus: {e}"),
            raw: None,
        })?;
        if file.schema_version != CORPUS_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "prompt corpus: schema_version must be {CORPUS_SCHEMA_VERSION}, found {}",
                file.schema_version
            )));
        }
        let prefix = StylePrefix::new(file.prefix).map_err(|e| Error::format(format!("prompt corpus: prefix: {e}")))?;
        let created_at = file
            .created_at
            .map(|s| {
                DateTime::parse_from_rfc3339(&s)
                    .map(|t| t.with_timezone(&Utc))
                    .map_err(|e| Error::format(format!("prompt corpus: created_at: {e}")))
            })
            .transpose()?;
        let pages = file
            .pages
            .into_iter()
            .map(|p| PromptSet::new(p.page, p.prompts))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| match e {
                Error::Format { message, raw } => Error::Format {
                    message: format!("prompt corpus: {message}"),
                    raw,
                },
                other => Error::format(format!("prompt corpus: {other}")),
            })?;
        PromptCorpus::new(prefix, pages, file.source, created_at)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    schema_version: u32,
    prefix: String,
    source: CorpusSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    created_at: Option<String>,
    pages: Vec<PageEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PageEntry {
    page: u32,
    prompts: Vec<String>,
}

/// Writes via a temporary sibling file and rename, so readers never see a torn corpus.
pub fn save_corpus(corpus: &PromptCorpus, path: &Path) -> Result<()> {
    crate::fsutil::write_atomic(path, corpus.to_json().as_bytes())
}

pub fn load_corpus(path: &Path) -> Result<PromptCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    PromptCorpus::from_json(&text)
}

/// Asks `client` for one page and checks the result belongs to that page.
pub fn request_prompts(client: &dyn VisionClient, page: &ScorePage) -> Result<PromptSet> {
    let set = client.describe_page(page)?;
    if set.page_number() != page.page_number {
        return Err(Error::format(format!(
            "asked for page {}, client answered for page {}",
            page.page_number,
            set.page_number()
        )));
    }
    Ok(set)
}

/// Prompts for every page, reassembled in ascending page order.
///
/// Up to `concurrency` pages are in flight at once.
pub fn build_corpus(
    client: &dyn VisionClient,
    pages: &[ScorePage],
    prefix: StylePrefix,
    concurrency: usize,
) -> Result<PromptCorpus> {
    let mut pages: Vec<&ScorePage> = pages.iter().collect();
    pages.sort_by_key(|p| p.page_number);
    if let Some(w) = pages.windows(2).find(|w| w[0].page_number == w[1].page_number) {
        return Err(Error::Input(format!("page {} listed twice", w[0].page_number)));
    }
    let mut sets = Vec::with_capacity(pages.len());
    for chunk in pages.chunks(concurrency.max(1)) {
        let results: Vec<Result<PromptSet>> = if chunk.len() == 1 {
            vec![request_prompts(client, chunk[0])]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|page| scope.spawn(move || request_prompts(client, page)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("vision worker panicked"))
                    .collect()
            })
        };
        for r in results {
            sets.push(r?);
        }
    }
    let created_at = match client.source() {
        CorpusSource::Fixture => None,
        CorpusSource::VisionService => Some(Utc::now()),
    };
    PromptCorpus::new(prefix, sets, client.source(), created_at)
}
