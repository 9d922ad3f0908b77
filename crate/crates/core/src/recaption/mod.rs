//! Description and category-list generation: request builders for the
//! describe and two-pass summarize calls, plus the text post-processing that
//! turns model output into a clean global prompt and a flat category list.
//!
//! Nothing here touches pixels or the network.

pub mod templates;

use std::collections::HashSet;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::CategorySet;
use crate::gateway::{ChatRequest, Message, Part};
pub use templates::{PromptTemplates, Template};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecaptionError {
    #[error("template: {0}")]
    Template(String),
    #[error("invalid negative pattern {pattern:?}: {message}")]
    Pattern { pattern: String, message: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("description and web caption are both empty")]
    EmptyInputs,
}

pub const DEFAULT_NEGATIVE_PATTERNS: &[&str] =
    &["there (is|are) no", "no (visible|other)", "without any", "not (visible|present)", "(is|are) not"];

pub const MAX_CATEGORY_CHARS: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecaptionConfig {
    pub max_description_tokens: u32,
    /// Whole-word, case-insensitive regular expressions.
    pub negative_patterns: Vec<String>,
    pub category_cap: usize,
    pub max_category_words: usize,
    /// Token budget for each summarize pass.
    pub max_summary_tokens: u32,
}

impl Default for RecaptionConfig {
    fn default() -> Self {
        RecaptionConfig {
            max_description_tokens: 256,
            negative_patterns: DEFAULT_NEGATIVE_PATTERNS.iter().map(|s| s.to_string()).collect(),
            category_cap: 120,
            max_category_words: 8,
            max_summary_tokens: 512,
        }
    }
}

impl RecaptionConfig {
    pub fn check(&self) -> Result<(), RecaptionError> {
        if self.max_description_tokens == 0
            || self.category_cap == 0
            || self.max_category_words == 0
            || self.max_summary_tokens == 0
        {
            return Err(RecaptionError::Config("token budgets and caps must be at least 1".into()));
        }
        NegativeFilter::new(&self.negative_patterns).map(|_| ())
    }
}

/// Describe call: image plus the constraint instructions. The web caption is
/// deliberately left out so it cannot bias the visual description.
pub fn build_describe_request(
    image: &[u8],
    mime: &str,
    templates: &PromptTemplates,
    cfg: &RecaptionConfig,
) -> ChatRequest {
    let text = templates.describe.fill(&[
        ("style_prefix_instruction", templates::STYLE_PREFIX_INSTRUCTION),
        ("no_speculation_clause", templates::NO_SPECULATION_CLAUSE),
        ("no_transcription_clause", templates::NO_TRANSCRIPTION_CLAUSE),
    ]);
    ChatRequest::new(
        vec![Message::user(vec![Part::Image { mime: mime.to_string(), data: image.to_vec() }, Part::Text(text)])],
        cfg.max_description_tokens,
    )
}

/// Builds the second summarize request once pass-1 phrases are known.
#[derive(Debug, Clone)]
pub struct Pass2Builder {
    template: Template,
    max_tokens: u32,
}

impl Pass2Builder {
    pub fn build(&self, phrases: &[String]) -> ChatRequest {
        let text = self.template.fill(&[("phrase_list", &phrases.join("\n"))]);
        ChatRequest::new(vec![Message::user(vec![Part::Text(text)])], self.max_tokens)
    }
}

pub fn build_summarize_requests(
    description: &str,
    web_caption: &str,
    templates: &PromptTemplates,
    cfg: &RecaptionConfig,
) -> Result<(ChatRequest, Pass2Builder), RecaptionError> {
    if description.trim().is_empty() && web_caption.trim().is_empty() {
        return Err(RecaptionError::EmptyInputs);
    }
    let text = templates.summarize_pass1.fill(&[("description", description), ("web_caption", web_caption)]);
    let pass1 = ChatRequest::new(vec![Message::user(vec![Part::Text(text)])], cfg.max_summary_tokens);
    Ok((pass1, Pass2Builder { template: templates.summarize_pass2.clone(), max_tokens: cfg.max_summary_tokens }))
}

/// Compiled negative-sentence patterns.
#[derive(Debug, Clone)]
pub struct NegativeFilter {
    patterns: Vec<Regex>,
}

impl NegativeFilter {
    pub fn new(patterns: &[String]) -> Result<Self, RecaptionError> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(&format!(r"(?i)\b(?:{p})\b"))
                    .map_err(|e| RecaptionError::Pattern { pattern: p.clone(), message: e.to_string() })
            })
            .collect::<Result<_, _>>()?;
        Ok(NegativeFilter { patterns })
    }

    pub fn is_negative(&self, sentence: &str) -> bool {
        self.patterns.iter().any(|re| re.is_match(sentence))
    }

    /// Applies one cleaning pass until nothing changes, so that a dropped
    /// leading sentence cannot expose a fresh "This is" opener.
    pub fn clean(&self, text: &str) -> String {
        let mut cur = self.clean_once(text);
        loop {
            let next = self.clean_once(&cur);
            if next == cur {
                return cur;
            }
            cur = next;
        }
    }

    fn clean_once(&self, text: &str) -> String {
        let mut rest = text.trim();
        let mut stripped = false;
        while rest.len() >= 8 && rest.is_char_boundary(8) && rest[..8].eq_ignore_ascii_case("this is ") {
            rest = rest[8..].trim_start();
            stripped = true;
        }
        let body = if stripped { capitalize_first(rest) } else { rest.to_string() };
        split_sentences(&body).into_iter().filter(|s| !self.is_negative(s)).collect::<Vec<_>>().join(" ")
    }
}

fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Splits after runs of `.`, `?` or `!` that are followed by whitespace or
/// the end of the text. Returned sentences are trimmed and non-empty.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut iter = text.char_indices().peekable();
    while let Some((i, c)) = iter.next() {
        if matches!(c, '.' | '?' | '!') {
            let next = iter.peek().map(|&(_, n)| n);
            if next.is_none_or(char::is_whitespace) {
                let end = i + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Strips the style opener, drops negative sentences and normalizes spacing.
/// Idempotent.
pub fn postprocess_description(text: &str, cfg: &RecaptionConfig) -> Result<String, RecaptionError> {
    Ok(NegativeFilter::new(&cfg.negative_patterns)?.clean(text))
}

fn list_prefix() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^(?:[-*•+]\s*|\d+[.)](?:\s+|$))+").expect("static regex"))
}

fn normalize_category(raw: &str) -> String {
    let s = list_prefix().replace(raw.trim(), "");
    let quote = |c: char| matches!(c, '"' | '\'' | '`' | '“' | '”' | '‘' | '’');
    let mut s = s.trim();
    loop {
        let t = s.trim_matches(quote).trim_end_matches(['.', ',', ';', ':']).trim();
        if t == s {
            break;
        }
        s = t;
    }
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

pub fn parse_category_list(output: &str, cfg: &RecaptionConfig) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in output.lines() {
        let c = normalize_category(line);
        if c.is_empty()
            || c.split(' ').count() > cfg.max_category_words
            || c.chars().count() > MAX_CATEGORY_CHARS
            || !seen.insert(c.clone())
        {
            continue;
        }
        out.push(c);
    }
    out
}

/// Pass-1 phrases first, then their constituents, deduplicated
/// case-insensitively and capped.
pub fn merge_categories(pass1: &[String], pass2: &[String], cfg: &RecaptionConfig) -> CategorySet {
    let mut seen = HashSet::new();
    let merged: Vec<String> = pass1
        .iter()
        .chain(pass2)
        .map(|c| c.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
        .filter(|c| !c.is_empty() && seen.insert(c.clone()))
        .take(cfg.category_cap)
        .collect();
    CategorySet { phrases: pass1.to_vec(), terms: pass2.to_vec(), merged }
}
