//! Marker lexicon and dialogue templates shared by the synthetic generator,
//! the mock LLM backend and the tests.
//!
//! Both files are versioned data under `data/` and compiled into the crate so
//! every component sees the same vocabulary.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::theme::ThemeId;

const LEXICON_JSON: &str = include_str!("../data/marker_lexicon.json");
const TEMPLATES_JSON: &str = include_str!("../data/dialogue_templates.json");

#[derive(Debug, Clone, Deserialize)]
pub struct Lexicon {
    pub version: u32,
    pub markers: Vec<String>,
    pub theme_keywords: BTreeMap<ThemeId, Vec<String>>,
    #[serde(skip)]
    marker_tokens: Vec<Vec<String>>,
}

impl Lexicon {
    /// The lexicon shipped with the crate.
    pub fn builtin() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| {
            Lexicon::from_json(LEXICON_JSON).expect("builtin marker lexicon is valid")
        })
    }

    pub fn from_json(json: &str) -> Result<Lexicon, serde_json::Error> {
        let mut lex: Lexicon = serde_json::from_str(json)?;
        lex.marker_tokens = lex.markers.iter().map(|m| tokenize(m)).collect();
        Ok(lex)
    }

    /// Number of marker phrase occurrences in `text`, matched as whole-token
    /// sequences after normalization.
    pub fn count_markers(&self, text: &str) -> usize {
        let tokens = tokenize(text);
        self.marker_tokens
            .iter()
            .map(|phrase| count_subsequence(&tokens, phrase))
            .sum()
    }

    pub fn contains_marker(&self, text: &str) -> bool {
        self.count_markers(text) > 0
    }

    /// Per-token flags marking tokens that belong to some marker phrase.
    pub fn marker_mask(&self, tokens: &[String]) -> Vec<bool> {
        let mut mask = vec![false; tokens.len()];
        for phrase in &self.marker_tokens {
            if phrase.is_empty() || phrase.len() > tokens.len() {
                continue;
            }
            for start in 0..=tokens.len() - phrase.len() {
                if tokens[start..start + phrase.len()] == phrase[..] {
                    mask[start..start + phrase.len()].iter_mut().for_each(|m| *m = true);
                }
            }
        }
        mask
    }

    /// Routes a sentence to the topical theme with the most keyword hits.
    /// Ties go to the earlier theme in canonical order; no hits means the
    /// sentence is small talk.
    pub fn route_sentence(&self, sentence: &str) -> Option<ThemeId> {
        let tokens = tokenize(sentence);
        let mut best: Option<(ThemeId, usize)> = None;
        for theme in ThemeId::TOPICAL {
            let Some(keywords) = self.theme_keywords.get(&theme) else {
                continue;
            };
            let hits = tokens
                .iter()
                .filter(|t| keywords.iter().any(|k| k == *t))
                .count();
            if hits > 0 && best.is_none_or(|(_, b)| hits > b) {
                best = Some((theme, hits));
            }
        }
        best.map(|(t, _)| t)
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct ThemeTemplates {
    pub questions: Vec<String>,
    pub statements: Vec<String>,
    #[serde(default)]
    pub marker_statements: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct DialogueTemplates {
    pub version: u32,
    pub opening: String,
    pub closing: String,
    pub themes: BTreeMap<ThemeId, ThemeTemplates>,
    pub small_talk: ThemeTemplates,
}

impl DialogueTemplates {
    pub fn builtin() -> &'static DialogueTemplates {
        static TEMPLATES: OnceLock<DialogueTemplates> = OnceLock::new();
        TEMPLATES.get_or_init(|| {
            serde_json::from_str(TEMPLATES_JSON).expect("builtin dialogue templates are valid")
        })
    }

    pub fn theme(&self, theme: ThemeId) -> &ThemeTemplates {
        self.themes
            .get(&theme)
            .unwrap_or_else(|| panic!("no templates for theme {theme}"))
    }
}

/// Lowercases and strips surrounding punctuation from a whitespace token.
/// Inner apostrophes survive, so "can't" stays one token.
pub fn normalize_token(raw: &str) -> String {
    raw.trim_matches(|c: char| !c.is_alphanumeric() && c != '\'')
        .trim_matches('\'')
        .to_lowercase()
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(normalize_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Splits text into sentences at `.`, `?` or `!` followed by whitespace or
/// end of input. Terminators stay attached to their sentence.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '?' | '!') {
            let at_boundary = chars.get(i + 1).is_none_or(|&(_, n)| n.is_whitespace());
            if at_boundary {
                let end = pos + c.len_utf8();
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

fn count_subsequence(haystack: &[String], needle: &[String]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}
