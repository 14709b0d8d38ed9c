//! Theme extraction by in-context learning: prompt construction, tolerant
//! response parsing, and the retrying extraction loop.

use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::{Speaker, Transcript};
use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::lexicon::{split_sentences, Lexicon};
use crate::theme::{PerTheme, ThemeId};

/// First line of every extraction request; the mock backend keys on it.
pub const EXTRACTION_TASK: &str = "TASK: theme-extraction";
/// Text of a theme the participant never touched.
pub const NO_CONTENT: &str = "NO_CONTENT";
/// Default number of re-asks after an unparseable response.
pub const DEFAULT_RETRIES: u32 = 2;

const TEMPLATE_JSON: &str = include_str!("../data/ticl_template.json");

#[derive(Debug, thiserror::Error)]
pub enum TiclError {
    #[error("template: {0}")]
    Template(String),
    #[error("prompt needs {words} words after truncation, over the hard cap of {cap}")]
    TooLong { cap: usize, words: usize },
    #[error("no JSON object found in response")]
    NoJson,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub dialogue: String,
    pub themes: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InContextTemplate {
    pub version: u32,
    pub system_prompt: String,
    pub per_theme_instruction: PerTheme<String>,
    pub few_shot_examples: Vec<FewShotExample>,
    pub output_schema_hint: String,
    /// Hard cap on whitespace words in the user message.
    pub prompt_budget_words: usize,
    /// Completion budget passed through to the backend.
    pub max_tokens: u32,
}

impl InContextTemplate {
    pub fn builtin() -> &'static InContextTemplate {
        static T: OnceLock<InContextTemplate> = OnceLock::new();
        T.get_or_init(|| {
            InContextTemplate::from_json(TEMPLATE_JSON).expect("builtin template is valid")
        })
    }

    pub fn from_json(json: &str) -> Result<InContextTemplate, TiclError> {
        let t: InContextTemplate =
            serde_json::from_str(json).map_err(|e| TiclError::Template(e.to_string()))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<InContextTemplate, TiclError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path)
            .map_err(|e| TiclError::Template(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }

    pub fn validate(&self) -> Result<(), TiclError> {
        if let Some((t, _)) = self.per_theme_instruction.iter().find(|(_, s)| s.trim().is_empty()) {
            return Err(TiclError::Template(format!("instruction for {t} is empty")));
        }
        if self.few_shot_examples.is_empty() {
            return Err(TiclError::Template("at least one few-shot example is required".into()));
        }
        if self.prompt_budget_words == 0 || self.max_tokens == 0 {
            return Err(TiclError::Template(
                "prompt_budget_words and max_tokens must be positive".into(),
            ));
        }
        Ok(())
    }

    /// System prompt with the few-shot examples appended.
    pub fn render_system(&self) -> String {
        let mut s = self.system_prompt.trim_end().to_string();
        s.push_str("\n\nEXAMPLES:");
        for (i, ex) in self.few_shot_examples.iter().enumerate() {
            s.push_str(&format!(
                "\n\nExample {}:\nDialogue:\n{}\nThemes:\n{}",
                i + 1,
                ex.dialogue.trim_end(),
                serde_json::to_string(&ex.themes).expect("json value")
            ));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeContent {
    pub theme_id: ThemeId,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_note: Option<String>,
}

impl ThemeContent {
    pub fn sentinel(theme_id: ThemeId, note: Option<String>) -> ThemeContent {
        ThemeContent {
            theme_id,
            text: NO_CONTENT.to_string(),
            source_note: note,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.text == NO_CONTENT
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeSet {
    pub session_id: String,
    pub content: PerTheme<ThemeContent>,
}

impl ThemeSet {
    pub fn sentinel(session_id: impl Into<String>, note: &str) -> ThemeSet {
        ThemeSet {
            session_id: session_id.into(),
            content: PerTheme::from_fn(|t| ThemeContent::sentinel(t, Some(note.to_string()))),
        }
    }

    pub fn text(&self, theme: ThemeId) -> &str {
        &self.content.get(theme).text
    }

    pub fn texts(&self) -> PerTheme<String> {
        self.content.map(|_, c| c.text.clone())
    }
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// A turn with no theme keyword and no marker phrase.
fn is_distractor(text: &str) -> bool {
    let lex = Lexicon::builtin();
    split_sentences(text)
        .iter()
        .all(|s| lex.route_sentence(s).is_none() && !lex.contains_marker(s))
}

fn render_user(kept: &[(Speaker, &str)], omitted: usize, template: &InContextTemplate) -> String {
    let mut s = String::new();
    s.push_str(EXTRACTION_TASK);
    s.push('\n');
    if omitted > 0 {
        s.push_str(&format!(
            "NOTE: {omitted} earlier turn(s) omitted to fit the prompt budget.\n"
        ));
    }
    s.push_str("DIALOGUE:\n");
    for (speaker, text) in kept {
        let one_line = text.split_whitespace().collect::<Vec<_>>().join(" ");
        s.push_str(&format!("{}: {}\n", speaker.tag(), one_line));
    }
    s.push_str("INSTRUCTIONS:\n");
    for (theme, instr) in template.per_theme_instruction.iter() {
        s.push_str(&format!("- {theme}: {}\n", instr.trim()));
    }
    s.push_str("OUTPUT FORMAT:\n");
    s.push_str(template.output_schema_hint.trim());
    s
}

/// Builds the extraction request. When the message exceeds the word budget,
/// distractor turns are dropped oldest first, then any turn oldest first;
/// the final two turns are always kept.
pub fn build_prompt(
    transcript: &Transcript,
    template: &InContextTemplate,
) -> Result<ChatRequest, TiclError> {
    let turns: Vec<(Speaker, &str)> = transcript
        .turns
        .iter()
        .map(|t| (t.speaker, t.text.as_str()))
        .collect();
    let mut keep = vec![true; turns.len()];
    let protected_from = turns.len().saturating_sub(2);
    let cap = template.prompt_budget_words;
    let render = |keep: &[bool]| {
        let kept: Vec<(Speaker, &str)> = turns
            .iter()
            .zip(keep)
            .filter(|(_, k)| **k)
            .map(|(t, _)| *t)
            .collect();
        let omitted = keep.iter().filter(|k| !**k).count();
        render_user(&kept, omitted, template)
    };
    let mut user = render(&keep);
    while word_count(&user) > cap {
        let victim = (0..protected_from)
            .find(|&i| keep[i] && is_distractor(turns[i].1))
            .or_else(|| (0..protected_from).find(|&i| keep[i]));
        match victim {
            Some(i) => keep[i] = false,
            None => {
                return Err(TiclError::TooLong {
                    cap,
                    words: word_count(&user),
                })
            }
        }
        user = render(&keep);
    }
    Ok(ChatRequest {
        system_prompt: template.render_system(),
        user_content: user,
        temperature: 0.0,
        max_tokens: template.max_tokens,
    })
}

/// Finds the first balanced `{...}` span that parses as a JSON object.
/// Braces inside string literals are ignored while scanning.
pub fn first_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut start = 0;
    while let Some(off) = text[start..].find('{') {
        let open = start + off;
        let mut depth = 0usize;
        let mut in_str = false;
        let mut escaped = false;
        let mut close = None;
        for (i, &b) in bytes.iter().enumerate().skip(open) {
            if in_str {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_str = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_str = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        close = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(close) = close {
            if let Ok(Value::Object(map)) = serde_json::from_str(&text[open..=close]) {
                return Some(map);
            }
        }
        start = open + 1;
    }
    None
}

fn theme_text(v: &Value) -> Option<String> {
    let s = match v {
        Value::String(s) => s.trim().to_string(),
        Value::Array(items) => items
            .iter()
            .filter_map(|x| x.as_str())
            .map(str::trim)
            .filter(|x| !x.is_empty())
            .collect::<Vec<_>>()
            .join(" "),
        Value::Null => String::new(),
        other => other.to_string(),
    };
    (!s.is_empty()).then_some(s)
}

/// Parses an extraction response. Missing or empty themes become
/// `NO_CONTENT`; unknown keys and prose around the object are ignored.
pub fn parse_theme_response(session_id: &str, text: &str) -> Result<ThemeSet, TiclError> {
    let map = first_json_object(text).ok_or(TiclError::NoJson)?;
    let content = PerTheme::from_fn(|t| match map.get(t.as_str()).and_then(theme_text) {
        Some(text) => ThemeContent {
            theme_id: t,
            text,
            source_note: None,
        },
        None => ThemeContent::sentinel(t, Some("missing from response".into())),
    });
    Ok(ThemeSet {
        session_id: session_id.to_string(),
        content,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extraction {
    pub themes: ThemeSet,
    /// Chat calls made, including retries.
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// build_prompt, chat, parse; re-asks up to `retries` times on a parse
/// failure and falls back to an all-sentinel set. Gateway errors propagate
/// so callers can distinguish an outage from a bad response.
pub fn extract_themes(
    gateway: &Gateway,
    transcript: &Transcript,
    template: &InContextTemplate,
    retries: u32,
) -> Result<Extraction, TiclError> {
    let req = build_prompt(transcript, template)?;
    let mut attempts = 0;
    loop {
        let resp = gateway.chat(&req)?;
        attempts += 1;
        match parse_theme_response(&transcript.session_id, &resp.text) {
            Ok(themes) => {
                return Ok(Extraction {
                    themes,
                    attempts,
                    warning: None,
                })
            }
            Err(_) if attempts <= retries => {
                gateway.invalidate(&req)?;
            }
            Err(e) => {
                let warning = format!(
                    "session {}: extraction unparseable after {attempts} attempt(s): {e}",
                    transcript.session_id
                );
                tracing::warn!("{warning}");
                return Ok(Extraction {
                    themes: ThemeSet::sentinel(&transcript.session_id, "extraction failed"),
                    attempts,
                    warning: Some(warning),
                });
            }
        }
    }
}

/// Batch extraction that never aborts: a failed session (including a
/// gateway outage) degrades to the sentinel set with a warning.
pub fn extract_batch(
    gateway: &Gateway,
    transcripts: &[Transcript],
    template: &InContextTemplate,
    retries: u32,
) -> Vec<Extraction> {
    gateway.map_bounded(transcripts, |t| {
        extract_themes(gateway, t, template, retries).unwrap_or_else(|e| {
            let warning = format!("session {}: extraction failed: {e}", t.session_id);
            tracing::warn!("{warning}");
            Extraction {
                themes: ThemeSet::sentinel(&t.session_id, "extraction failed"),
                attempts: 0,
                warning: Some(warning),
            }
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendConfig;

    fn two_turn() -> Transcript {
        Transcript::new(
            "s1",
            [
                (Speaker::Interviewer, "How have you been feeling lately?".to_string()),
                (Speaker::Participant, "I have had a low mood for weeks.".to_string()),
            ],
            None,
        )
        .unwrap()
    }

    #[test]
    fn builtin_template_valid() {
        let t = InContextTemplate::builtin();
        assert_eq!(t.few_shot_examples.len(), 2);
        for ex in &t.few_shot_examples {
            let parsed = parse_theme_response("x", &ex.themes.to_string()).unwrap();
            assert!(parsed.content.iter().all(|(_, c)| c.source_note.is_none()));
        }
    }

    #[test]
    fn prompt_contains_turns_in_order_and_theme_names() {
        let req = build_prompt(&two_turn(), InContextTemplate::builtin()).unwrap();
        let u = &req.user_content;
        let a = u.find("INTERVIEWER: How have you been").unwrap();
        let b = u.find("PARTICIPANT: I have had a low mood").unwrap();
        assert!(a < b);
        for t in ThemeId::ALL {
            assert!(u.contains(&format!("- {t}:")));
        }
        assert!(u.starts_with(EXTRACTION_TASK));
        assert_eq!(req.temperature, 0.0);
    }

    #[test]
    fn truncation_drops_distractors_then_oldest() {
        let mut turns = Vec::new();
        for i in 0..20 {
            turns.push((Speaker::Interviewer, format!("Question number {i} about your job?")));
            let text = if i % 2 == 0 {
                format!("The weather was nice on day {i}.")
            } else {
                format!("My boss gave me task {i}.")
            };
            turns.push((Speaker::Participant, text));
        }
        let t = Transcript::new("long", turns, None).unwrap();
        let mut tpl = InContextTemplate::builtin().clone();
        let full = build_prompt(&t, &tpl).unwrap();
        tpl.prompt_budget_words = word_count(&full.user_content) - 20;
        let cut = build_prompt(&t, &tpl).unwrap().user_content;
        assert!(word_count(&cut) <= tpl.prompt_budget_words);
        assert!(!cut.contains("weather was nice on day 0."));
        assert!(cut.contains("My boss gave me task 1."));
        assert!(cut.contains("My boss gave me task 19."));
        assert!(cut.contains("omitted"));

        tpl.prompt_budget_words = 150;
        let cut = build_prompt(&t, &tpl).unwrap().user_content;
        assert!(!cut.contains("task 1."));
        assert!(cut.contains("task 19."));

        tpl.prompt_budget_words = 10;
        match build_prompt(&t, &tpl) {
            Err(TiclError::TooLong { cap, .. }) => assert_eq!(cap, 10),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_full_missing_and_wrapped() {
        let bare = r#"{"family":"f","work":"w","mental":"m","medical":"d","overall":"o","extra":1}"#;
        let s = parse_theme_response("a", bare).unwrap();
        assert_eq!(s.text(ThemeId::Medical), "d");
        let wrapped = format!("Sure! {{not json}} here it is:\n{bare}\nHope that helps {{}}");
        assert_eq!(parse_theme_response("a", &wrapped).unwrap(), s);

        let missing = r#"{"family":"f","work":"w","mental":"m","overall":"o"}"#;
        let s = parse_theme_response("a", missing).unwrap();
        assert_eq!(s.text(ThemeId::Medical), NO_CONTENT);

        let tricky = r#"{"family":"a } brace","work":"","mental":["x","y"],"medical":null,"overall":"o"}"#;
        let s = parse_theme_response("a", tricky).unwrap();
        assert_eq!(s.text(ThemeId::Family), "a } brace");
        assert_eq!(s.text(ThemeId::Work), NO_CONTENT);
        assert_eq!(s.text(ThemeId::Mental), "x y");
        assert_eq!(s.text(ThemeId::Medical), NO_CONTENT);

        assert!(matches!(parse_theme_response("a", "no json here"), Err(TiclError::NoJson)));
        assert!(matches!(parse_theme_response("a", "[1,2]"), Err(TiclError::NoJson)));
    }

    #[test]
    fn mock_extraction_routes_marker_to_mental() {
        let gw = Gateway::new(BackendConfig::mock(0, 16)).unwrap();
        let ex = extract_themes(&gw, &two_turn(), InContextTemplate::builtin(), DEFAULT_RETRIES)
            .unwrap();
        assert_eq!(ex.attempts, 1);
        assert_eq!(ex.themes.text(ThemeId::Mental), "I have had a low mood for weeks.");
        assert_eq!(ex.themes.text(ThemeId::Overall), "I have had a low mood for weeks.");
        assert_eq!(ex.themes.text(ThemeId::Family), NO_CONTENT);
    }
}
