//! Deterministic offline backend.
//!
//! Chat requests are answered by keyword routing over the shared lexicon:
//! theme extraction routes each participant sentence to a theme, feedback
//! scoring is driven by marker density. Embeddings hash each token to a
//! fixed unit vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use super::{AttemptError, Backend, ChatRequest, EmbeddingMatrix};
use crate::itas::FEEDBACK_TASK;
use crate::lexicon::{normalize_token, split_sentences, Lexicon};
use crate::numeric::Matrix;
use crate::theme::ThemeId;
use crate::ticl::{EXTRACTION_TASK, NO_CONTENT};

#[derive(Debug, Clone)]
pub struct MockBackend {
    seed: u64,
    dim: usize,
}

impl MockBackend {
    pub fn new(seed: u64, dim: usize) -> MockBackend {
        MockBackend { seed, dim }
    }

    pub fn respond(&self, req: &ChatRequest) -> String {
        let content = &req.user_content;
        if content.lines().any(|l| l.trim() == EXTRACTION_TASK) {
            mock_extraction(content)
        } else if content.lines().any(|l| l.trim() == FEEDBACK_TASK) {
            mock_feedback(content)
        } else {
            "The mock backend only answers theme extraction and feedback tasks.".to_string()
        }
    }

    pub fn embed_text(&self, text: &str) -> EmbeddingMatrix {
        let tokens: Vec<String> = text
            .split_whitespace()
            .map(|raw| {
                let t = normalize_token(raw);
                if t.is_empty() {
                    raw.to_string()
                } else {
                    t
                }
            })
            .collect();
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for t in &tokens {
            data.extend(mock_token_vector(t, self.seed, self.dim));
        }
        EmbeddingMatrix {
            matrix: Matrix::new(tokens.len(), self.dim, data).expect("non-empty finite embedding"),
            tokens,
        }
    }
}

impl Backend for MockBackend {
    fn id(&self) -> String {
        "mock".to_string()
    }

    fn chat(&self, req: &ChatRequest) -> Result<String, AttemptError> {
        Ok(self.respond(req))
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingMatrix>, AttemptError> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

/// Unit-norm pseudo-random vector for `token`, stable across processes.
pub fn mock_token_vector(token: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut h = Sha256::new();
    h.update(b"embed/v1");
    h.update(seed.to_le_bytes());
    h.update(token.as_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn participant_lines(content: &str) -> Vec<&str> {
    content
        .lines()
        .filter_map(|l| l.strip_prefix("PARTICIPANT:"))
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect()
}

fn mock_extraction(content: &str) -> String {
    let lex = Lexicon::builtin();
    let mut buckets: [Vec<&str>; 5] = Default::default();
    for line in participant_lines(content) {
        for sentence in split_sentences(line) {
            if let Some(theme) = lex.route_sentence(sentence) {
                buckets[theme.index()].push(sentence);
            }
            buckets[ThemeId::Overall.index()].push(sentence);
        }
    }
    let mut obj = Map::new();
    for theme in ThemeId::ALL {
        let b = &buckets[theme.index()];
        let text = if b.is_empty() { NO_CONTENT.to_string() } else { b.join(" ") };
        obj.insert(theme.as_str().to_string(), Value::String(text));
    }
    format!(
        "Here are the extracted themes.\n{}\nEach value quotes the relevant statements.",
        serde_json::to_string_pretty(&Value::Object(obj)).expect("json")
    )
}

/// Score in [0, 10]: 0 for empty themes, otherwise 1 plus 9 times the
/// fraction of sentences carrying a marker phrase, rounded to 0.1.
pub fn mock_feedback_score(text: &str) -> f64 {
    if text.trim() == NO_CONTENT || text.trim().is_empty() {
        return 0.0;
    }
    let lex = Lexicon::builtin();
    let sentences = split_sentences(text);
    let with_marker = sentences.iter().filter(|s| lex.contains_marker(s)).count();
    let frac = with_marker as f64 / sentences.len().max(1) as f64;
    ((1.0 + 9.0 * frac) * 10.0).round() / 10.0
}

fn mock_feedback(content: &str) -> String {
    let mut scores = Map::new();
    let mut rationales = Map::new();
    for line in content.lines() {
        let line = line.trim();
        let Some(rest) = line.strip_prefix('[') else { continue };
        let Some((name, text)) = rest.split_once(']') else { continue };
        let Ok(theme) = name.parse::<ThemeId>() else { continue };
        let score = mock_feedback_score(text);
        let markers = Lexicon::builtin().count_markers(text);
        scores.insert(theme.as_str().to_string(), json!(score));
        rationales.insert(
            theme.as_str().to_string(),
            json!(format!("{markers} depressive marker phrase(s) found")),
        );
    }
    serde_json::to_string(&json!({ "scores": scores, "rationales": rationales })).expect("json")
}
