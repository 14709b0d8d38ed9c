//! Theme adjustment: the guidance combiner, feedback scoring, weight
//! normalization and weighted fusion of pooled theme representations.

use serde::{Deserialize, Serialize};

use crate::gateway::{ChatRequest, Gateway, GatewayError};
use crate::numeric::{mean_pool_rows, mean_pool_rows_backward, Matrix, NumericError};
use crate::theme::{PerTheme, ThemeId};
use crate::ticl::{first_json_object, ThemeSet, NO_CONTENT};

/// First line of every feedback request; the mock backend keys on it.
pub const FEEDBACK_TASK: &str = "TASK: theme-feedback";
pub const SCORE_MIN: f64 = 0.0;
pub const SCORE_MAX: f64 = 10.0;
/// Score used for every theme when feedback cannot be obtained.
pub const FALLBACK_SCORE: f64 = 5.0;

const FEEDBACK_SYSTEM: &str = "You act as a clinician reviewing themes extracted from a screening interview. For each theme, rate from 0 to 10 how relevant its content is to judging whether the participant is depressed. 0 means no relevant content, 10 means strong evidence. Answer with a single JSON object.";

#[derive(Debug, thiserror::Error)]
pub enum ItasError {
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("score for {theme} is {score}, outside [0, 10]")]
    OutOfRange { theme: ThemeId, score: f64 },
    #[error("all themes are disabled")]
    NoActiveTheme,
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Guidance combination `γ·log p(x|c) − (γ−1)·log p(x)`.
pub fn guidance_combine(
    log_p_uncond: &[f64],
    log_p_cond: &[f64],
    gamma: f64,
) -> Result<Vec<f64>, ItasError> {
    if log_p_uncond.len() != log_p_cond.len() {
        return Err(ItasError::Length {
            left: log_p_uncond.len(),
            right: log_p_cond.len(),
        });
    }
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(ItasError::NonFinite("gamma"));
    }
    if log_p_uncond.iter().chain(log_p_cond).any(|v| !v.is_finite()) {
        return Err(ItasError::NonFinite("log probabilities"));
    }
    Ok(log_p_uncond
        .iter()
        .zip(log_p_cond)
        .map(|(u, c)| gamma * c - (gamma - 1.0) * u)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedbackSource {
    #[default]
    Llm,
    Clinician,
}

/// Five raw scores on [0, 10] with rationales, as exchanged over the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub scores: PerTheme<f64>,
    pub source: FeedbackSource,
    #[serde(default)]
    pub rationales: PerTheme<String>,
}

impl Feedback {
    pub fn uniform(score: f64, source: FeedbackSource) -> Feedback {
        Feedback {
            scores: PerTheme::from_fn(|_| score),
            source,
            rationales: PerTheme::default(),
        }
    }

    pub fn validate(&self) -> Result<(), ItasError> {
        validate_scores(&self.scores)
    }
}

pub fn validate_scores(scores: &PerTheme<f64>) -> Result<(), ItasError> {
    for (theme, &score) in scores.iter() {
        if !(SCORE_MIN..=SCORE_MAX).contains(&score) {
            return Err(ItasError::OutOfRange { theme, score });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackOutcome {
    pub feedback: Feedback,
    pub attempts: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

pub fn build_feedback_request(themes: &ThemeSet) -> ChatRequest {
    let mut user = String::new();
    user.push_str(FEEDBACK_TASK);
    user.push_str("\nTHEMES:\n");
    for (theme, c) in themes.content.iter() {
        let one_line = c.text.split_whitespace().collect::<Vec<_>>().join(" ");
        user.push_str(&format!("[{theme}] {one_line}\n"));
    }
    user.push_str(
        "OUTPUT FORMAT:\nReturn one JSON object {\"scores\": {theme: number from 0 to 10}, \"rationales\": {theme: string}} covering family, work, mental, medical and overall.",
    );
    ChatRequest {
        system_prompt: FEEDBACK_SYSTEM.to_string(),
        user_content: user,
        temperature: 0.0,
        max_tokens: 512,
    }
}

/// Parses a feedback reply. Scores outside [0, 10] are clamped and a
/// missing score falls back to the neutral value; both produce warnings.
pub fn parse_feedback_response(text: &str) -> Option<(Feedback, Vec<String>)> {
    let map = first_json_object(text)?;
    let scores = map.get("scores")?.as_object()?;
    let rationales = map.get("rationales").and_then(|r| r.as_object());
    let mut warnings = Vec::new();
    let mut out = PerTheme::from_fn(|_| FALLBACK_SCORE);
    for theme in ThemeId::ALL {
        match scores.get(theme.as_str()) {
            None => warnings.push(format!("no score for {theme}; using {FALLBACK_SCORE}")),
            Some(v) => {
                let s = v.as_f64().filter(|s| s.is_finite())?;
                let clamped = s.clamp(SCORE_MIN, SCORE_MAX);
                if clamped != s {
                    warnings.push(format!("score {s} for {theme} clamped to {clamped}"));
                }
                *out.get_mut(theme) = clamped;
            }
        }
    }
    let rationales = PerTheme::from_fn(|t| {
        rationales
            .and_then(|r| r.get(t.as_str()))
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string()
    });
    Some((
        Feedback {
            scores: out,
            source: FeedbackSource::Llm,
            rationales,
        },
        warnings,
    ))
}

/// Asks the backend to score each theme. All-empty theme sets and replies
/// that stay unparseable after `retries` re-asks fall back to uniform scores.
pub fn request_feedback(
    gateway: &Gateway,
    themes: &ThemeSet,
    retries: u32,
) -> Result<FeedbackOutcome, ItasError> {
    if themes.content.iter().all(|(_, c)| c.text == NO_CONTENT) {
        let w = format!(
            "session {}: every theme is empty; using uniform feedback",
            themes.session_id
        );
        tracing::warn!("{w}");
        return Ok(FeedbackOutcome {
            feedback: Feedback::uniform(FALLBACK_SCORE, FeedbackSource::Llm),
            attempts: 0,
            warnings: vec![w],
        });
    }
    let req = build_feedback_request(themes);
    let mut attempts = 0;
    loop {
        let resp = gateway.chat(&req)?;
        attempts += 1;
        if let Some((feedback, warnings)) = parse_feedback_response(&resp.text) {
            for w in &warnings {
                tracing::warn!(session = %themes.session_id, "{w}");
            }
            return Ok(FeedbackOutcome {
                feedback,
                attempts,
                warnings,
            });
        }
        if attempts > retries {
            let w = format!(
                "session {}: feedback unparseable after {attempts} attempt(s); using uniform feedback",
                themes.session_id
            );
            tracing::warn!("{w}");
            return Ok(FeedbackOutcome {
                feedback: Feedback::uniform(FALLBACK_SCORE, FeedbackSource::Llm),
                attempts,
                warnings: vec![w],
            });
        }
        gateway.invalidate(&req)?;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItasMode {
    /// `α = softmax(1 + w)`.
    #[default]
    Normalized,
    /// `α_i = 1 + w_i`, unnormalized.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackWeights {
    /// Raw weights `s_i / 10`.
    pub w: PerTheme<f64>,
    pub alpha: PerTheme<f64>,
    pub mode: ItasMode,
}

/// Converts scores to fusion weights over all five themes.
pub fn scores_to_weights(scores: &PerTheme<f64>, mode: ItasMode) -> Result<FeedbackWeights, ItasError> {
    scores_to_weights_masked(scores, mode, &[true; 5])
}

/// Like [`scores_to_weights`], with inactive themes given α = 0 and the
/// normalization taken over the active ones only.
pub fn scores_to_weights_masked(
    scores: &PerTheme<f64>,
    mode: ItasMode,
    active: &[bool; 5],
) -> Result<FeedbackWeights, ItasError> {
    validate_scores(scores)?;
    if !active.iter().any(|a| *a) {
        return Err(ItasError::NoActiveTheme);
    }
    let w = scores.map(|_, s| s / 10.0);
    let alpha = match mode {
        ItasMode::Literal => PerTheme::from_fn(|t| {
            if active[t.index()] {
                1.0 + w.get(t)
            } else {
                0.0
            }
        }),
        ItasMode::Normalized => {
            let logits = w.map(|_, x| 1.0 + x);
            let max = ThemeId::ALL
                .iter()
                .filter(|t| active[t.index()])
                .map(|t| *logits.get(*t))
                .fold(f64::NEG_INFINITY, f64::max);
            let e = PerTheme::from_fn(|t| {
                if active[t.index()] {
                    (logits.get(t) - max).exp()
                } else {
                    0.0
                }
            });
            let sum: f64 = e.values().iter().sum();
            e.map(|_, x| x / sum)
        }
    };
    Ok(FeedbackWeights { w, alpha, mode })
}

/// Equal weights `1/n` over the active themes; the ITAS-disabled path.
pub fn uniform_weights(active: &[bool; 5]) -> Result<FeedbackWeights, ItasError> {
    let n = active.iter().filter(|a| **a).count();
    if n == 0 {
        return Err(ItasError::NoActiveTheme);
    }
    let a = 1.0 / n as f64;
    Ok(FeedbackWeights {
        w: PerTheme::from_fn(|_| 0.0),
        alpha: PerTheme::from_fn(|t| if active[t.index()] { a } else { 0.0 }),
        mode: ItasMode::Normalized,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepresentation {
    /// `Σ α_i · pool(X_i)`, 1×d.
    pub x_final: Matrix,
    /// Per-theme `α_i · pool(X_i)`, kept for explanation.
    pub contributions: Vec<Matrix>,
}

/// Weighted sum of already pooled 1×d theme vectors, accumulated in
/// canonical theme order.
pub fn fuse_pooled(pooled: &[Matrix], alpha: &[f64]) -> Result<FusedRepresentation, ItasError> {
    if pooled.len() != alpha.len() || pooled.is_empty() {
        return Err(ItasError::Length {
            left: pooled.len(),
            right: alpha.len(),
        });
    }
    let d = pooled[0].cols();
    let mut x_final = Matrix::zeros(1, d);
    let mut contributions = Vec::with_capacity(pooled.len());
    for (p, &a) in pooled.iter().zip(alpha) {
        if p.shape() != (1, d) {
            return Err(NumericError::shape("fuse", &pooled[0], p).into());
        }
        let c = p.scale(a);
        x_final.add_assign(&c)?;
        contributions.push(c);
    }
    Ok(FusedRepresentation {
        x_final,
        contributions,
    })
}

/// Mean-pools each theme matrix, then fuses.
pub fn fuse(per_theme: &[Matrix], alpha: &[f64]) -> Result<FusedRepresentation, ItasError> {
    let pooled: Vec<Matrix> = per_theme.iter().map(mean_pool_rows).collect();
    fuse_pooled(&pooled, alpha)
}

/// Gradient of `fuse` with respect to each theme matrix.
pub fn fuse_backward(
    d_final: &Matrix,
    alpha: &[f64],
    rows: &[usize],
) -> Result<Vec<Matrix>, ItasError> {
    if alpha.len() != rows.len() {
        return Err(ItasError::Length {
            left: alpha.len(),
            right: rows.len(),
        });
    }
    alpha
        .iter()
        .zip(rows)
        .map(|(&a, &r)| Ok(mean_pool_rows_backward(&d_final.scale(a), r)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::BackendConfig;
    use crate::numeric::random_matrix;
    use crate::ticl::ThemeContent;

    #[test]
    fn guidance_identities() {
        let u = [-1.0, -2.0, -0.3];
        let c = [-2.0, -1.0, -7.5];
        assert_eq!(guidance_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(guidance_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(guidance_combine(&u[..2], &c[..2], 2.0).unwrap(), vec![-3.0, 0.0]);
        assert!(guidance_combine(&u, &c[..2], 1.0).is_err());
    }

    #[test]
    fn weights_examples() {
        let eq = scores_to_weights(&PerTheme::from_fn(|_| 3.3), ItasMode::Normalized).unwrap();
        assert!(eq.alpha.values().iter().all(|a| *a == 0.2));

        let mut s = PerTheme::from_fn(|_| 0.0);
        *s.get_mut(ThemeId::Family) = 10.0;
        let w = scores_to_weights(&s, ItasMode::Normalized).unwrap();
        let e = std::f64::consts::E;
        let denom = e * e + 4.0 * e;
        assert!((w.alpha.get(ThemeId::Family) - e * e / denom).abs() < 1e-15);
        assert!((w.alpha.get(ThemeId::Work) - e / denom).abs() < 1e-15);
        assert!((w.alpha.get(ThemeId::Family) - 0.4046).abs() < 1e-4);
        assert!((w.alpha.get(ThemeId::Work) - 0.1489).abs() < 1e-4);

        let lit = scores_to_weights(&s, ItasMode::Literal).unwrap();
        assert_eq!(lit.alpha.values(), &[2.0, 1.0, 1.0, 1.0, 1.0]);

        *s.get_mut(ThemeId::Work) = 12.0;
        assert!(matches!(
            scores_to_weights(&s, ItasMode::Normalized),
            Err(ItasError::OutOfRange { theme: ThemeId::Work, .. })
        ));
    }

    #[test]
    fn masked_weights_renormalize() {
        let s = PerTheme::from_fn(|t| t.index() as f64);
        let mut active = [true; 5];
        active[ThemeId::Mental.index()] = false;
        let w = scores_to_weights_masked(&s, ItasMode::Normalized, &active).unwrap();
        assert_eq!(*w.alpha.get(ThemeId::Mental), 0.0);
        assert!((w.alpha.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let u = uniform_weights(&active).unwrap();
        assert_eq!(u.alpha.values(), &[0.25, 0.25, 0.0, 0.25, 0.25]);
    }

    #[test]
    fn fuse_identities_and_oracle() {
        let v = random_matrix(1, 6, 1);
        let same: Vec<Matrix> = (0..5).map(|_| v.clone()).collect();
        let f = fuse(&same, &[0.2; 5]).unwrap();
        assert!(f.x_final.max_abs_diff(&v) < 1e-15);

        let xs: Vec<Matrix> = (0..5).map(|i| random_matrix(i + 1, 6, 10 + i as u64)).collect();
        let one_hot = [0.0, 0.0, 1.0, 0.0, 0.0];
        let f = fuse(&xs, &one_hot).unwrap();
        assert_eq!(f.x_final, mean_pool_rows(&xs[2]));

        let alpha = [0.1, 0.3, 0.2, 0.15, 0.25];
        let f = fuse(&xs, &alpha).unwrap();
        for c in 0..6 {
            let mut want = 0.0;
            for (x, a) in xs.iter().zip(alpha) {
                let mut col = 0.0;
                for r in 0..x.rows() {
                    col += x.get(r, c);
                }
                want += a * col / x.rows() as f64;
            }
            assert!((f.x_final.get(0, c) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mock_feedback_prefers_marker_theme() {
        let gw = Gateway::new(BackendConfig::mock(0, 8)).unwrap();
        let mut themes = ThemeSet::sentinel("s", "test");
        let set = |themes: &mut ThemeSet, t: ThemeId, text: &str| {
            *themes.content.get_mut(t) = ThemeContent {
                theme_id: t,
                text: text.into(),
                source_note: None,
            };
        };
        set(&mut themes, ThemeId::Mental, "I feel hopeless. I am numb.");
        set(&mut themes, ThemeId::Work, "My boss is fair.");
        set(&mut themes, ThemeId::Overall, "I feel hopeless. I am numb. My boss is fair.");
        let out = request_feedback(&gw, &themes, 2).unwrap();
        let s = &out.feedback.scores;
        let max = s.values().iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(*s.get(ThemeId::Mental), max);
        assert_eq!(*s.get(ThemeId::Family), 0.0);

        let empty = ThemeSet::sentinel("e", "test");
        let out = request_feedback(&gw, &empty, 2).unwrap();
        assert_eq!(out.feedback.scores.values(), &[5.0; 5]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn parse_clamps_and_fills() {
        let (f, w) = parse_feedback_response(
            r#"ok {"scores":{"family":12,"work":-1,"mental":7.5,"medical":0},"rationales":{"mental":"r"}}"#,
        )
        .unwrap();
        assert_eq!(f.scores.values(), &[10.0, 0.0, 7.5, 0.0, 5.0]);
        assert_eq!(w.len(), 3);
        assert_eq!(f.rationales.get(ThemeId::Mental), "r");
        assert!(parse_feedback_response(r#"{"scores":{"family":"high"}}"#).is_none());
        assert!(parse_feedback_response("nothing").is_none());
    }
}
