//! Stage glue: transcripts to theme records, theme records to features,
//! and single-session prediction. Also JSONL helpers for stage files.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::corpus::{Label, Split, Transcript};
use crate::eval::{export_figures, EvalError, FigureBundle};
use crate::gateway::{Gateway, GatewayError};
use crate::itas::{request_feedback, Feedback, FeedbackSource, ItasError, FALLBACK_SCORE};
use crate::model::{Model, ModelError, Prediction, SessionFeatures, ThemeEmbedding};
use crate::theme::{PerTheme, ThemeId};
use crate::ticl::{extract_batch, extract_themes, InContextTemplate, ThemeSet, TiclError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ticl(#[from] TiclError),
    #[error(transparent)]
    Itas(#[from] ItasError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path} line {line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },
}

impl PipelineError {
    /// True when the backend could not be reached.
    pub fn is_unavailable(&self) -> bool {
        match self {
            PipelineError::Gateway(e) => e.is_unavailable(),
            PipelineError::Ticl(TiclError::Gateway(e)) => e.is_unavailable(),
            PipelineError::Itas(ItasError::Gateway(e)) => e.is_unavailable(),
            _ => false,
        }
    }
}

/// Extracted themes plus feedback for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeRecord {
    pub session_id: String,
    pub label: Option<Label>,
    pub split: Split,
    pub themes: ThemeSet,
    pub feedback: Feedback,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// Feedback for a theme set; a gateway failure degrades to uniform scores.
fn feedback_or_fallback(gateway: &Gateway, themes: &ThemeSet, retries: u32, warnings: &mut Vec<String>) -> Feedback {
    match request_feedback(gateway, themes, retries) {
        Ok(out) => {
            warnings.extend(out.warnings);
            out.feedback
        }
        Err(e) => {
            let w = format!("session {}: feedback failed: {e}; using uniform scores", themes.session_id);
            tracing::warn!("{w}");
            warnings.push(w);
            Feedback::uniform(FALLBACK_SCORE, FeedbackSource::Llm)
        }
    }
}

/// Theme extraction and feedback for a batch. Never aborts: failed sessions
/// carry sentinel themes and warnings.
pub fn extract_stage(
    gateway: &Gateway,
    transcripts: &[Transcript],
    template: &InContextTemplate,
    retries: u32,
) -> Vec<ThemeRecord> {
    let extractions = extract_batch(gateway, transcripts, template, retries);
    let pairs: Vec<(&Transcript, _)> = transcripts.iter().zip(extractions).collect();
    gateway.map_bounded(&pairs, |(t, ex)| {
        let mut warnings: Vec<String> = ex.warning.iter().cloned().collect();
        let feedback = feedback_or_fallback(gateway, &ex.themes, retries, &mut warnings);
        ThemeRecord {
            session_id: t.session_id.clone(),
            label: t.label,
            split: t.split,
            themes: ex.themes.clone(),
            feedback,
            warnings,
        }
    })
}

/// Embeds the five theme texts of one record in a single call.
pub fn embed_themes(
    gateway: &Gateway,
    themes: &ThemeSet,
) -> Result<PerTheme<ThemeEmbedding>, GatewayError> {
    let texts: Vec<String> = ThemeId::ALL.iter().map(|t| themes.text(*t).to_string()).collect();
    let mut out = gateway.embed(&texts)?.into_iter().map(ThemeEmbedding::from);
    Ok(PerTheme::from_fn(|_| out.next().expect("five embeddings")))
}

pub fn embed_stage(gateway: &Gateway, records: &[ThemeRecord]) -> Result<Vec<SessionFeatures>, GatewayError> {
    gateway
        .map_bounded(records, |r| {
            Ok(SessionFeatures {
                session_id: r.session_id.clone(),
                label: r.label,
                themes: embed_themes(gateway, &r.themes)?,
                feedback: r.feedback.clone(),
            })
        })
        .into_iter()
        .collect()
}

/// Result of running one transcript through the whole pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub record: ThemeRecord,
    pub prediction: Prediction,
    pub figures: FigureBundle,
    #[serde(skip)]
    pub features: Option<SessionFeatures>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutagePolicy {
    /// Gateway outages during extraction or feedback become errors.
    Fail,
    /// Outages degrade to sentinel themes and uniform feedback.
    Degrade,
}

/// extract, feedback, embed, model. `overrides` replaces the backend's
/// feedback with caller-supplied scores and skips the feedback call.
pub fn run_session(
    gateway: &Gateway,
    template: &InContextTemplate,
    model: &Model,
    transcript: &Transcript,
    overrides: Option<&Feedback>,
    retries: u32,
    policy: OutagePolicy,
) -> Result<SessionResult, PipelineError> {
    let mut warnings = Vec::new();
    let themes = match extract_themes(gateway, transcript, template, retries) {
        Ok(ex) => {
            warnings.extend(ex.warning);
            ex.themes
        }
        Err(e) if policy == OutagePolicy::Degrade => {
            let w = format!("session {}: extraction failed: {e}", transcript.session_id);
            tracing::warn!("{w}");
            warnings.push(w);
            ThemeSet::sentinel(&transcript.session_id, "extraction failed")
        }
        Err(e) => return Err(e.into()),
    };
    let feedback = match overrides {
        Some(f) => {
            f.validate()?;
            f.clone()
        }
        None => match policy {
            OutagePolicy::Degrade => feedback_or_fallback(gateway, &themes, retries, &mut warnings),
            OutagePolicy::Fail => {
                let out = request_feedback(gateway, &themes, retries)?;
                warnings.extend(out.warnings);
                out.feedback
            }
        },
    };
    let features = SessionFeatures {
        session_id: transcript.session_id.clone(),
        label: transcript.label,
        themes: embed_themes(gateway, &themes)?,
        feedback: feedback.clone(),
    };
    let prediction = model.predict(&features)?;
    let figures = export_figures(model, &features)?;
    Ok(SessionResult {
        record: ThemeRecord {
            session_id: transcript.session_id.clone(),
            label: transcript.label,
            split: transcript.split,
            themes,
            feedback,
            warnings,
        },
        prediction,
        figures,
        features: Some(features),
    })
}

/// Writes one JSON value per line via a temporary file and rename.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), PipelineError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| PipelineError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = std::io::BufWriter::new(fs::File::create(&tmp).map_err(io)?);
        for item in items {
            serde_json::to_writer(&mut f, item).map_err(|e| PipelineError::Io {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            f.write_all(b"\n").map_err(io)?;
        }
        f.flush().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, PipelineError> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| PipelineError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                detail: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use crate::gateway::BackendConfig;
    use crate::model::ModelConfig;
    use crate::ticl::NO_CONTENT;
    use rand::SeedableRng;

    #[test]
    fn stages_roundtrip_through_files() {
        let gw = Gateway::new(BackendConfig::mock(0, 8)).unwrap();
        let spec = SyntheticSpec {
            num_sessions: 6,
            ..SyntheticSpec::default()
        };
        let corpus = generate_synthetic(&spec).unwrap();
        let records = extract_stage(&gw, &corpus, InContextTemplate::builtin(), 2);
        assert_eq!(records.len(), 6);
        assert!(records.iter().all(|r| r.warnings.is_empty()));
        assert!(records.iter().all(|r| r.themes.text(ThemeId::Overall) != NO_CONTENT));
        let dir = tempfile::tempdir().unwrap();
        write_jsonl(dir.path().join("themes.jsonl"), &records).unwrap();
        let back: Vec<ThemeRecord> = read_jsonl(dir.path().join("themes.jsonl")).unwrap();
        assert_eq!(back, records);
        let feats = embed_stage(&gw, &records).unwrap();
        write_jsonl(dir.path().join("features.jsonl"), &feats).unwrap();
        let back: Vec<SessionFeatures> = read_jsonl(dir.path().join("features.jsonl")).unwrap();
        assert_eq!(back, feats);
    }

    #[test]
    fn overrides_skip_feedback_and_echo() {
        let gw = Gateway::new(BackendConfig::mock(0, 8)).unwrap();
        let model = Model::init(ModelConfig::new(8), &mut rand_chacha::ChaCha8Rng::seed_from_u64(1)).unwrap();
        let t = &generate_synthetic(&SyntheticSpec { num_sessions: 3, ..SyntheticSpec::default() }).unwrap()[0];
        let uniform = Feedback::uniform(5.0, FeedbackSource::Clinician);
        let a = run_session(&gw, InContextTemplate::builtin(), &model, t, Some(&uniform), 2, OutagePolicy::Fail).unwrap();
        assert_eq!(a.record.feedback, uniform);
        assert!(a.prediction.weights.alpha.values().iter().all(|x| *x == 0.2));
        let b = run_session(&gw, InContextTemplate::builtin(), &model, t, None, 2, OutagePolicy::Fail).unwrap();
        assert_eq!(b.record.feedback.source, FeedbackSource::Llm);
        let c = run_session(&gw, InContextTemplate::builtin(), &model, t, None, 2, OutagePolicy::Fail).unwrap();
        assert_eq!(b.prediction, c.prediction);
    }
}
