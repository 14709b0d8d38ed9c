//! Directory-per-session persistence and the in-memory session table.
//!
//! Layout under the data directory:
//!
//! ```text
//! sessions/<id>/session.json        created_at + transcript
//! sessions/<id>/themes.json         extracted themes and LLM feedback
//! sessions/<id>/features.json       cached token features
//! sessions/<id>/figures.json        figure-data bundle
//! sessions/<id>/prediction.json     last prediction payload
//! sessions/<id>/feedback_log.jsonl  append-only feedback log
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use chrono::{DateTime, Duration, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use themewise_core::eval::FigureBundle;
use themewise_core::model::PooledThemes;
use themewise_core::pipeline::ThemeRecord;
use themewise_core::{Label, PerTheme, SessionFeatures, ThemeId, Transcript};

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
    #[error("{path}: {detail}")]
    Corrupt { path: String, detail: String },
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> StoreError + '_ {
    move |e| StoreError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Llm,
    Clinician,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackLogEntry {
    /// Position in the session's log, from 0.
    pub seq: u64,
    pub session_id: String,
    pub actor: Actor,
    pub scores: PerTheme<f64>,
    pub alpha: PerTheme<f64>,
    pub probability: f64,
    pub label: Label,
    /// Checkpoint the prediction was made with.
    pub checkpoint: String,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemeView {
    pub text: String,
    pub score: f64,
    pub rationale: String,
}

/// Body returned by the pipeline and what-if endpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPayload {
    pub session_id: String,
    pub actor: Actor,
    pub probability: f64,
    pub label: Label,
    pub threshold: f64,
    pub themes: PerTheme<ThemeView>,
    pub scores: PerTheme<f64>,
    pub alpha: PerTheme<f64>,
    /// Pre-softmax weights.
    pub w: PerTheme<f64>,
    pub contribution_norms: PerTheme<f64>,
    /// ŷ minus the previous prediction's ŷ, if there was one.
    pub delta: Option<f64>,
    pub checkpoint: String,
    pub log_seq: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Only on pipeline responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub figures: Option<FigureBundle>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionFile {
    session_id: String,
    created_at: DateTime<Utc>,
    transcript: serde_json::Value,
}

/// Immutable view of one session; writers publish a new one.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub transcript: Transcript,
    pub record: Option<ThemeRecord>,
    pub features: Option<Arc<SessionFeatures>>,
    pub features_digest: Option<String>,
    /// Pooled theme vectors under `pipeline_checkpoint`.
    pub pooled: Option<Arc<PooledThemes>>,
    pub figures: Option<Arc<FigureBundle>>,
    pub last: Option<PredictionPayload>,
    pub pipeline_checkpoint: Option<String>,
    pub log: Arc<Vec<FeedbackLogEntry>>,
}

impl Snapshot {
    pub fn next_timestamp(&self) -> DateTime<Utc> {
        let now = Utc::now();
        match self.log.last() {
            Some(e) if now <= e.timestamp => e.timestamp + Duration::microseconds(1),
            _ => now,
        }
    }
}

/// Hex SHA-256 of the features' serialized form.
pub fn features_digest(f: &SessionFeatures) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(f).expect("features serialize")))
}

/// Hex SHA-256 over the bit patterns of the pooled vectors.
pub fn pooled_digest(p: &PooledThemes) -> String {
    let mut h = Sha256::new();
    for t in ThemeId::ALL {
        match p.pooled.get(t) {
            Some(m) => {
                h.update([1u8]);
                for v in m.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
            None => h.update([0u8]),
        }
    }
    hex::encode(h.finalize())
}

pub struct Slot {
    /// Serializes writers; readers only touch `snap`.
    pub write: tokio::sync::Mutex<()>,
    snap: RwLock<Arc<Snapshot>>,
}

impl Slot {
    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snap.read().expect("snapshot lock").clone()
    }

    /// Callers must hold `write`.
    pub fn publish(&self, s: Snapshot) {
        *self.snap.write().expect("snapshot lock") = Arc::new(s);
    }
}

pub struct Store {
    root: PathBuf,
    sessions: RwLock<BTreeMap<String, Arc<Slot>>>,
}

/// Session ids become directory names.
pub fn check_session_id(id: &str) -> Result<(), String> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err("session_id: use 1-128 characters from [A-Za-z0-9._-], not starting with '.'".into())
    }
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    let bytes = serde_json::to_vec_pretty(value).map_err(|e| StoreError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json_opt<T: DeserializeOwned>(path: &Path) -> Result<Option<T>, StoreError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Corrupt {
            path: path.display().to_string(),
            detail: e.to_string(),
        }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(io_err(path)(e)),
    }
}

impl Store {
    /// Opens the data directory and loads every stored session.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        let dir = root.join("sessions");
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let mut sessions = BTreeMap::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if !entry.file_type().map_err(io_err(&dir))?.is_dir() {
                continue;
            }
            let snap = load_session(&entry.path())?;
            sessions.insert(
                snap.session_id.clone(),
                Arc::new(Slot {
                    write: tokio::sync::Mutex::new(()),
                    snap: RwLock::new(Arc::new(snap)),
                }),
            );
        }
        tracing::info!(sessions = sessions.len(), root = %root.display(), "session store opened");
        Ok(Store {
            root,
            sessions: RwLock::new(sessions),
        })
    }

    pub fn dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    pub fn get(&self, id: &str) -> Option<Arc<Slot>> {
        self.sessions.read().expect("table lock").get(id).cloned()
    }

    pub fn list(&self) -> Vec<Arc<Snapshot>> {
        self.sessions
            .read()
            .expect("table lock")
            .values()
            .map(|s| s.snapshot())
            .collect()
    }

    /// Persists a new session. `Ok(None)` means the id is taken.
    pub fn create(&self, transcript: Transcript) -> Result<Option<Arc<Snapshot>>, StoreError> {
        let mut table = self.sessions.write().expect("table lock");
        if table.contains_key(&transcript.session_id) {
            return Ok(None);
        }
        let dir = self.dir(&transcript.session_id);
        if dir.exists() {
            return Ok(None);
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let created_at = Utc::now();
        write_json_atomic(
            &dir.join("session.json"),
            &SessionFile {
                session_id: transcript.session_id.clone(),
                created_at,
                transcript: transcript.to_json_value(),
            },
        )?;
        let snap = Arc::new(Snapshot {
            session_id: transcript.session_id.clone(),
            created_at,
            transcript,
            record: None,
            features: None,
            features_digest: None,
            pooled: None,
            figures: None,
            last: None,
            pipeline_checkpoint: None,
            log: Arc::new(Vec::new()),
        });
        table.insert(
            snap.session_id.clone(),
            Arc::new(Slot {
                write: tokio::sync::Mutex::new(()),
                snap: RwLock::new(snap.clone()),
            }),
        );
        Ok(Some(snap))
    }

    pub fn save_pipeline(&self, s: &Snapshot) -> Result<(), StoreError> {
        let dir = self.dir(&s.session_id);
        if let Some(r) = &s.record {
            write_json_atomic(&dir.join("themes.json"), r)?;
        }
        if let Some(f) = &s.features {
            write_json_atomic(&dir.join("features.json"), f.as_ref())?;
        }
        if let Some(f) = &s.figures {
            write_json_atomic(&dir.join("figures.json"), f.as_ref())?;
        }
        self.save_prediction(s)
    }

    pub fn save_prediction(&self, s: &Snapshot) -> Result<(), StoreError> {
        match &s.last {
            Some(p) => write_json_atomic(&self.dir(&s.session_id).join("prediction.json"), p),
            None => Ok(()),
        }
    }

    /// Appends one line to the session's feedback log and syncs it.
    pub fn append_log(&self, e: &FeedbackLogEntry) -> Result<(), StoreError> {
        let path = self.dir(&e.session_id).join("feedback_log.jsonl");
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut line = serde_json::to_vec(e).expect("log entry serializes");
        line.push(b'\n');
        f.write_all(&line).map_err(io_err(&path))?;
        f.sync_data().map_err(io_err(&path))
    }
}

fn load_session(dir: &Path) -> Result<Snapshot, StoreError> {
    let corrupt = |path: &Path, detail: String| StoreError::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    let meta_path = dir.join("session.json");
    let meta: SessionFile = read_json_opt(&meta_path)?
        .ok_or_else(|| corrupt(&meta_path, "missing".into()))?;
    let transcript =
        Transcript::from_json_value(&meta.transcript).map_err(|e| corrupt(&meta_path, e.to_string()))?;
    let features: Option<SessionFeatures> = read_json_opt(&dir.join("features.json"))?;
    let last: Option<PredictionPayload> = read_json_opt(&dir.join("prediction.json"))?;
    let log_path = dir.join("feedback_log.jsonl");
    let log = match fs::read_to_string(&log_path) {
        Ok(raw) => raw
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| corrupt(&log_path, format!("line {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<FeedbackLogEntry>, _>>()?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(io_err(&log_path)(e)),
    };
    Ok(Snapshot {
        session_id: meta.session_id,
        created_at: meta.created_at,
        transcript,
        record: read_json_opt(&dir.join("themes.json"))?,
        features_digest: features.as_ref().map(features_digest),
        features: features.map(Arc::new),
        pooled: None,
        figures: read_json_opt::<FigureBundle>(&dir.join("figures.json"))?.map(Arc::new),
        pipeline_checkpoint: last.as_ref().map(|p| p.checkpoint.clone()),
        last,
        log: Arc::new(log),
    })
}
