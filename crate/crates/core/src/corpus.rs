//! Transcript data model, JSONL loading and synthetic corpus generation.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::lexicon::{split_sentences, DialogueTemplates};
use crate::theme::ThemeId;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}field `{field}`: {reason}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Schema {
        line: Option<usize>,
        field: String,
        reason: String,
    },
    #[error("{path}: file contains no sessions")]
    Empty { path: PathBuf },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("corpus has {0} sessions; at least 3 are needed to split")]
    TooSmall(usize),
}

impl CorpusError {
    fn schema(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CorpusError::Schema {
            line: None,
            field: field.into(),
            reason: reason.into(),
        }
    }

    fn at_line(self, line: usize) -> Self {
        match self {
            CorpusError::Schema { field, reason, .. } => CorpusError::Schema {
                line: Some(line),
                field,
                reason,
            },
            other => other,
        }
    }

    /// Name of the offending field for schema violations.
    pub fn field(&self) -> Option<&str> {
        match self {
            CorpusError::Schema { field, .. } => Some(field),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Interviewer,
    Participant,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Interviewer => "INTERVIEWER",
            Speaker::Participant => "PARTICIPANT",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub text: String,
    pub turn_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    NonDepressed,
    Depressed,
}

impl Label {
    pub fn as_u8(self) -> u8 {
        match self {
            Label::NonDepressed => 0,
            Label::Depressed => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Label> {
        match v {
            0 => Some(Label::NonDepressed),
            1 => Some(Label::Depressed),
            _ => None,
        }
    }

    pub fn as_f64(self) -> f64 {
        self.as_u8() as f64
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(self.as_u8())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Label::from_u8(v).ok_or_else(|| serde::de::Error::custom("label must be 0 or 1"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transcript {
    pub session_id: String,
    pub turns: Vec<DialogueTurn>,
    pub label: Option<Label>,
    pub split: Split,
}

impl Transcript {
    /// Builds a transcript from (speaker, text) pairs with implicit turn indices.
    pub fn new(
        session_id: impl Into<String>,
        turns: impl IntoIterator<Item = (Speaker, String)>,
        label: Option<Label>,
    ) -> Result<Transcript, CorpusError> {
        let t = Transcript {
            session_id: session_id.into(),
            turns: turns
                .into_iter()
                .enumerate()
                .map(|(turn_index, (speaker, text))| DialogueTurn {
                    speaker,
                    text,
                    turn_index,
                })
                .collect(),
            label,
            split: Split::Unassigned,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.session_id.trim().is_empty() {
            return Err(CorpusError::schema("session_id", "must be non-empty"));
        }
        if self.turns.len() < 2 {
            return Err(CorpusError::schema(
                "turns",
                format!("need at least 2 turns, found {}", self.turns.len()),
            ));
        }
        if self.turns[0].speaker != Speaker::Interviewer {
            return Err(CorpusError::schema("turns[0].speaker", "first speaker must be the interviewer"));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.text.trim().is_empty() {
                return Err(CorpusError::schema(format!("turns[{i}].text"), "must be non-empty"));
            }
            if i > 0 && turn.turn_index <= self.turns[i - 1].turn_index {
                return Err(CorpusError::schema(
                    "turn_index",
                    format!(
                        "turn {i} has turn_index {} after {}; indices must strictly increase",
                        turn.turn_index,
                        self.turns[i - 1].turn_index
                    ),
                ));
            }
        }
        if self.split != Split::Unassigned && self.label.is_none() {
            return Err(CorpusError::schema(
                "label",
                format!("sessions in the {} split must be labeled", self.split),
            ));
        }
        Ok(())
    }

    /// Parses one session object, naming the offending field on failure.
    pub fn from_json_value(value: &Value) -> Result<Transcript, CorpusError> {
        let obj = value
            .as_object()
            .ok_or_else(|| CorpusError::schema("<root>", "expected a JSON object"))?;
        let session_id = match obj.get("session_id") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            Some(_) => return Err(CorpusError::schema("session_id", "must be a string")),
            None => return Err(CorpusError::schema("session_id", "missing")),
        };
        let label = match obj.get("label") {
            None | Some(Value::Null) => None,
            Some(v) => Some(
                v.as_u64()
                    .and_then(|n| u8::try_from(n).ok())
                    .and_then(Label::from_u8)
                    .ok_or_else(|| CorpusError::schema("label", "must be 0, 1 or null"))?,
            ),
        };
        let split = match obj.get("split") {
            None | Some(Value::Null) => Split::Unassigned,
            Some(v) => serde_json::from_value(v.clone()).map_err(|_| {
                CorpusError::schema("split", "must be one of train, dev, test, unassigned")
            })?,
        };
        let turns_raw = match obj.get("turns") {
            Some(Value::Array(a)) => a,
            Some(_) => return Err(CorpusError::schema("turns", "must be an array")),
            None => return Err(CorpusError::schema("turns", "missing")),
        };
        let mut turns = Vec::with_capacity(turns_raw.len());
        for (i, raw) in turns_raw.iter().enumerate() {
            let t = raw
                .as_object()
                .ok_or_else(|| CorpusError::schema(format!("turns[{i}]"), "expected an object"))?;
            let speaker = match t.get("speaker") {
                Some(v) => serde_json::from_value::<Speaker>(v.clone()).map_err(|_| {
                    CorpusError::schema(
                        format!("turns[{i}].speaker"),
                        "must be \"interviewer\" or \"participant\"",
                    )
                })?,
                None => return Err(CorpusError::schema(format!("turns[{i}].speaker"), "missing")),
            };
            let text = match t.get("text") {
                Some(Value::String(s)) => s.clone(),
                Some(_) => {
                    return Err(CorpusError::schema(format!("turns[{i}].text"), "must be a string"))
                }
                None => return Err(CorpusError::schema(format!("turns[{i}].text"), "missing")),
            };
            let turn_index = match t.get("turn_index") {
                None | Some(Value::Null) => i,
                Some(v) => v
                    .as_u64()
                    .map(|n| n as usize)
                    .ok_or_else(|| CorpusError::schema("turn_index", "must be a non-negative integer"))?,
            };
            turns.push(DialogueTurn {
                speaker,
                text,
                turn_index,
            });
        }
        let transcript = Transcript {
            session_id,
            turns,
            label,
            split,
        };
        transcript.validate()?;
        Ok(transcript)
    }

    /// JSON object in the session schema. Turn indices stay implicit unless
    /// they differ from array positions; `split` is written only when assigned.
    pub fn to_json_value(&self) -> Value {
        let implicit = self.turns.iter().enumerate().all(|(i, t)| t.turn_index == i);
        let turns: Vec<Value> = self
            .turns
            .iter()
            .map(|t| {
                let mut v = json!({ "speaker": t.speaker, "text": t.text });
                if !implicit {
                    v["turn_index"] = json!(t.turn_index);
                }
                v
            })
            .collect();
        let mut v = json!({
            "session_id": self.session_id,
            "label": self.label,
            "turns": turns,
        });
        if self.split != Split::Unassigned {
            v["split"] = json!(self.split);
        }
        v
    }

    pub fn participant_text(&self) -> impl Iterator<Item = &str> {
        self.turns
            .iter()
            .filter(|t| t.speaker == Speaker::Participant)
            .map(|t| t.text.as_str())
    }
}

impl Serialize for Transcript {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_json_value().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Transcript {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Value::deserialize(d)?;
        Transcript::from_json_value(&v).map_err(serde::de::Error::custom)
    }
}

/// Loads a JSONL file with one session object per line. Blank lines are skipped.
pub fn load_transcripts(path: impl AsRef<Path>) -> Result<Vec<Transcript>, CorpusError> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let out = parse_transcripts(&content)?;
    if out.is_empty() {
        return Err(CorpusError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(out)
}

pub fn parse_transcripts(content: &str) -> Result<Vec<Transcript>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(line).map_err(|source| CorpusError::Json { line: line_no, source })?;
        out.push(Transcript::from_json_value(&value).map_err(|e| e.at_line(line_no))?);
    }
    Ok(out)
}

pub fn write_transcripts(path: impl AsRef<Path>, corpus: &[Transcript]) -> std::io::Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for t in corpus {
        serde_json::to_writer(&mut buf, &t.to_json_value())?;
        buf.push(b'\n');
    }
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_sessions: usize,
    pub depression_ratio: f64,
    pub turns_per_session: TurnRange,
    pub distractor_ratio: f64,
    pub marker_density: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_sessions: 200,
            depression_ratio: 0.3,
            turns_per_session: TurnRange { min: 8, max: 14 },
            distractor_ratio: 0.3,
            marker_density: 0.8,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::InvalidSpec(m));
        if self.num_sessions == 0 {
            return bad("num_sessions must be positive".into());
        }
        if !(self.depression_ratio > 0.0 && self.depression_ratio < 1.0) {
            return bad(format!("depression_ratio {} not in (0,1)", self.depression_ratio));
        }
        if !(self.distractor_ratio >= 0.0 && self.distractor_ratio < 1.0) {
            return bad(format!("distractor_ratio {} not in [0,1)", self.distractor_ratio));
        }
        if !(self.marker_density > 0.0 && self.marker_density <= 1.0) {
            return bad(format!("marker_density {} not in (0,1]", self.marker_density));
        }
        let r = self.turns_per_session;
        if r.min < 2 || r.max < r.min {
            return bad(format!(
                "turns_per_session {}..={} must satisfy 2 <= min <= max",
                r.min, r.max
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form; recorded in corpus manifests.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn depressed_count(&self) -> usize {
        (self.num_sessions as f64 * self.depression_ratio).round() as usize
    }
}

/// Where a generated participant sentence came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SentenceOrigin {
    pub turn_index: usize,
    pub sentence: String,
    /// `None` for small talk.
    pub theme: Option<ThemeId>,
    pub marker: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSession {
    pub transcript: Transcript,
    pub origins: Vec<SentenceOrigin>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Transcript>, CorpusError> {
    Ok(generate_synthetic_annotated(spec)?
        .into_iter()
        .map(|s| s.transcript)
        .collect())
}

/// Generates the corpus together with per-sentence provenance.
pub fn generate_synthetic_annotated(
    spec: &SyntheticSpec,
) -> Result<Vec<SyntheticSession>, CorpusError> {
    spec.validate()?;
    let templates = DialogueTemplates::builtin();

    let mut label_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..spec.num_sessions).collect();
    order.shuffle(&mut label_rng);
    let mut labels = vec![Label::NonDepressed; spec.num_sessions];
    for &i in order.iter().take(spec.depressed_count()) {
        labels[i] = Label::Depressed;
    }

    labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64 + 1);
            generate_session(&format!("syn-{i:04}"), label, spec, templates, &mut rng)
        })
        .collect()
}

fn generate_session(
    session_id: &str,
    label: Label,
    spec: &SyntheticSpec,
    templates: &DialogueTemplates,
    rng: &mut ChaCha8Rng,
) -> Result<SyntheticSession, CorpusError> {
    let pick = |pool: &[String], rng: &mut ChaCha8Rng| -> String {
        pool.choose(rng).expect("template pools are non-empty").clone()
    };

    let n_turns = rng.random_range(spec.turns_per_session.min..=spec.turns_per_session.max);
    let n_exchanges = n_turns / 2;
    let n_distractors =
        ((n_exchanges as f64 * spec.distractor_ratio).round() as usize).min(n_exchanges - 1);
    let mut is_distractor = vec![false; n_exchanges];
    is_distractor[..n_distractors].iter_mut().for_each(|d| *d = true);
    is_distractor.shuffle(rng);

    let mut turns = Vec::with_capacity(n_turns);
    let mut origins = Vec::new();
    for (k, &distractor) in is_distractor.iter().enumerate() {
        let (question, sentences) = if distractor {
            let q = pick(&templates.small_talk.questions, rng);
            let n = rng.random_range(1..=2);
            let s: Vec<(String, Option<ThemeId>, bool)> = (0..n)
                .map(|_| (pick(&templates.small_talk.statements, rng), None, false))
                .collect();
            (q, s)
        } else {
            let theme = *ThemeId::TOPICAL.choose(rng).expect("non-empty");
            let pool = templates.theme(theme);
            let q = pick(&pool.questions, rng);
            let mut s = vec![(pick(&pool.statements, rng), Some(theme), false)];
            if label == Label::Depressed && rng.random::<f64>() < spec.marker_density {
                let marker = (pick(&pool.marker_statements, rng), Some(theme), true);
                if rng.random_bool(0.5) {
                    s.insert(0, marker);
                } else {
                    s.push(marker);
                }
            }
            (q, s)
        };
        let question = if k == 0 {
            format!("{} {}", templates.opening, question)
        } else {
            question
        };
        turns.push((Speaker::Interviewer, question));
        let participant_index = turns.len();
        for (sentence, theme, marker) in &sentences {
            origins.push(SentenceOrigin {
                turn_index: participant_index,
                sentence: sentence.clone(),
                theme: *theme,
                marker: *marker,
            });
        }
        let answer = sentences
            .into_iter()
            .map(|(s, _, _)| s)
            .collect::<Vec<_>>()
            .join(" ");
        turns.push((Speaker::Participant, answer));
    }
    if n_turns % 2 == 1 {
        turns.push((Speaker::Interviewer, templates.closing.clone()));
    }

    let transcript = Transcript::new(session_id, turns, Some(label))?;
    debug_assert!(origins.iter().all(|o| {
        split_sentences(&transcript.turns[o.turn_index].text).contains(&o.sentence.as_str())
    }));
    Ok(SyntheticSession { transcript, origins })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            dev: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let f = [self.train, self.dev, self.test];
        if f.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(CorpusError::InvalidFractions(format!(
                "fractions must be positive, got {f:?}"
            )));
        }
        let sum: f64 = f.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidFractions(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PartitionedCorpus {
    pub train: Vec<Transcript>,
    pub dev: Vec<Transcript>,
    pub test: Vec<Transcript>,
}

impl PartitionedCorpus {
    pub fn get(&self, split: Split) -> &[Transcript] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
            Split::Unassigned => &[],
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stratified split assignment, one entry per input session, in input order.
pub fn assign_splits(
    corpus: &[Transcript],
    fractions: SplitFractions,
    seed: u64,
) -> Result<Vec<Split>, CorpusError> {
    fractions.validate()?;
    let n = corpus.len();
    if n < 3 {
        return Err(CorpusError::TooSmall(n));
    }
    let fr = [fractions.train, fractions.dev, fractions.test];
    let mut sizes = largest_remainder(&fr.map(|f| f * n as f64), n);
    // every split gets at least one session
    for s in 0..3 {
        if sizes[s] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[s] = 1;
        }
    }

    let strata: [Option<Label>; 3] = [Some(Label::Depressed), Some(Label::NonDepressed), None];
    let mut members: Vec<Vec<usize>> = strata
        .iter()
        .map(|l| (0..n).filter(|&i| corpus[i].label == *l).collect())
        .collect();

    // Per-split quota for each stratum except the last, which takes the rest.
    let mut remaining = sizes;
    let mut quotas = [[0usize; 3]; 3];
    for (k, m) in members.iter().enumerate() {
        if k == strata.len() - 1 {
            quotas[k] = remaining;
            break;
        }
        let share = m.len() as f64 / n as f64;
        let targets = sizes.map(|s| s as f64 * share);
        let q = largest_remainder(&targets, m.len());
        for s in 0..3 {
            let take = q[s].min(remaining[s]);
            quotas[k][s] = take;
            remaining[s] -= take;
        }
        // overflow from capped splits goes wherever room is left
        let mut leftover = m.len() - quotas[k].iter().sum::<usize>();
        for s in 0..3 {
            let extra = leftover.min(remaining[s]);
            quotas[k][s] += extra;
            remaining[s] -= extra;
            leftover -= extra;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![Split::Unassigned; n];
    for (k, m) in members.iter_mut().enumerate() {
        m.shuffle(&mut rng);
        let mut it = m.iter();
        for (s, split) in [Split::Train, Split::Dev, Split::Test].into_iter().enumerate() {
            for &i in it.by_ref().take(quotas[k][s]) {
                out[i] = split;
            }
        }
    }
    debug_assert!(out.iter().all(|s| *s != Split::Unassigned));
    Ok(out)
}

pub fn split_corpus(
    corpus: &[Transcript],
    fractions: SplitFractions,
    seed: u64,
) -> Result<PartitionedCorpus, CorpusError> {
    let assignment = assign_splits(corpus, fractions, seed)?;
    let mut out = PartitionedCorpus::default();
    for (t, split) in corpus.iter().zip(assignment) {
        if t.label.is_none() {
            return Err(CorpusError::schema(
                "label",
                format!("session {} is unlabeled and cannot join the {split} split", t.session_id),
            ));
        }
        let mut t = t.clone();
        t.split = split;
        match split {
            Split::Train => out.train.push(t),
            Split::Dev => out.dev.push(t),
            Split::Test => out.test.push(t),
            Split::Unassigned => unreachable!(),
        }
    }
    Ok(out)
}

/// Hamilton apportionment of `total` units proportional to `targets`.
fn largest_remainder(targets: &[f64; 3], total: usize) -> [usize; 3] {
    let sum: f64 = targets.iter().sum();
    let scaled = if sum > 0.0 {
        targets.map(|t| t * total as f64 / sum)
    } else {
        [0.0; 3]
    };
    let mut out = scaled.map(|t| t.floor() as usize);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = scaled[a] - scaled[a].floor();
        let rb = scaled[b] - scaled[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(out.iter().sum());
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}
