//! Batch stages of the screening pipeline. Stages talk through files in a
//! run directory:
//!
//! | stage            | reads                         | writes                              |
//! |------------------|-------------------------------|-------------------------------------|
//! | generate-corpus  |                               | corpus.jsonl                        |
//! | extract          | corpus.jsonl                  | themes.jsonl                        |
//! | embed            | themes.jsonl                  | features.jsonl                      |
//! | train            | features.jsonl                | checkpoint.json, train_log.csv      |
//! | evaluate         | features.jsonl, checkpoint    | metrics.csv, metrics.md, predictions.jsonl |
//! | ablate           | features.jsonl                | ablation.csv, ablation.md           |
//! | figures          | features.jsonl, checkpoint    | figures/<session>.json              |
//!
//! Every command also rewrites `config.json` (the resolved config) and
//! records its outputs in `manifest.json`.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use themewise_core::corpus::{assign_splits, generate_synthetic, load_transcripts, write_transcripts};
use themewise_core::eval::{ablation_csv, ablation_markdown, evaluate, export_figures, run_ablations, AblationRow};
use themewise_core::pipeline::{embed_stage, extract_stage, read_jsonl, run_session, write_jsonl, OutagePolicy, ThemeRecord};
use themewise_core::train::{epoch_log_csv, train};
use themewise_core::{
    Checkpoint, Feedback, FeedbackSource, Gateway, InContextTemplate, MetricsReport, Model, PerTheme,
    SessionFeatures, Split, ThemeId, Transcript,
};

pub use config::RunConfig;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing {path}: run `{stage}` first")]
    MissingArtifact { stage: &'static str, path: PathBuf },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::UnknownKey(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::MissingArtifact { .. } => EXIT_MISSING_ARTIFACT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn rt(e: impl std::error::Error + Send + Sync + 'static) -> CliError {
    CliError::Runtime(e.into())
}

pub const CORPUS: &str = "corpus.jsonl";
pub const THEMES: &str = "themes.jsonl";
pub const FEATURES: &str = "features.jsonl";
pub const CHECKPOINT: &str = "checkpoint.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_MD: &str = "metrics.md";
pub const PREDICTIONS: &str = "predictions.jsonl";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_MD: &str = "ablation.md";
pub const FIGURES_DIR: &str = "figures";

/// One line of `features.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub split: Split,
    #[serde(flatten)]
    pub features: SessionFeatures,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub session_id: String,
    pub probability: f64,
    pub predicted: themewise_core::Label,
    pub label: Option<themewise_core::Label>,
}

/// A run directory plus the resolved config.
#[derive(Debug, Clone)]
pub struct Run {
    pub dir: PathBuf,
    pub config: RunConfig,
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(p) = path.parent() {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, config: RunConfig) -> Run {
        Run {
            dir: dir.into(),
            config,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn require(&self, name: &str, stage: &'static str) -> Result<PathBuf, CliError> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(CliError::MissingArtifact { stage, path: p })
        }
    }

    pub fn gateway(&self) -> Result<Gateway, CliError> {
        Gateway::new(self.config.gateway.clone()).map_err(|e| CliError::Config(format!("gateway: {e}")))
    }

    pub fn template(&self) -> Result<InContextTemplate, CliError> {
        match &self.config.ticl.template {
            Some(p) => InContextTemplate::load(p).map_err(|e| CliError::Config(format!("ticl.template: {e}"))),
            None => Ok(InContextTemplate::builtin().clone()),
        }
    }

    fn load_features(&self) -> Result<Vec<FeatureRecord>, CliError> {
        let p = self.require(FEATURES, "embed")?;
        read_jsonl(&p).map_err(rt)
    }

    fn load_model(&self) -> Result<Model, CliError> {
        let p = self.require(CHECKPOINT, "train")?;
        let ck = Checkpoint::load(&p).with_context(|| format!("loading {}", p.display()))?;
        Model::from_checkpoint(&ck).map_err(rt)
    }

    /// Writes the config echo and records `outputs` under `command` in the manifest.
    fn record(&self, command: &str, outputs: &[PathBuf]) -> Result<(), CliError> {
        let cfg = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        write_atomic(&self.path("config.json"), &cfg)?;
        let mpath = self.path("manifest.json");
        let mut manifest: Value = match fs::read(&mpath) {
            Ok(b) => serde_json::from_slice(&b).unwrap_or_else(|_| json!({})),
            Err(_) => json!({}),
        };
        let mut files = BTreeMap::new();
        for o in outputs {
            let rel = o.strip_prefix(&self.dir).unwrap_or(o).display().to_string();
            files.insert(rel, sha256_file(o).with_context(|| format!("hashing {}", o.display()))?);
        }
        manifest["tool"] = json!({ "name": env!("CARGO_PKG_NAME"), "version": env!("CARGO_PKG_VERSION") });
        manifest["stages"][command] = json!({
            "finished_at": chrono::Utc::now(),
            "config_digest": self.config.digest(),
            "spec_digest": self.config.corpus.synthetic.digest(),
            "seeds": {
                "corpus": self.config.corpus.synthetic.seed,
                "split": self.config.corpus.split_seed,
                "train": self.config.train.seed,
                "mock": self.config.gateway.mock_seed,
            },
            "backend": self.config.gateway.cache_namespace(),
            "outputs": files,
        });
        write_atomic(&mpath, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
    }
}

/// Synthesizes (or loads) the corpus and assigns splits.
pub fn generate_corpus(run: &Run) -> Result<Vec<Transcript>, CliError> {
    let c = &run.config.corpus;
    let mut corpus = match &c.input {
        Some(p) if !p.exists() => {
            return Err(CliError::MissingArtifact {
                stage: "corpus.input",
                path: p.clone(),
            })
        }
        Some(p) => load_transcripts(p).map_err(rt)?,
        None => generate_synthetic(&c.synthetic).map_err(rt)?,
    };
    if corpus.iter().any(|t| t.split == Split::Unassigned) {
        let splits = assign_splits(&corpus, c.splits, c.split_seed).map_err(rt)?;
        for (t, s) in corpus.iter_mut().zip(splits) {
            t.split = s;
        }
    }
    for t in &corpus {
        t.validate().map_err(rt)?;
    }
    let out = run.path(CORPUS);
    fs::create_dir_all(&run.dir).with_context(|| format!("creating {}", run.dir.display()))?;
    write_transcripts(&out, &corpus).with_context(|| format!("writing {}", out.display()))?;
    run.record("generate-corpus", &[out])?;
    Ok(corpus)
}

pub fn extract(run: &Run) -> Result<Vec<ThemeRecord>, CliError> {
    let input = run.require(CORPUS, "generate-corpus")?;
    let corpus = load_transcripts(&input).map_err(rt)?;
    let gw = run.gateway()?;
    let records = extract_stage(&gw, &corpus, &run.template()?, run.config.ticl.retries);
    let degraded = records.iter().filter(|r| !r.warnings.is_empty()).count();
    if degraded > 0 {
        tracing::warn!(degraded, total = records.len(), "some sessions degraded during extraction");
    }
    let out = run.path(THEMES);
    write_jsonl(&out, &records).map_err(rt)?;
    run.record("extract", &[out])?;
    Ok(records)
}

pub fn embed(run: &Run) -> Result<Vec<FeatureRecord>, CliError> {
    let input = run.require(THEMES, "extract")?;
    let records: Vec<ThemeRecord> = read_jsonl(&input).map_err(rt)?;
    let gw = run.gateway()?;
    let feats = embed_stage(&gw, &records).map_err(rt)?;
    let out_records: Vec<FeatureRecord> = records
        .iter()
        .zip(feats)
        .map(|(r, f)| FeatureRecord {
            split: r.split,
            features: f,
        })
        .collect();
    let out = run.path(FEATURES);
    write_jsonl(&out, &out_records).map_err(rt)?;
    run.record("embed", &[out])?;
    Ok(out_records)
}

struct Splits {
    train: Vec<SessionFeatures>,
    dev: Vec<SessionFeatures>,
    test: Vec<SessionFeatures>,
    d: usize,
}

impl Splits {
    fn get(&self, s: Split) -> &[SessionFeatures] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test | Split::Unassigned => &self.test,
        }
    }
}

fn partition(records: Vec<FeatureRecord>) -> Result<Splits, CliError> {
    let d = records
        .first()
        .map(|r| r.features.themes.get(ThemeId::Overall).x.cols())
        .ok_or_else(|| CliError::Runtime(anyhow::anyhow!("{FEATURES} is empty")))?;
    let mut s = Splits {
        train: vec![],
        dev: vec![],
        test: vec![],
        d,
    };
    for r in records {
        if r.features.themes.values().iter().any(|t| t.x.cols() != d) {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "session {} has features of a different dimension than {d}",
                r.features.session_id
            )));
        }
        match r.split {
            Split::Train => s.train.push(r.features),
            Split::Dev => s.dev.push(r.features),
            Split::Test => s.test.push(r.features),
            Split::Unassigned => {}
        }
    }
    for (name, v) in [("train", &s.train), ("dev", &s.dev), ("test", &s.test)] {
        if v.is_empty() {
            return Err(CliError::Runtime(anyhow::anyhow!("the {name} split is empty")));
        }
    }
    Ok(s)
}

pub struct TrainSummary {
    pub best_epoch: usize,
    pub num_params: usize,
    pub dev: MetricsReport,
}

pub fn train_cmd(run: &Run) -> Result<TrainSummary, CliError> {
    let s = partition(run.load_features()?)?;
    let cfg = &run.config.train;
    let out = train(&s.train, &s.dev, cfg, s.d).map_err(rt)?;
    let ck = out.model.to_checkpoint(
        cfg.seed,
        json!({ "train": cfg, "best_epoch": out.best_epoch, "features": sha256_file(&run.path(FEATURES)).ok() }),
    );
    let ck_path = run.path(CHECKPOINT);
    write_atomic(&ck_path, ck.to_json().as_bytes())?;
    let log_path = run.path(TRAIN_LOG);
    write_atomic(&log_path, epoch_log_csv(&out.log).as_bytes())?;
    run.record("train", &[ck_path, log_path])?;
    Ok(TrainSummary {
        best_epoch: out.best_epoch,
        num_params: out.model.num_params(),
        dev: out.log[out.best_epoch].dev.clone(),
    })
}

pub fn evaluate_cmd(run: &Run) -> Result<MetricsReport, CliError> {
    let model = run.load_model()?;
    let s = partition(run.load_features()?)?;
    let split = run.config.eval.split;
    let set = s.get(split);
    let report = evaluate(&model, set).map_err(rt)?;
    let lines = set
        .iter()
        .map(|f| {
            let p = model.predict(f)?;
            Ok(PredictionLine {
                session_id: f.session_id.clone(),
                probability: p.probability,
                predicted: p.label,
                label: f.label,
            })
        })
        .collect::<Result<Vec<_>, themewise_core::model::ModelError>>()
        .map_err(rt)?;
    let csv = format!("split,{}\n{},{}\n", themewise_core::eval::METRICS_CSV_HEADER, split, report.csv_row());
    let csv_path = run.path(METRICS_CSV);
    let md_path = run.path(METRICS_MD);
    let pred_path = run.path(PREDICTIONS);
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&md_path, report.markdown(&format!("{split} split")).as_bytes())?;
    write_jsonl(&pred_path, &lines).map_err(rt)?;
    run.record("evaluate", &[csv_path, md_path, pred_path])?;
    Ok(report)
}

pub fn ablate(run: &Run) -> Result<Vec<AblationRow>, CliError> {
    let s = partition(run.load_features()?)?;
    let rows = run_ablations(&s.train, &s.dev, &s.test, &run.config.train, s.d).map_err(rt)?;
    let csv = run.path(ABLATION_CSV);
    let md = run.path(ABLATION_MD);
    write_atomic(&csv, ablation_csv(&rows).as_bytes())?;
    write_atomic(&md, ablation_markdown(&rows).as_bytes())?;
    run.record("ablate", &[csv, md])?;
    Ok(rows)
}

pub fn figures(run: &Run) -> Result<Vec<PathBuf>, CliError> {
    let model = run.load_model()?;
    let s = partition(run.load_features()?)?;
    let set = s.get(run.config.eval.split);
    let limit = run.config.eval.figures_limit.unwrap_or(set.len());
    let mut outs = Vec::new();
    for f in set.iter().take(limit) {
        let bundle = export_figures(&model, f).map_err(rt)?;
        let p = run.path(FIGURES_DIR).join(format!("{}.json", f.session_id));
        write_atomic(&p, &serde_json::to_vec_pretty(&bundle).expect("figures serialize"))?;
        outs.push(p);
    }
    run.record("figures", &outs)?;
    Ok(outs)
}

/// Parses `family=3,work=7.5,...`; every theme is required.
pub fn parse_scores(s: &str) -> Result<PerTheme<f64>, CliError> {
    let mut out: PerTheme<Option<f64>> = PerTheme::default();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--scores: `{part}` is not THEME=SCORE")))?;
        let t: ThemeId = k.parse().map_err(|e| CliError::Config(format!("--scores: {e}")))?;
        let x: f64 = v
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("--scores: `{v}` is not a number")))?;
        *out.get_mut(t) = Some(x);
    }
    let scores = PerTheme::from_fn(|t| *out.get(t));
    if let Some((t, _)) = scores.iter().find(|(_, v)| v.is_none()) {
        return Err(CliError::Config(format!("--scores: missing `{t}`")));
    }
    let scores = scores.map(|_, v| v.expect("checked"));
    themewise_core::itas::validate_scores(&scores).map_err(|e| CliError::Config(format!("--scores: {e}")))?;
    Ok(scores)
}

/// Scores transcripts (one JSON object, or JSONL) with the trained model.
/// Backend outages degrade to sentinel themes and uniform feedback.
pub fn predict(run: &Run, input: &Path, scores: Option<PerTheme<f64>>) -> Result<Vec<Value>, CliError> {
    let model = run.load_model()?;
    if !input.exists() {
        return Err(CliError::MissingArtifact {
            stage: "predict --input",
            path: input.to_path_buf(),
        });
    }
    let raw = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let transcripts = match serde_json::from_str::<Value>(&raw) {
        Ok(v) if v.is_object() => vec![Transcript::from_json_value(&v).map_err(rt)?],
        _ => themewise_core::corpus::parse_transcripts(&raw).map_err(rt)?,
    };
    let gw = run.gateway()?;
    let tpl = run.template()?;
    let overrides = scores.map(|s| Feedback {
        scores: s,
        source: FeedbackSource::Clinician,
        rationales: PerTheme::default(),
    });
    let mut out = Vec::new();
    let mut paths = Vec::new();
    for t in &transcripts {
        let r = run_session(
            &gw,
            &tpl,
            &model,
            t,
            overrides.as_ref(),
            run.config.ticl.retries,
            OutagePolicy::Degrade,
        )
        .map_err(rt)?;
        let v = serde_json::to_value(&r).expect("result serializes");
        let p = run.path("predictions").join(format!("{}.json", t.session_id));
        write_atomic(&p, &serde_json::to_vec_pretty(&v).expect("serializes"))?;
        paths.push(p);
        out.push(v);
    }
    run.record("predict", &paths)?;
    Ok(out)
}

/// Runs the HTTP service until interrupted. Falls back to the run
/// directory's checkpoint when `service.checkpoint` is unset.
pub fn serve(run: &Run) -> Result<(), CliError> {
    let mut cfg = run.config.service.clone();
    if cfg.checkpoint.is_none() && run.path(CHECKPOINT).exists() {
        cfg.checkpoint = Some(run.path(CHECKPOINT));
    }
    if let Some(p) = &cfg.checkpoint {
        if !p.exists() {
            return Err(CliError::MissingArtifact {
                stage: "train",
                path: p.clone(),
            });
        }
    }
    let state = themewise_service::AppState::from_config(cfg, run.gateway()?, run.template()?)
        .map_err(|e| CliError::Runtime(e.into()))?;
    let runtime = tokio::runtime::Runtime::new().context("starting the async runtime")?;
    runtime
        .block_on(themewise_service::serve(state))
        .map_err(|e| CliError::Runtime(e.into()))
}
