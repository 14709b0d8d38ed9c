//! The full screening model: attention stages, theme fusion and head,
//! with ablation switches and checkpoint conversion.

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::corpus::Label;
use crate::gateway::EmbeddingMatrix;
use crate::head::{self, HeadCache, HeadParams};
use crate::itas::{
    fuse_backward, fuse_pooled, scores_to_weights_masked, uniform_weights, Feedback,
    FeedbackWeights, ItasError, ItasMode,
};
use crate::numeric::{encode_matrix, decode_matrix, mean_pool_rows, Checkpoint, EncodedMatrix, Matrix, NumericError, Param};
use crate::tcl::{
    block_means, stage1, stage1_backward, stage2, stage2_backward, AttentionGrads, AttentionParams,
    Stage, Stage1Output, Stage2Output,
};
use crate::theme::{PerTheme, ThemeId};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Itas(#[from] ItasError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub drop_theme: Option<ThemeId>,
    pub disable_tcl: bool,
    pub disable_itas: bool,
}

impl Ablation {
    pub fn active(&self) -> [bool; 5] {
        ThemeId::ALL.map(|t| Some(t) != self.drop_theme)
    }

    /// Short variant name used in ablation tables.
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if let Some(t) = self.drop_theme {
            parts.push(format!("w/o {t}"));
        }
        if self.disable_tcl {
            parts.push("w/o TCL".to_string());
        }
        if self.disable_itas {
            parts.push("w/o ITAS".to_string());
        }
        if parts.is_empty() {
            "full".to_string()
        } else {
            parts.join(", ")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Hidden widths of the head; defaults to `[d / 2]`.
    pub hidden_sizes: Vec<usize>,
    pub itas_mode: ItasMode,
    pub ablation: Ablation,
    pub threshold: f64,
}

impl ModelConfig {
    pub fn new(d: usize) -> ModelConfig {
        ModelConfig {
            d,
            hidden_sizes: vec![(d / 2).max(1)],
            itas_mode: ItasMode::Normalized,
            ablation: Ablation::default(),
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d == 0 {
            return Err(ModelError::Config("d must be positive".into()));
        }
        if self.hidden_sizes.contains(&0) {
            return Err(ModelError::Config("hidden sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(ModelError::Config(format!("threshold {} not in [0,1]", self.threshold)));
        }
        Ok(())
    }

    pub fn head_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.d];
        s.extend(&self.hidden_sizes);
        s.push(1);
        s
    }
}

/// Token features of one theme text.
#[derive(Debug, Clone, PartialEq)]
pub struct ThemeEmbedding {
    pub tokens: Vec<String>,
    pub x: Matrix,
}

impl From<EmbeddingMatrix> for ThemeEmbedding {
    fn from(e: EmbeddingMatrix) -> Self {
        ThemeEmbedding {
            tokens: e.tokens,
            x: e.matrix,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ThemeEmbeddingWire {
    tokens: Vec<String>,
    x: EncodedMatrix,
}

impl Serialize for ThemeEmbedding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ThemeEmbeddingWire {
            tokens: self.tokens.clone(),
            x: encode_matrix(&self.x),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ThemeEmbedding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let w = ThemeEmbeddingWire::deserialize(d)?;
        let x = decode_matrix(&w.x).map_err(serde::de::Error::custom)?;
        if x.rows() != w.tokens.len() {
            return Err(serde::de::Error::custom(format!(
                "{} tokens but {} feature rows",
                w.tokens.len(),
                x.rows()
            )));
        }
        Ok(ThemeEmbedding { tokens: w.tokens, x })
    }
}

/// Everything the model consumes for one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFeatures {
    pub session_id: String,
    pub label: Option<Label>,
    pub themes: PerTheme<ThemeEmbedding>,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probability: f64,
    pub label: Label,
    pub threshold: f64,
    pub weights: FeedbackWeights,
    /// ‖α_i · pool(X_i)‖ per theme.
    pub contribution_norms: PerTheme<f64>,
}

/// Pooled per-theme representations after the attention stages. Enough to
/// re-run fusion and the head under new weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledThemes {
    pub pooled: PerTheme<Option<Matrix>>,
}

/// Forward intermediates for backward and export.
#[derive(Debug, Clone)]
pub struct Trace {
    pub active: Vec<ThemeId>,
    pub stage1: Option<Stage1Output>,
    pub stage2: Option<Stage2Output>,
    /// Per active theme, the matrices that get pooled.
    pub parts: Vec<Matrix>,
    pub pooled: PooledThemes,
    pub weights: FeedbackWeights,
    pub head: HeadCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub stage1: Option<AttentionGrads>,
    pub stage2: Option<AttentionGrads>,
    pub head: Vec<(Matrix, Matrix)>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, o: &ModelGrads) -> Result<(), NumericError> {
        if let (Some(a), Some(b)) = (&mut self.stage1, &o.stage1) {
            a.add_assign(b)?;
        }
        if let (Some(a), Some(b)) = (&mut self.stage2, &o.stage2) {
            a.add_assign(b)?;
        }
        for ((aw, ab), (bw, bb)) in self.head.iter_mut().zip(&o.head) {
            aw.add_assign(bw)?;
            ab.add_assign(bb)?;
        }
        Ok(())
    }

    /// Flattened in the same order as [`Model::params`].
    pub fn matrices(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for g in [&self.stage1, &self.stage2].into_iter().flatten() {
            out.extend([&g.wq, &g.wk, &g.wv]);
        }
        for (w, b) in &self.head {
            out.push(w);
            out.push(b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stage1: Option<AttentionParams>,
    pub stage2: Option<AttentionParams>,
    pub head: HeadParams,
}

impl Model {
    /// Draws attention weights (stage 1, then stage 2) and then head weights
    /// from `rng`. With TCL disabled no attention weights are drawn.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Model, ModelError> {
        config.validate()?;
        let (stage1, stage2) = if config.ablation.disable_tcl {
            (None, None)
        } else {
            (
                Some(AttentionParams::init(config.d, Stage::Stage1, rng)),
                Some(AttentionParams::init(config.d, Stage::Stage2, rng)),
            )
        };
        let head = HeadParams::init(&config.head_sizes(), rng);
        Ok(Model {
            config,
            stage1,
            stage2,
            head,
        })
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out: Vec<&Param> = Vec::new();
        for p in [&self.stage1, &self.stage2].into_iter().flatten() {
            out.extend(p.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for p in [&mut self.stage1, &mut self.stage2].into_iter().flatten() {
            out.extend(p.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn active(&self) -> [bool; 5] {
        self.config.ablation.active()
    }

    /// Fusion weights for the given raw scores, honoring ablations.
    pub fn weights(&self, scores: &PerTheme<f64>) -> Result<FeedbackWeights, ModelError> {
        let active = self.active();
        Ok(if self.config.ablation.disable_itas {
            uniform_weights(&active)?
        } else {
            scores_to_weights_masked(scores, self.config.itas_mode, &active)?
        })
    }

    fn check_features(&self, f: &SessionFeatures) -> Result<(), ModelError> {
        for (t, e) in f.themes.iter() {
            if e.x.cols() != self.config.d {
                return Err(ModelError::Config(format!(
                    "session {}: theme {t} has dimension {}, model expects {}",
                    f.session_id,
                    e.x.cols(),
                    self.config.d
                )));
            }
        }
        Ok(())
    }

    /// Attention stages and pooling; independent of feedback weights.
    pub fn encode(
        &self,
        f: &SessionFeatures,
    ) -> Result<(Vec<ThemeId>, Option<Stage1Output>, Option<Stage2Output>, Vec<Matrix>), ModelError> {
        self.check_features(f)?;
        let active: Vec<ThemeId> = ThemeId::ALL
            .into_iter()
            .filter(|t| self.active()[t.index()])
            .collect();
        let inputs: Vec<Matrix> = active.iter().map(|t| f.themes.get(*t).x.clone()).collect();
        match (&self.stage1, &self.stage2) {
            (Some(p1), Some(p2)) => {
                let s1 = stage1(&inputs, p1)?;
                let s2 = stage2(&s1.outputs(), p2)?;
                let parts = s2.resplit()?;
                Ok((active, Some(s1), Some(s2), parts))
            }
            _ => Ok((active, None, None, inputs)),
        }
    }

    pub fn pooled(&self, f: &SessionFeatures) -> Result<PooledThemes, ModelError> {
        let (active, _, _, parts) = self.encode(f)?;
        Ok(pool(&active, &parts))
    }

    pub fn trace(&self, f: &SessionFeatures, weights: &FeedbackWeights) -> Result<Trace, ModelError> {
        let (active, s1, s2, parts) = self.encode(f)?;
        let pooled = pool(&active, &parts);
        let head = self.fuse_and_classify(&pooled, weights)?.0;
        Ok(Trace {
            active,
            stage1: s1,
            stage2: s2,
            parts,
            pooled,
            weights: weights.clone(),
            head,
        })
    }

    fn fuse_and_classify(
        &self,
        pooled: &PooledThemes,
        weights: &FeedbackWeights,
    ) -> Result<(HeadCache, PerTheme<f64>), ModelError> {
        let (vecs, alphas): (Vec<Matrix>, Vec<f64>) = ThemeId::ALL
            .iter()
            .filter_map(|t| {
                pooled
                    .pooled
                    .get(*t)
                    .as_ref()
                    .map(|p| (p.clone(), *weights.alpha.get(*t)))
            })
            .unzip();
        let fused = fuse_pooled(&vecs, &alphas)?;
        let mut norms = PerTheme::from_fn(|_| 0.0);
        let mut it = fused.contributions.iter();
        for t in ThemeId::ALL {
            if pooled.pooled.get(t).is_some() {
                *norms.get_mut(t) = it.next().expect("one per active theme").frobenius_norm();
            }
        }
        Ok((head::forward(&self.head, &fused.x_final)?, norms))
    }

    /// Fusion and head over cached pooled vectors.
    pub fn predict_pooled(
        &self,
        pooled: &PooledThemes,
        weights: &FeedbackWeights,
    ) -> Result<Prediction, ModelError> {
        let (cache, norms) = self.fuse_and_classify(pooled, weights)?;
        Ok(self.prediction(cache.prob, weights.clone(), norms))
    }

    fn prediction(&self, probability: f64, weights: FeedbackWeights, norms: PerTheme<f64>) -> Prediction {
        let label = if probability >= self.config.threshold {
            Label::Depressed
        } else {
            Label::NonDepressed
        };
        Prediction {
            probability,
            label,
            threshold: self.config.threshold,
            weights,
            contribution_norms: norms,
        }
    }

    /// Full forward with explicit weights.
    pub fn predict_with(&self, f: &SessionFeatures, weights: &FeedbackWeights) -> Result<Prediction, ModelError> {
        self.predict_pooled(&self.pooled(f)?, weights)
    }

    /// Full forward with weights derived from the session's own feedback.
    pub fn predict(&self, f: &SessionFeatures) -> Result<Prediction, ModelError> {
        let w = self.weights(&f.feedback.scores)?;
        self.predict_with(f, &w)
    }

    /// Loss and parameter gradients for one labeled session.
    pub fn loss_and_grads(&self, f: &SessionFeatures, y: f64) -> Result<(f64, f64, ModelGrads), ModelError> {
        let weights = self.weights(&f.feedback.scores)?;
        let trace = self.trace(f, &weights)?;
        let loss = head::bce_with_logit(trace.head.logit, y);
        let grads = self.backward(&trace, head::bce_grad_logit(trace.head.prob, y))?;
        Ok((loss, trace.head.prob, grads))
    }

    pub fn backward(&self, trace: &Trace, d_logit: f64) -> Result<ModelGrads, ModelError> {
        let (head_grads, d_final) = head::backward(&self.head, &trace.head, d_logit)?;
        let alphas: Vec<f64> = trace.active.iter().map(|t| *trace.weights.alpha.get(*t)).collect();
        let rows: Vec<usize> = trace.parts.iter().map(|p| p.rows()).collect();
        let d_parts = fuse_backward(&d_final, &alphas, &rows)?;
        let (g1, g2) = match (&self.stage1, &self.stage2, &trace.stage1, &trace.stage2) {
            (Some(p1), Some(p2), Some(s1), Some(s2)) => {
                let (d_s1, g2) = stage2_backward(s2, p2, &d_parts)?;
                let (_, g1) = stage1_backward(s1, p1, &d_s1)?;
                (Some(g1), Some(g2))
            }
            _ => (None, None),
        };
        Ok(ModelGrads {
            stage1: g1,
            stage2: g2,
            head: head_grads,
        })
    }

    /// Adds `g` into the parameters' gradient buffers.
    pub fn accumulate(&mut self, g: &ModelGrads) -> Result<(), NumericError> {
        let mats = g.matrices();
        let mut params = self.params_mut();
        if mats.len() != params.len() {
            return Err(NumericError::Checkpoint(format!(
                "{} gradients for {} params",
                mats.len(),
                params.len()
            )));
        }
        for (p, m) in params.iter_mut().zip(mats) {
            p.accumulate(m)?;
        }
        Ok(())
    }

    fn named(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        for (name, p) in [("stage1", &self.stage1), ("stage2", &self.stage2)] {
            if let Some(p) = p {
                out.push((format!("{name}.wq"), &p.wq));
                out.push((format!("{name}.wk"), &p.wk));
                out.push((format!("{name}.wv"), &p.wv));
            }
        }
        for (i, l) in self.head.layers.iter().enumerate() {
            out.push((format!("head.{i}.w"), &l.w));
            out.push((format!("head.{i}.b"), &l.b));
        }
        out
    }

    pub fn to_checkpoint(&self, seed: u64, extra_config: serde_json::Value) -> Checkpoint {
        let mut ck = Checkpoint::new(seed, json!({ "model": self.config, "run": extra_config }));
        for (name, p) in self.named() {
            ck.insert(name, &p.value);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model, ModelError> {
        let config: ModelConfig = serde_json::from_value(
            ck.config
                .get("model")
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint("config.model missing".into()))?,
        )
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        config.validate()?;
        let att = |name: &str, stage| -> Result<AttentionParams, ModelError> {
            Ok(AttentionParams::from_matrices(
                ck.get(&format!("{name}.wq"))?,
                ck.get(&format!("{name}.wk"))?,
                ck.get(&format!("{name}.wv"))?,
                stage,
            )?)
        };
        let (stage1, stage2) = if config.ablation.disable_tcl {
            (None, None)
        } else {
            (Some(att("stage1", Stage::Stage1)?), Some(att("stage2", Stage::Stage2)?))
        };
        let mut head = HeadParams::zeros(&config.head_sizes());
        for (i, l) in head.layers.iter_mut().enumerate() {
            let w = ck.get(&format!("head.{i}.w"))?;
            let b = ck.get(&format!("head.{i}.b"))?;
            if w.shape() != l.w.value.shape() || b.shape() != l.b.value.shape() {
                return Err(ModelError::Checkpoint(format!("head layer {i} has the wrong shape")));
            }
            l.w = Param::new(w);
            l.b = Param::new(b);
        }
        if let Some(p) = &stage1 {
            if p.dim() != config.d {
                return Err(ModelError::Checkpoint("attention dimension differs from config.d".into()));
            }
        }
        Ok(Model {
            config,
            stage1,
            stage2,
            head,
        })
    }
}

fn pool(active: &[ThemeId], parts: &[Matrix]) -> PooledThemes {
    let mut pooled = PerTheme::from_fn(|_| None);
    for (t, p) in active.iter().zip(parts) {
        *pooled.get_mut(*t) = Some(mean_pool_rows(p));
    }
    PooledThemes { pooled }
}

/// Attention data behind the intra-theme, inter-theme and weight figures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub session_id: String,
    /// Token×token maps per active theme; absent without TCL.
    pub stage1: Option<PerTheme<Option<TokenAttention>>>,
    /// 5×5 segment-normalized affinity (rows sum to 1 over active themes).
    pub theme_affinity: Option<Vec<Vec<f64>>>,
    /// 5×5 unnormalized block means.
    pub block_means: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttention {
    pub tokens: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Embeds a k×k matrix over the active themes into 5×5, zero elsewhere.
fn expand(m: &Matrix, active: &[ThemeId]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; 5]; 5];
    for (i, ti) in active.iter().enumerate() {
        for (j, tj) in active.iter().enumerate() {
            out[ti.index()][tj.index()] = m.get(i, j);
        }
    }
    out
}

impl Model {
    pub fn export_attention(&self, f: &SessionFeatures) -> Result<AttentionExport, ModelError> {
        let (active, s1, s2, _) = self.encode(f)?;
        let stage1 = s1.map(|s1| {
            let mut maps = PerTheme::from_fn(|_| None);
            for (t, c) in active.iter().zip(&s1.caches) {
                *maps.get_mut(*t) = Some(TokenAttention {
                    tokens: f.themes.get(*t).tokens.clone(),
                    weights: to_rows(&c.a),
                });
            }
            maps
        });
        let (aff, means) = match &s2 {
            Some(s2) => (
                Some(expand(&s2.theme_affinity(), &active)),
                Some(expand(&block_means(&s2.cache.a, &s2.segments), &active)),
            ),
            None => (None, None),
        };
        Ok(AttentionExport {
            session_id: f.session_id.clone(),
            stage1,
            theme_affinity: aff,
            block_means: means,
        })
    }
}
