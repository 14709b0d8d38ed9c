//! Seeded mini-batch training with Adam and best-on-dev model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eval::{compute_metrics, EvalError, MetricsReport};
use crate::head::bce_loss;
use crate::itas::ItasMode;
use crate::model::{Ablation, Model, ModelConfig, ModelError, ModelGrads, SessionFeatures};
use crate::numeric::{Adam, AdamConfig, NumericError};
use crate::theme::ThemeId;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrain,
    #[error("session {0} has no label")]
    Unlabeled(String),
    #[error("non-finite loss at epoch {epoch} on session {session_id}: {detail}")]
    NonFinite {
        epoch: usize,
        session_id: String,
        detail: String,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("evaluation: {0}")]
    Eval(String),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// lr 1e-3, 50 epochs, batch 16.
    #[default]
    Desk,
    /// lr 1e-5, 80 epochs, batch 32; suited to large LLM embeddings.
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub preset: Preset,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Head hidden widths; `None` means `[d / 2]`.
    pub hidden_sizes: Option<Vec<usize>>,
    pub itas_mode: ItasMode,
    pub drop_theme: Option<ThemeId>,
    pub disable_tcl: bool,
    pub disable_itas: bool,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> TrainConfig {
        let (lr, epochs, batch_size) = match preset {
            Preset::Desk => (1e-3, 50, 16),
            Preset::Large => (1e-5, 80, 32),
        };
        TrainConfig {
            preset,
            lr,
            batch_size,
            epochs,
            seed: 7,
            hidden_sizes: None,
            itas_mode: ItasMode::Normalized,
            drop_theme: None,
            disable_tcl: false,
            disable_itas: false,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn ablation(&self) -> Ablation {
        Ablation {
            drop_theme: self.drop_theme,
            disable_tcl: self.disable_tcl,
            disable_itas: self.disable_itas,
        }
    }

    pub fn model_config(&self, d: usize) -> ModelConfig {
        let mut m = ModelConfig::new(d);
        if let Some(h) = &self.hidden_sizes {
            m.hidden_sizes = h.clone();
        }
        m.itas_mode = self.itas_mode;
        m.ablation = self.ablation();
        m.threshold = self.threshold;
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 0 is the initialized model before any update.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev: MetricsReport,
}

pub const EPOCH_LOG_HEADER: &str = "epoch,train_loss,dev_loss,dev_accuracy,dev_f1,dev_wa_f1,dev_g_mean";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.train_loss,
            self.dev_loss,
            self.dev.accuracy,
            self.dev.f1,
            self.dev.wa_f1,
            self.dev.g_mean
        )
    }
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{EPOCH_LOG_HEADER}\n");
    for e in log {
        s.push_str(&e.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best dev WA-F1.
    pub model: Model,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn label_of(s: &SessionFeatures) -> Result<f64, TrainError> {
    s.label
        .map(|l| l.as_f64())
        .ok_or_else(|| TrainError::Unlabeled(s.session_id.clone()))
}

/// Mean loss and metrics over a labeled set.
pub fn score_set(model: &Model, set: &[SessionFeatures]) -> Result<(f64, MetricsReport), TrainError> {
    type Scored = (f64, (crate::corpus::Label, crate::corpus::Label));
    let results: Vec<Result<Scored, TrainError>> = set
        .par_iter()
        .map(|s| {
            let y = s.label.ok_or_else(|| TrainError::Unlabeled(s.session_id.clone()))?;
            let p = model.predict(s)?;
            Ok((bce_loss(p.probability, y.as_f64()), (p.label, y)))
        })
        .collect();
    let mut loss = 0.0;
    let mut pairs = Vec::with_capacity(set.len());
    for r in results {
        let (l, pair) = r?;
        loss += l;
        pairs.push(pair);
    }
    Ok((loss / set.len().max(1) as f64, compute_metrics(&pairs)?))
}

/// Trains on `train_set`, selecting the epoch with the best dev WA-F1
/// (ties broken by lower dev loss, then by the earlier epoch). Fully
/// deterministic for a given seed: per-session gradients are computed in
/// parallel but summed in batch order.
pub fn train(
    train_set: &[SessionFeatures],
    dev_set: &[SessionFeatures],
    cfg: &TrainConfig,
    d: usize,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let labels: Vec<f64> = train_set.iter().map(label_of).collect::<Result<_, _>>()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(cfg.model_config(d), &mut init_rng)?;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let (init_train, _) = score_set(&model, train_set)?;
    let (dev_loss, dev) = score_set(&model, dev_set)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: init_train,
        dev_loss,
        dev: dev.clone(),
    }];
    let mut best = (model.clone(), 0usize, dev.wa_f1, dev_loss);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(1_000 + epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Vec<Result<(f64, ModelGrads), ModelError>> = batch
                .par_iter()
                .map(|&i| {
                    let (loss, _, g) = model.loss_and_grads(&train_set[i], labels[i])?;
                    Ok((loss, g))
                })
                .collect();
            let mut total: Option<ModelGrads> = None;
            for (&i, r) in batch.iter().zip(results) {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    let s = &train_set[i];
                    return Err(TrainError::NonFinite {
                        epoch,
                        session_id: s.session_id.clone(),
                        detail: format!(
                            "loss {loss}; feedback scores {:?}; theme rows {:?}",
                            s.feedback.scores.values(),
                            s.themes.values().iter().map(|t| t.x.rows()).collect::<Vec<_>>()
                        ),
                    });
                }
                epoch_loss += loss;
                match &mut total {
                    None => total = Some(g),
                    Some(t) => t.add_assign(&g)?,
                }
            }
            if let Some(t) = total {
                model.accumulate(&t)?;
                adam.step(&mut model.params_mut());
            }
        }
        let (dev_loss, dev) = score_set(&model, dev_set)?;
        tracing::debug!(epoch, train_loss = epoch_loss / train_set.len() as f64, dev_wa_f1 = dev.wa_f1);
        if dev.wa_f1 > best.2 || (dev.wa_f1 == best.2 && dev_loss < best.3) {
            best = (model.clone(), epoch, dev.wa_f1, dev_loss);
        }
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            dev_loss,
            dev,
        });
    }
    let (mut model, best_epoch, ..) = best;
    for p in model.params_mut() {
        p.zero_grad();
    }
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
    })
}
