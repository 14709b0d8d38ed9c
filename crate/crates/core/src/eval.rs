//! Metrics, the published comparison table as fixture data, the ablation
//! runner and figure-data export.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::model::{Ablation, AttentionExport, Model, ModelError, SessionFeatures};
use crate::theme::{PerTheme, ThemeId};
use crate::train::{train, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("cannot compute metrics over zero predictions")]
    Empty,
    #[error("session {0} has no label")]
    Unlabeled(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionMatrix {
    /// Counts over `(predicted, truth)` pairs with depressed as positive.
    pub fn from_pairs(pairs: &[(Label, Label)]) -> ConfusionMatrix {
        let mut c = ConfusionMatrix::default();
        for &(p, y) in pairs {
            match (p, y) {
                (Label::Depressed, Label::Depressed) => c.tp += 1,
                (Label::Depressed, Label::NonDepressed) => c.fp += 1,
                (Label::NonDepressed, Label::NonDepressed) => c.tn += 1,
                (Label::NonDepressed, Label::Depressed) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// The same counts with the other class taken as positive.
    pub fn flipped(&self) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tn,
            fp: self.fn_,
            tn: self.tp,
            fn_: self.fp,
        }
    }
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        tracing::warn!("{what} has a zero denominator; reporting 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn class_scores(c: &ConfusionMatrix) -> ClassScores {
    let precision = ratio(c.tp, c.tp + c.fp, "precision");
    let recall = ratio(c.tp, c.tp + c.fn_, "recall");
    ClassScores {
        precision,
        recall,
        f1: f1(precision, recall),
        support: c.tp + c.fn_,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    /// Positive-class (depressed) precision, recall and F1.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Support-weighted averages over both classes.
    pub wa_precision: f64,
    pub wa_recall: f64,
    pub wa_f1: f64,
    /// `√(precision · recall)`.
    pub g_mean: f64,
    pub f1_dep: f64,
    pub f1_nondep: f64,
    /// Unweighted two-class means.
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
}

pub fn compute_metrics(pairs: &[(Label, Label)]) -> Result<MetricsReport, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::Empty);
    }
    let c = ConfusionMatrix::from_pairs(pairs);
    let n = c.total();
    let pos = class_scores(&c);
    let neg = class_scores(&c.flipped());
    let wa = |a: f64, b: f64| (a * pos.support as f64 + b * neg.support as f64) / n as f64;
    Ok(MetricsReport {
        n,
        accuracy: (c.tp + c.tn) as f64 / n as f64,
        precision: pos.precision,
        recall: pos.recall,
        f1: pos.f1,
        wa_precision: wa(pos.precision, neg.precision),
        wa_recall: wa(pos.recall, neg.recall),
        wa_f1: wa(pos.f1, neg.f1),
        g_mean: (pos.precision * pos.recall).sqrt(),
        f1_dep: pos.f1,
        f1_nondep: neg.f1,
        macro_precision: (pos.precision + neg.precision) / 2.0,
        macro_recall: (pos.recall + neg.recall) / 2.0,
        macro_f1: (pos.f1 + neg.f1) / 2.0,
        confusion: c,
    })
}

pub const METRICS_CSV_HEADER: &str = "n,accuracy,precision,recall,f1,wa_precision,wa_recall,wa_f1,g_mean,f1_dep,f1_nondep,macro_precision,macro_recall,macro_f1,tp,fp,tn,fn";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let c = &self.confusion;
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
            self.n,
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.wa_precision,
            self.wa_recall,
            self.wa_f1,
            self.g_mean,
            self.f1_dep,
            self.f1_nondep,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
            c.tp,
            c.fp,
            c.tn,
            c.fn_
        )
    }

    /// Markdown table in the column order of the published comparison.
    pub fn markdown(&self, title: &str) -> String {
        format!(
            "| Method | Accuracy | Precision | Recall | F1-Score | WA Prec. | WA Rec. | WA F1 | G-Mean |\n|---|---|---|---|---|---|---|---|---|\n| {title} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} | {:.3} |\n\n| F1 dep. | F1 non-dep. |\n|---|---|\n| {:.2} | {:.2} |\n",
            self.accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.wa_precision,
            self.wa_recall,
            self.wa_f1,
            self.g_mean,
            self.f1_dep,
            self.f1_nondep
        )
    }
}

/// One row of the published baseline comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PublishedRow {
    pub method: &'static str,
    pub precision: f64,
    pub recall: f64,
    pub g_mean: f64,
}

/// Precision, recall and G-Mean for the fourteen methods of the published
/// comparison table, last row being the reference method.
pub const PUBLISHED_TABLE: [PublishedRow; 14] = [
    PublishedRow { method: "TFN", precision: 0.67, recall: 0.72, g_mean: 0.699 },
    PublishedRow { method: "BiLSTM-1DCNN", precision: 0.65, recall: 0.61, g_mean: 0.630 },
    PublishedRow { method: "MulT", precision: 0.73, recall: 0.74, g_mean: 0.735 },
    PublishedRow { method: "MISA", precision: 0.74, recall: 0.77, g_mean: 0.755 },
    PublishedRow { method: "D-vlog", precision: 0.73, recall: 0.72, g_mean: 0.725 },
    PublishedRow { method: "BC-LSTM", precision: 0.59, recall: 0.60, g_mean: 0.595 },
    PublishedRow { method: "EMSDL", precision: 0.65, recall: 0.69, g_mean: 0.670 },
    PublishedRow { method: "ATSM", precision: 0.67, recall: 0.71, g_mean: 0.690 },
    PublishedRow { method: "TopicModel", precision: 0.63, recall: 0.60, g_mean: 0.615 },
    PublishedRow { method: "CADL", precision: 0.71, recall: 0.71, g_mean: 0.710 },
    PublishedRow { method: "Speechformer", precision: 0.70, recall: 0.72, g_mean: 0.710 },
    PublishedRow { method: "GRU/BiLSTM", precision: 0.75, recall: 0.78, g_mean: 0.765 },
    PublishedRow { method: "HiQuE", precision: 0.78, recall: 0.80, g_mean: 0.790 },
    PublishedRow { method: "reference", precision: 0.89, recall: 0.92, g_mean: 0.905 },
];

/// Max over rows of `|√(p·r) − g|`.
pub fn validate_gmean_convention(rows: &[(f64, f64, f64)]) -> f64 {
    rows.iter()
        .map(|&(p, r, g)| ((p * r).sqrt() - g).abs())
        .fold(0.0, f64::max)
}

pub fn published_rows() -> Vec<(f64, f64, f64)> {
    PUBLISHED_TABLE
        .iter()
        .map(|r| (r.precision, r.recall, r.g_mean))
        .collect()
}

/// Predicts every session and scores against its label.
pub fn evaluate(model: &Model, sessions: &[SessionFeatures]) -> Result<MetricsReport, EvalError> {
    let pairs = sessions
        .iter()
        .map(|s| {
            let y = s.label.ok_or_else(|| EvalError::Unlabeled(s.session_id.clone()))?;
            Ok((model.predict(s)?.label, y))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    compute_metrics(&pairs)
}

/// The eight variants: each theme removed, TCL removed, ITAS removed, full.
pub fn ablation_variants() -> Vec<Ablation> {
    let mut v: Vec<Ablation> = ThemeId::ALL
        .iter()
        .map(|t| Ablation {
            drop_theme: Some(*t),
            ..Ablation::default()
        })
        .collect();
    v.push(Ablation {
        disable_tcl: true,
        ..Ablation::default()
    });
    v.push(Ablation {
        disable_itas: true,
        ..Ablation::default()
    });
    v.push(Ablation::default());
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub ablation: Ablation,
    pub seed: u64,
    pub num_params: usize,
    pub best_epoch: usize,
    pub test: MetricsReport,
}

/// Trains and tests every variant with the same seed and splits.
pub fn run_ablations(
    train_set: &[SessionFeatures],
    dev_set: &[SessionFeatures],
    test_set: &[SessionFeatures],
    base: &TrainConfig,
    d: usize,
) -> Result<Vec<AblationRow>, EvalError> {
    ablation_variants()
        .into_iter()
        .map(|ablation| {
            let mut cfg = base.clone();
            cfg.drop_theme = ablation.drop_theme;
            cfg.disable_tcl = ablation.disable_tcl;
            cfg.disable_itas = ablation.disable_itas;
            tracing::info!(variant = %ablation.name(), seed = cfg.seed, "training ablation variant");
            let TrainOutcome { model, best_epoch, .. } = train(train_set, dev_set, &cfg, d)?;
            Ok(AblationRow {
                variant: ablation.name(),
                ablation,
                seed: cfg.seed,
                num_params: model.num_params(),
                best_epoch,
                test: evaluate(&model, test_set)?,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("variant,seed,num_params,best_epoch,{METRICS_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variant,
            r.seed,
            r.num_params,
            r.best_epoch,
            r.test.csv_row()
        ));
    }
    s
}

pub fn ablation_markdown(rows: &[AblationRow]) -> String {
    let mut s = String::from("| Variant | WA Prec. | WA Rec. | WA F1 |\n|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} |\n",
            r.variant, r.test.wa_precision, r.test.wa_recall, r.test.wa_f1
        ));
    }
    s
}

/// Data behind the attention and theme-weight figures of one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureBundle {
    pub attention: AttentionExport,
    /// Weights without feedback: uniform over active themes.
    pub pre_itas_weights: PerTheme<f64>,
    /// Weights derived from the session's feedback scores.
    pub post_itas_weights: PerTheme<f64>,
    pub scores: PerTheme<f64>,
}

pub fn export_figures(model: &Model, session: &SessionFeatures) -> Result<FigureBundle, EvalError> {
    let pre = crate::itas::uniform_weights(&model.active()).map_err(ModelError::from)?;
    let post = model.weights(&session.feedback.scores)?;
    Ok(FigureBundle {
        attention: model.export_attention(session)?,
        pre_itas_weights: pre.alpha,
        post_itas_weights: post.alpha,
        scores: session.feedback.scores.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Depressed as D, NonDepressed as N};

    #[test]
    fn perfect_predictions() {
        let pairs: Vec<_> = [D; 6].iter().chain([N; 4].iter()).map(|&l| (l, l)).collect();
        let m = compute_metrics(&pairs).unwrap();
        for v in [m.accuracy, m.precision, m.recall, m.f1, m.wa_f1, m.g_mean, m.f1_nondep, m.macro_f1] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn worked_confusion_example() {
        let mut pairs = vec![(D, D); 3];
        pairs.push((D, N));
        pairs.extend([(N, D); 2]);
        pairs.extend([(N, N); 4]);
        let m = compute_metrics(&pairs).unwrap();
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.accuracy, 0.7);
        // negative class: prec 4/6, rec 4/5, f1 8/11; supports 5 and 5
        let want = 0.5 * (2.0 / 3.0) + 0.5 * (8.0 / 11.0);
        assert!((m.wa_f1 - want).abs() < 1e-12);
        assert!((m.g_mean - (0.75f64 * 0.6).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_and_degenerate() {
        assert!(compute_metrics(&[]).is_err());
        let m = compute_metrics(&[(N, N), (N, N)]).unwrap();
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.f1_nondep, 1.0);
    }

    #[test]
    fn published_table_gmean() {
        assert_eq!(PUBLISHED_TABLE.len(), 14);
        let row = |i: usize| {
            let r = PUBLISHED_TABLE[i];
            validate_gmean_convention(&[(r.precision, r.recall, r.g_mean)])
        };
        assert!((row(0) - 0.0045).abs() < 1e-4);
        assert!(row(12) < 1e-4);
        assert!((row(13) - 0.0001).abs() < 1e-4);
        assert!(validate_gmean_convention(&published_rows()) <= 0.006);
    }

    #[test]
    fn eight_variants() {
        let v = ablation_variants();
        assert_eq!(v.len(), 8);
        assert_eq!(v.last().unwrap().name(), "full");
        assert_eq!(v[5].name(), "w/o TCL");
    }
}
