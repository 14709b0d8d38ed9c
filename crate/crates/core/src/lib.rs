//! Depression-screening pipeline over interview transcripts: theme
//! extraction through an LLM gateway, two-stage attention over theme token
//! features, feedback-weighted theme fusion and a small detection head.

pub mod corpus;
pub mod eval;
pub mod gateway;
pub mod head;
pub mod itas;
pub mod lexicon;
pub mod model;
pub mod numeric;
pub mod pipeline;
pub mod tcl;
pub mod theme;
pub mod ticl;
pub mod train;

pub use corpus::{Label, Speaker, Split, SyntheticSpec, Transcript};
pub use eval::{compute_metrics, MetricsReport};
pub use gateway::{BackendConfig, BackendKind, Gateway, GatewayError};
pub use itas::{Feedback, FeedbackSource, FeedbackWeights, ItasMode};
pub use model::{Ablation, Model, ModelConfig, Prediction, SessionFeatures};
pub use numeric::{Checkpoint, Matrix};
pub use theme::{PerTheme, ThemeId};
pub use ticl::{InContextTemplate, ThemeSet};
pub use train::{Preset, TrainConfig};
