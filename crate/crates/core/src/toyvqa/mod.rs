//! Synthetic bias-controlled VQA on small grids of coloured shapes.

pub mod data;
pub mod encoder;
pub mod eval;
pub mod model;
pub mod vocab;

pub use data::{
    effective_bias, gen_dataset, oracle_answer, read_dataset, write_dataset, DataConfig, DatasetSplits, Split,
    ToySample,
};
pub use encoder::ImageEncoder;
pub use eval::{evaluate, score, Metrics, ModelPredictor, Predictor, QuestionOnlyBaseline, RuleOracle, TemplateMetrics};
pub use model::{batch_logits, batch_loss, predict, CueModule, CueVariant, ModelConfig, VqaArch};
pub use vocab::Template;
