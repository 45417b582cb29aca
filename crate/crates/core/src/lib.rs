//! Tabular laboratory for online versus offline preference optimization.
//!
//! Policies, golden and proxy preference models, contrastive and
//! best-of-two losses, and the online/offline training loops all live on a
//! finite prompt × response table, so every quantity of interest (KL, win
//! rate, the closed-form optimum) can be computed exactly.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod model;
pub mod oracle;
pub mod preference;
pub mod train;

pub use dataset::{LabeledPair, PreferenceDataset, Provenance};
pub use error::{Error, Result};
pub use eval::{EvalConfig, EvalSnapshot, Evaluator, TradeoffPoint, WinMode};
pub use losses::{Batch, BatchSource, LossKind, LossReport};
pub use model::{
    LabRng, PolicyMode, ProbTable, PromptId, ReferencePolicy, ResponseDistribution, ResponseId, TabularPolicy, World,
};
pub use preference::{
    GoldenPreferenceModel, LabelMode, PairJudge, PreferenceJudgment, ProxyMode, ProxyPreferenceModel,
    ProxyTrainConfig,
};
pub use train::{Optimizer, RunData, RunRecord, SamplingMode, TrainConfig};
