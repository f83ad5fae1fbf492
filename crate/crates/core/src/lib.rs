//! First-token risk classification over a completion backend.
//!
//! The crate is organized around a small pipeline: a [`taxonomy::CategoryRegistry`]
//! names the risk categories, [`policy`] validates per-request dynamic rules and
//! renders the classification prompt, [`backend`] abstracts the completion API,
//! and [`verdict`] turns first-token logprobs into a thresholded safe/unsafe
//! decision. [`gateway`] exposes the pipeline over HTTP, [`eval`] scores it
//! against labeled datasets, [`synth`] generates policy-conditioned training
//! triplets, and [`signals`] holds the distillation and reward arithmetic.

pub mod backend;
pub mod eval;
pub mod gateway;
pub mod policy;
pub mod signals;
pub mod synth;
pub mod taxonomy;
pub mod verdict;

pub use backend::{BackendConfig, BackendError, CompletionBackend, CompletionRequest, CompletionResult, HttpBackend, MockBackend};
pub use eval::{ConfusionCounts, DatasetMetrics, ErrorPolicy, EvalError, EvalSample, MetricsReport, PrfMetrics};
pub use gateway::{ClassifyRequest, ClassifyResponse, ConfigError, GatewayConfig, GatewayState};
pub use policy::{DynamicPolicy, DynamicRule, PolicyError, RuleOp, TextInput, TextKind, ValidatedPolicy};
pub use signals::{CategoricalDist, GoldAnnotation, Rollout, SignalsError};
pub use synth::{BaseSample, MutationSpec, MutationTarget, PipelineStats, SynthError, SynthTriplet};
pub use taxonomy::{CategoryInfo, CategoryOrigin, CategoryRegistry, TaxonomyError, SAFE_CATEGORY_ID};
pub use verdict::{ClassifyError, ClassifyMode, ClassifyOptions, Decision, ExplainMode, ScoreVector, ThresholdVector, Verdict};
