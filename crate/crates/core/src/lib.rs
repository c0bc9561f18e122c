//! Support-seeking evaluation for text-to-SQL models.
//!
//! A run loads question/database pairs, lets a model write SQL with and
//! without human-provided support, asks the model whether it would request
//! that support, and scores the resulting trade-off between user burden and
//! accuracy gain.

pub mod confidence;
pub mod dataset;
pub mod llmgateway;
pub mod metrics;
pub mod pipeline;
pub mod promptkit;
pub mod sqlrunner;

pub use confidence::{AskSignal, ConfidenceError, Evidence};
pub use dataset::{
    build_catalog, load_instances, validate_gold, DatabaseCatalog, DatasetError, Instance,
    ValidationReport,
};
pub use llmgateway::{
    Backend, CacheMode, CachedBackend, CompletionRequest, CompletionResponse, GatewayError,
    MockBackend, OpenAiBackend, OpenAiConfig, ResponseCache,
};
pub use metrics::{
    summarize, Curve, CurveKind, CurvePoint, Judged, MetricsError, MetricsSummary, Report,
    SummaryOptions,
};
pub use pipeline::{
    read_jsonl, run_dataset, write_jsonl, InstanceRecord, MethodSignal, RecordStatus,
    RecordsError, RunManifest, RunReport, Runner, ScoringPath,
};
pub use promptkit::Method;
pub use sqlrunner::{ComparisonMode, ExecutionOutcome, Executor};
