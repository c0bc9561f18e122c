//! Per-instance support-seeking protocol and dataset-level orchestration.
//!
//! For every instance the pipeline generates SQL once without support,
//! executes it, asks the model (per method) whether it needs support, then
//! generates and executes SQL with support and executes the gold query.
//! Both predictions are kept for every complete record; thresholds are
//! applied afterwards.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::confidence::AskSignal;
use crate::dataset::{DatabaseCatalog, Instance};
use crate::llmgateway::{self, Backend, CompletionRequest, Decoding};
use crate::promptkit::{self, AskContext, Method};
use crate::sqlrunner::{
    compare_results, serialize_for_prompt, ComparisonMode, ExecLimits, ExecutionOutcome, Executor,
    PromptBudget,
};

pub const DEFAULT_WORKERS: usize = 4;
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;
pub const DEFAULT_TOP_LOGPROBS: u32 = 5;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PipelineError {
    #[error("model produced no SQL")]
    EmptyGeneration,
}

/// How ask scores are obtained.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringPath {
    /// Yes/No token log-probabilities.
    #[default]
    Logprobs,
    /// A probability written out by the model.
    Verbalized,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedSql {
    pub sql: String,
    /// True when no fenced `sql` block was found and the whole reply was used.
    pub degraded: bool,
}

/// Pulls the first fenced `sql` block out of a model reply.
pub fn extract_sql(response_text: &str) -> Result<ExtractedSql, PipelineError> {
    let lower = response_text.to_ascii_lowercase();
    let (sql, degraded) = match lower.find("```sql") {
        Some(open) => {
            let body = &response_text[open + "```sql".len()..];
            match body.find("```") {
                Some(close) => (body[..close].trim(), false),
                None => (body.trim(), true),
            }
        }
        None => (response_text.trim(), true),
    };
    if sql.is_empty() {
        return Err(PipelineError::EmptyGeneration);
    }
    Ok(ExtractedSql {
        sql: sql.to_string(),
        degraded,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratedSql {
    /// Extracted SQL; empty when the reply held none.
    pub sql: String,
    /// The model's full reply.
    pub raw: String,
    #[serde(default)]
    pub degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum MethodSignal {
    Scored(AskSignal),
    Unscorable { reason: String },
}

impl MethodSignal {
    pub fn score(&self) -> Option<f64> {
        match self {
            MethodSignal::Scored(s) => Some(s.score),
            MethodSignal::Unscorable { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RecordStatus {
    Complete,
    Incomplete { reason: String },
}

/// Everything measured for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub manifest_digest: String,
    pub question_id: String,
    pub db_id: String,
    pub gen_sql: Option<GeneratedSql>,
    pub gen_sql_support: Option<GeneratedSql>,
    /// Serialized execution results shown to the execute-then-ask prompt.
    pub exe_results: Option<String>,
    pub outcome_base: Option<ExecutionOutcome>,
    pub outcome_support: Option<ExecutionOutcome>,
    pub outcome_gold: Option<ExecutionOutcome>,
    pub h_base: Option<u8>,
    pub h_support: Option<u8>,
    pub signals: BTreeMap<Method, MethodSignal>,
    pub status: RecordStatus,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RecordError {
    #[error("complete record lacks `{0}`")]
    MissingField(&'static str),
    #[error("{field} is {stored} but rescoring the stored outcomes gives {rescored}")]
    Rescore {
        field: &'static str,
        stored: u8,
        rescored: u8,
    },
    #[error("{0}")]
    Invalid(String),
}

impl InstanceRecord {
    fn incomplete(instance: &Instance, manifest_digest: &str, reason: String) -> Self {
        Self {
            manifest_digest: manifest_digest.to_string(),
            question_id: instance.question_id.clone(),
            db_id: instance.db_id.clone(),
            gen_sql: None,
            gen_sql_support: None,
            exe_results: None,
            outcome_base: None,
            outcome_support: None,
            outcome_gold: None,
            h_base: None,
            h_support: None,
            signals: BTreeMap::new(),
            status: RecordStatus::Incomplete { reason },
        }
    }

    pub fn is_complete(&self) -> bool {
        self.status == RecordStatus::Complete
    }

    /// Checks the structural invariants of a record and, for complete ones,
    /// that both correctness values match a rescore of the stored outcomes.
    pub fn check(&self, comparison: ComparisonMode) -> Result<(), RecordError> {
        for (method, signal) in &self.signals {
            if let MethodSignal::Scored(s) = signal {
                if s.method != *method {
                    return Err(RecordError::Invalid(format!(
                        "signal under {method} is tagged {}",
                        s.method
                    )));
                }
                if !(0.0..=1.0).contains(&s.score) {
                    return Err(RecordError::Invalid(format!(
                        "{method} score {} outside [0, 1]",
                        s.score
                    )));
                }
            }
        }
        if !self.is_complete() {
            return Ok(());
        }
        let gold = self
            .outcome_gold
            .as_ref()
            .ok_or(RecordError::MissingField("outcome_gold"))?;
        let base = self
            .outcome_base
            .as_ref()
            .ok_or(RecordError::MissingField("outcome_base"))?;
        let support = self
            .outcome_support
            .as_ref()
            .ok_or(RecordError::MissingField("outcome_support"))?;
        self.gen_sql
            .as_ref()
            .ok_or(RecordError::MissingField("gen_sql"))?;
        self.gen_sql_support
            .as_ref()
            .ok_or(RecordError::MissingField("gen_sql_support"))?;
        for (field, stored, outcome) in [
            ("h_base", self.h_base, base),
            ("h_support", self.h_support, support),
        ] {
            let stored = stored.ok_or(RecordError::MissingField(field))?;
            let rescored = compare_results(gold, outcome, comparison)
                .map_err(|e| RecordError::Invalid(e.to_string()))?;
            if stored != rescored {
                return Err(RecordError::Rescore {
                    field,
                    stored,
                    rescored,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingSettings {
    pub generation: Decoding,
    pub ask: Decoding,
    /// Alternatives requested per position on the log-probability path.
    pub top_logprobs: u32,
}

impl Default for DecodingSettings {
    fn default() -> Self {
        Self {
            generation: Decoding::greedy(512),
            ask: Decoding::greedy(8),
            top_logprobs: DEFAULT_TOP_LOGPROBS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunLimits {
    pub timeout_ms: u64,
    pub prompt: PromptBudget,
    pub comparison: ComparisonMode,
}

impl Default for RunLimits {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            prompt: PromptBudget::default(),
            comparison: ComparisonMode::Set,
        }
    }
}

/// Frozen configuration of a run. Together with the response cache it
/// determines every record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub model: String,
    pub methods: Vec<Method>,
    pub scoring: ScoringPath,
    pub decoding: DecodingSettings,
    pub limits: RunLimits,
    pub dataset_digest: String,
    pub template_digests: BTreeMap<String, String>,
    pub seed: u64,
}

impl RunManifest {
    pub fn new(
        model: impl Into<String>,
        methods: Vec<Method>,
        dataset_digest: impl Into<String>,
    ) -> Self {
        Self {
            tool_version: concat!("supportbench ", env!("CARGO_PKG_VERSION")).to_string(),
            model: model.into(),
            methods,
            scoring: ScoringPath::default(),
            decoding: DecodingSettings::default(),
            limits: RunLimits::default(),
            dataset_digest: dataset_digest.into(),
            template_digests: promptkit::template_digests(),
            seed: 0,
        }
    }

    /// Hex SHA-256 of the manifest's JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifests always serialize");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Runs the protocol for single instances against one backend.
pub struct Runner<'a> {
    executor: &'a Executor,
    backend: &'a dyn Backend,
    manifest: &'a RunManifest,
    manifest_digest: String,
}

impl<'a> Runner<'a> {
    pub fn new(
        executor: &'a Executor,
        backend: &'a dyn Backend,
        manifest: &'a RunManifest,
    ) -> Self {
        Self {
            executor,
            backend,
            manifest,
            manifest_digest: manifest.digest(),
        }
    }

    pub fn manifest_digest(&self) -> &str {
        &self.manifest_digest
    }

    fn catalog(&self) -> &DatabaseCatalog {
        self.executor.catalog()
    }

    fn generate(
        &self,
        schema: &str,
        question: &str,
        support: Option<&str>,
    ) -> Result<GeneratedSql, String> {
        let prompt =
            promptkit::render_generation(schema, question, support).map_err(|e| e.to_string())?;
        let req = CompletionRequest::new(
            &self.manifest.model,
            prompt.text,
            self.manifest.decoding.generation,
        );
        let resp = llmgateway::complete(self.backend, &req).map_err(|e| e.to_string())?;
        Ok(match extract_sql(&resp.text) {
            Ok(x) => GeneratedSql {
                sql: x.sql,
                raw: resp.text,
                degraded: x.degraded,
            },
            Err(_) => GeneratedSql {
                sql: String::new(),
                raw: resp.text,
                degraded: true,
            },
        })
    }

    fn execute(&self, db_id: &str, sql: &str) -> Result<ExecutionOutcome, String> {
        if sql.is_empty() {
            return Ok(ExecutionOutcome::EngineError {
                message: PipelineError::EmptyGeneration.to_string(),
            });
        }
        self.executor
            .execute(
                db_id,
                sql,
                ExecLimits::scoring(self.manifest.limits.timeout_ms),
            )
            .map_err(|e| e.to_string())
    }

    fn ask(&self, ctx: &AskContext<'_>) -> Result<MethodSignal, String> {
        let (prompt, top_k) = match self.manifest.scoring {
            ScoringPath::Logprobs => (
                promptkit::render_ask(ctx),
                Some(self.manifest.decoding.top_logprobs),
            ),
            ScoringPath::Verbalized => (promptkit::render_verbalized(ctx), None),
        };
        let prompt = prompt.map_err(|e| e.to_string())?;
        let mut req = CompletionRequest::new(
            &self.manifest.model,
            prompt.text,
            self.manifest.decoding.ask,
        );
        req.top_logprobs = top_k;
        let resp = llmgateway::complete(self.backend, &req).map_err(|e| e.to_string())?;
        let signal = match self.manifest.scoring {
            ScoringPath::Logprobs => AskSignal::from_logprobs(ctx.method, &resp),
            ScoringPath::Verbalized => AskSignal::from_verbalized(ctx.method, &resp.text),
        };
        Ok(match signal {
            Ok(s) => MethodSignal::Scored(s),
            Err(e) => MethodSignal::Unscorable {
                reason: e.to_string(),
            },
        })
    }

    /// Produces the record for one instance. Backend failures yield an
    /// incomplete record instead of an error.
    pub fn run_instance(&self, instance: &Instance) -> InstanceRecord {
        match self.try_run(instance) {
            Ok(record) => record,
            Err(reason) => {
                log::warn!("instance {} incomplete: {reason}", instance.question_id);
                InstanceRecord::incomplete(instance, &self.manifest_digest, reason)
            }
        }
    }

    fn try_run(&self, instance: &Instance) -> Result<InstanceRecord, String> {
        let entry = self
            .catalog()
            .get(&instance.db_id)
            .ok_or_else(|| format!("unknown database `{}`", instance.db_id))?;
        let schema = entry.schema.rendered.as_str();
        let comparison = self.manifest.limits.comparison;

        let gen_sql = self.generate(schema, &instance.question, None)?;
        let outcome_base = self.execute(&instance.db_id, &gen_sql.sql)?;
        let exe_results = self
            .manifest
            .methods
            .contains(&Method::ExecuteThenAsk)
            .then(|| serialize_for_prompt(&outcome_base, self.manifest.limits.prompt));

        let mut signals = BTreeMap::new();
        for &method in &self.manifest.methods {
            let ctx = match method {
                Method::DirectAsk => AskContext::direct(schema, &instance.question),
                Method::WriteThenAsk => {
                    AskContext::write_then_ask(schema, &instance.question, &gen_sql.sql)
                }
                Method::ExecuteThenAsk => AskContext::execute_then_ask(
                    schema,
                    &instance.question,
                    &gen_sql.sql,
                    exe_results.as_deref().unwrap_or_default(),
                ),
            };
            signals.insert(method, self.ask(&ctx)?);
        }

        let gen_sql_support = self.generate(schema, &instance.question, Some(&instance.support))?;
        let outcome_support = self.execute(&instance.db_id, &gen_sql_support.sql)?;
        let outcome_gold = self.execute(&instance.db_id, &instance.gold_sql)?;
        let h_base =
            compare_results(&outcome_gold, &outcome_base, comparison).map_err(|e| e.to_string())?;
        let h_support = compare_results(&outcome_gold, &outcome_support, comparison)
            .map_err(|e| e.to_string())?;

        Ok(InstanceRecord {
            manifest_digest: self.manifest_digest.clone(),
            question_id: instance.question_id.clone(),
            db_id: instance.db_id.clone(),
            gen_sql: Some(gen_sql),
            gen_sql_support: Some(gen_sql_support),
            exe_results,
            outcome_base: Some(outcome_base),
            outcome_support: Some(outcome_support),
            outcome_gold: Some(outcome_gold),
            h_base: Some(h_base),
            h_support: Some(h_support),
            signals,
            status: RecordStatus::Complete,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReport {
    pub manifest_digest: String,
    pub instances: usize,
    pub complete: usize,
    pub incomplete: usize,
    /// Complete records whose signal for a method could not be scored.
    pub unscorable: BTreeMap<Method, usize>,
    /// Complete records whose signal for a method relied on a fallback rule.
    pub degraded_signals: BTreeMap<Method, usize>,
    /// Generations where the SQL had to be recovered without a fence.
    pub degraded_generations: usize,
    /// Instances dropped before the run because their gold query failed.
    #[serde(default)]
    pub excluded: Vec<String>,
    pub incomplete_reasons: Vec<(String, String)>,
}

impl RunReport {
    pub fn from_records(manifest_digest: &str, records: &[InstanceRecord]) -> Self {
        let mut report = RunReport {
            manifest_digest: manifest_digest.to_string(),
            instances: records.len(),
            ..Default::default()
        };
        for r in records {
            match &r.status {
                RecordStatus::Complete => report.complete += 1,
                RecordStatus::Incomplete { reason } => {
                    report.incomplete += 1;
                    report
                        .incomplete_reasons
                        .push((r.question_id.clone(), reason.clone()));
                    continue;
                }
            }
            for (method, signal) in &r.signals {
                match signal {
                    MethodSignal::Unscorable { .. } => {
                        *report.unscorable.entry(*method).or_default() += 1
                    }
                    MethodSignal::Scored(s) if s.degraded => {
                        *report.degraded_signals.entry(*method).or_default() += 1
                    }
                    MethodSignal::Scored(_) => {}
                }
            }
            report.degraded_generations += [&r.gen_sql, &r.gen_sql_support]
                .iter()
                .filter(|g| g.as_ref().is_some_and(|g| g.degraded))
                .count();
        }
        report
    }

    /// Plain-text rendering used for the run report file.
    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("manifest: {}\n", self.manifest_digest));
        out.push_str(&format!("instances: {}\n", self.instances));
        out.push_str(&format!("complete: {}\n", self.complete));
        out.push_str(&format!("incomplete: {}\n", self.incomplete));
        for (method, n) in &self.unscorable {
            out.push_str(&format!("unscorable[{method}]: {n}\n"));
        }
        for (method, n) in &self.degraded_signals {
            out.push_str(&format!("degraded_signals[{method}]: {n}\n"));
        }
        out.push_str(&format!(
            "degraded_generations: {}\n",
            self.degraded_generations
        ));
        out.push_str(&format!("excluded: {}\n", self.excluded.len()));
        for qid in &self.excluded {
            out.push_str(&format!("  excluded {qid}\n"));
        }
        for (qid, reason) in &self.incomplete_reasons {
            out.push_str(&format!("  incomplete {qid}: {reason}\n"));
        }
        out
    }
}

/// Runs every instance on a pool of `workers` threads and returns records in
/// input order.
pub fn run_dataset(
    instances: &[Instance],
    executor: &Executor,
    backend: &dyn Backend,
    manifest: &RunManifest,
    workers: usize,
) -> (Vec<InstanceRecord>, RunReport) {
    let runner = Runner::new(executor, backend, manifest);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<InstanceRecord>>> = Mutex::new(vec![None; instances.len()]);
    let workers = workers.clamp(1, instances.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(instance) = instances.get(i) else {
                    break;
                };
                let record = runner.run_instance(instance);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(record);
            });
        }
    });
    let records: Vec<InstanceRecord> = slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .map(|r| r.expect("every slot is filled"))
        .collect();
    let report = RunReport::from_records(runner.manifest_digest(), &records);
    (records, report)
}

#[derive(Debug, Error)]
pub enum RecordsError {
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("records file holds no records")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Writes one JSON record per line.
pub fn write_jsonl<W: Write>(records: &[InstanceRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses a JSONL records stream. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<(usize, InstanceRecord)>, RecordsError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| RecordsError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, record));
    }
    if out.is_empty() {
        return Err(RecordsError::Empty);
    }
    Ok(out)
}

/// Checks every numbered record against its invariants and the expected
/// manifest digest, returning one error per offending line.
pub fn check_records(
    records: &[(usize, InstanceRecord)],
    manifest_digest: &str,
    comparison: ComparisonMode,
) -> Vec<RecordsError> {
    records
        .iter()
        .filter_map(|(line, r)| {
            let message = if r.manifest_digest != manifest_digest {
                format!(
                    "manifest digest {} does not match {manifest_digest}",
                    r.manifest_digest
                )
            } else {
                r.check(comparison).err()?.to_string()
            };
            Some(RecordsError::Line {
                line: *line,
                message,
            })
        })
        .collect()
}
