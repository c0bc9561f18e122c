//! Declarative run configuration. Relative paths resolve against the
//! directory holding the config file; secrets come only from the environment.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use supportbench_core::llmgateway::{CacheMode, Decoding};
use supportbench_core::pipeline::{
    DecodingSettings, RunLimits, DEFAULT_TIMEOUT_MS, DEFAULT_WORKERS,
};
use supportbench_core::sqlrunner::{ComparisonMode, PromptBudget};
use supportbench_core::{Method, ScoringPath};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Mock,
    Openai,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub model: String,
    /// Base URL of an OpenAI-compatible API.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// Mock script (JSON).
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub mode: CacheMode,
    #[serde(default)]
    pub max_in_flight: Option<usize>,
    #[serde(default)]
    pub retries: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LimitsConfig {
    pub timeout_ms: u64,
    pub prompt_max_rows: usize,
    pub prompt_max_chars: usize,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        let budget = PromptBudget::default();
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            prompt_max_rows: budget.max_rows,
            prompt_max_chars: budget.max_chars,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub gen_max_tokens: u32,
    pub ask_max_tokens: u32,
    pub top_logprobs: u32,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        let d = DecodingSettings::default();
        Self {
            temperature: d.generation.temperature,
            gen_max_tokens: d.generation.max_tokens,
            ask_max_tokens: d.ask.max_tokens,
            top_logprobs: d.top_logprobs,
        }
    }
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}

fn default_workers() -> usize {
    DEFAULT_WORKERS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub db_root: PathBuf,
    pub output_dir: PathBuf,
    pub cache_root: PathBuf,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub scoring: ScoringPath,
    #[serde(default)]
    pub comparison: ComparisonMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub backend: BackendConfig,
    #[serde(default)]
    pub limits: LimitsConfig,
    #[serde(default)]
    pub decoding: DecodingConfig,
}

impl RunConfig {
    /// Reads TOML or JSON depending on the file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let mut config: RunConfig = match ext.as_deref() {
            Some("toml") => toml::from_str(&text)
                .with_context(|| format!("invalid TOML in {}", path.display()))?,
            Some("json") => serde_json::from_str(&text)
                .with_context(|| format!("invalid JSON in {}", path.display()))?,
            _ => bail!("config {} must end in .toml or .json", path.display()),
        };
        let base = path.parent().unwrap_or(Path::new("."));
        config.resolve(base);
        config.check()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset);
        fix(&mut self.db_root);
        fix(&mut self.output_dir);
        fix(&mut self.cache_root);
        if let Some(s) = self.backend.script.as_mut() {
            fix(s);
        }
    }

    /// Static checks that need no file system access.
    fn check(&self) -> Result<()> {
        if self.methods.is_empty() {
            bail!("`methods` must name at least one of DA, WA, EA");
        }
        let mut seen = self.methods.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.methods.len() {
            bail!("`methods` lists a method twice");
        }
        if self.backend.model.trim().is_empty() {
            bail!("`backend.model` is empty");
        }
        if self.limits.timeout_ms == 0 {
            bail!("`limits.timeout_ms` must be positive");
        }
        match self.backend.kind {
            BackendKind::Mock
                if self.backend.script.is_none() && self.backend.mode != CacheMode::Replay =>
            {
                bail!("mock backend needs `backend.script`")
            }
            BackendKind::Openai
                if self.backend.endpoint.is_none() && self.backend.mode != CacheMode::Replay =>
            {
                bail!("openai backend needs `backend.endpoint`")
            }
            _ => Ok(()),
        }
    }

    /// Paths that must exist before anything runs.
    pub fn missing_paths(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.dataset.is_file() {
            out.push(format!(
                "dataset file {} does not exist",
                self.dataset.display()
            ));
        }
        if !self.db_root.is_dir() {
            out.push(format!(
                "database root {} does not exist",
                self.db_root.display()
            ));
        }
        if let Some(s) = &self.backend.script {
            if !s.is_file() {
                out.push(format!("mock script {} does not exist", s.display()));
            }
        }
        if self.backend.mode == CacheMode::Replay && !self.cache_root.is_dir() {
            out.push(format!(
                "cache root {} does not exist",
                self.cache_root.display()
            ));
        }
        out
    }

    pub fn ordered_methods(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m
    }

    pub fn run_limits(&self) -> RunLimits {
        RunLimits {
            timeout_ms: self.limits.timeout_ms,
            prompt: PromptBudget {
                max_rows: self.limits.prompt_max_rows,
                max_chars: self.limits.prompt_max_chars,
            },
            comparison: self.comparison,
        }
    }

    pub fn decoding_settings(&self) -> DecodingSettings {
        let d = self.decoding;
        DecodingSettings {
            generation: Decoding {
                temperature: d.temperature,
                max_tokens: d.gen_max_tokens,
            },
            ask: Decoding {
                temperature: d.temperature,
                max_tokens: d.ask_max_tokens,
            },
            top_logprobs: d.top_logprobs,
        }
    }
}
