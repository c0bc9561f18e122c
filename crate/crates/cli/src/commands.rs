use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{anyhow, Context};
use supportbench_core::dataset::{build_catalog, dataset_digest, parse_instances, validate_gold};
use supportbench_core::llmgateway::{
    Backend, CacheMode, CachedBackend, MockBackend, OpenAiBackend, OpenAiConfig, ResponseCache,
};
use supportbench_core::metrics::{summarize, write_curve_csv, Report, SummaryOptions};
use supportbench_core::pipeline::{check_records, read_jsonl, run_dataset, write_jsonl};
use supportbench_core::{Executor, InstanceRecord, RunManifest};

use crate::config::{BackendKind, RunConfig};
use crate::output::{
    write_atomic, ManifestFile, CURVES_DIR, MANIFEST_FILE, RECORDS_FILE, REPORT_FILE,
    RUN_REPORT_FILE, SUMMARY_FILE,
};
use crate::{CliError, CliResult, ResultExt, Status};

fn build_backend(cfg: &RunConfig) -> anyhow::Result<CachedBackend> {
    let b = &cfg.backend;
    let inner: Option<Box<dyn Backend>> = match (b.kind, b.mode) {
        (_, CacheMode::Replay) => None,
        (BackendKind::Mock, _) => {
            let script = b
                .script
                .as_ref()
                .ok_or_else(|| anyhow!("mock backend needs a script"))?;
            Some(Box::new(MockBackend::from_file(script)?))
        }
        (BackendKind::Openai, _) => {
            let endpoint = b
                .endpoint
                .clone()
                .ok_or_else(|| anyhow!("openai backend needs an endpoint"))?;
            let api_key = match &b.api_key_env {
                Some(var) => Some(
                    env::var(var)
                        .with_context(|| format!("environment variable {var} is not set"))?,
                ),
                None => None,
            };
            let mut oc = OpenAiConfig::new(endpoint, api_key);
            if let Some(n) = b.max_in_flight {
                oc.max_in_flight = n;
            }
            if let Some(n) = b.retries {
                oc.retries = n;
            }
            Some(Box::new(OpenAiBackend::new(oc)))
        }
    };
    let cache = ResponseCache::open(&cfg.cache_root)?;
    Ok(CachedBackend::new(inner, cache, b.mode))
}

/// Loads everything a run needs; returns itemized problems instead of
/// stopping at the first one.
struct Prepared {
    instances: Vec<supportbench_core::Instance>,
    dataset_digest: String,
    executor: Executor,
    backend: CachedBackend,
    gold_issues: Vec<(String, String)>,
}

fn prepare(cfg: &RunConfig) -> Result<Prepared, Vec<String>> {
    let mut issues = cfg.missing_paths();
    if !issues.is_empty() {
        return Err(issues);
    }
    let bytes =
        fs::read(&cfg.dataset).map_err(|e| vec![format!("{}: {e}", cfg.dataset.display())])?;
    let instances = parse_instances(&bytes)
        .map_err(|e| issues.push(e.to_string()))
        .ok();
    let catalog = build_catalog(&cfg.db_root)
        .map_err(|e| issues.push(format!("database root {}: {e}", cfg.db_root.display())))
        .ok();
    let backend = match build_backend(cfg) {
        Ok(b) => match b.probe() {
            Ok(()) => Some(b),
            Err(e) => {
                issues.push(format!("backend probe failed: {e}"));
                None
            }
        },
        Err(e) => {
            issues.push(format!("backend: {e:#}"));
            None
        }
    };
    let (Some(instances), Some(catalog), Some(backend)) = (instances, catalog, backend) else {
        return Err(issues);
    };
    let executor = Executor::new(Arc::new(catalog));
    let gold = validate_gold(&instances, &executor, cfg.limits.timeout_ms);
    let gold_issues = gold
        .issues
        .iter()
        .map(|i| {
            let why = match &i.failure {
                supportbench_core::dataset::ValidationFailure::UnknownDatabase => {
                    format!("unknown database `{}`", i.db_id)
                }
                supportbench_core::dataset::ValidationFailure::EngineError { message } => {
                    format!("gold SQL fails: {message}")
                }
                supportbench_core::dataset::ValidationFailure::Timeout { limit_ms } => {
                    format!("gold SQL exceeds {limit_ms} ms")
                }
            };
            (i.question_id.clone(), why)
        })
        .collect();
    Ok(Prepared {
        instances,
        dataset_digest: dataset_digest(&bytes),
        executor,
        backend,
        gold_issues,
    })
}

pub fn validate(config_path: &Path) -> CliResult {
    let cfg = RunConfig::load(config_path).validation()?;
    let issues = match prepare(&cfg) {
        Ok(p) => {
            let issues: Vec<String> = p
                .gold_issues
                .iter()
                .map(|(id, why)| format!("instance {id}: {why}"))
                .collect();
            if issues.is_empty() {
                println!(
                    "ok: {} instances, {} databases",
                    p.instances.len(),
                    p.executor.catalog().len()
                );
                return Ok(Status::Success);
            }
            issues
        }
        Err(issues) => issues,
    };
    for issue in &issues {
        println!("FAIL {issue}");
    }
    Err(CliError::new(
        Status::ValidationFailure,
        anyhow!("validation found {} problem(s)", issues.len()),
    ))
}

pub fn run(config_path: &Path) -> CliResult {
    let cfg = RunConfig::load(config_path).validation()?;
    let prepared = prepare(&cfg).map_err(|issues| {
        for issue in &issues {
            println!("FAIL {issue}");
        }
        CliError::new(Status::ValidationFailure, anyhow!("cannot start the run"))
    })?;
    let excluded: Vec<String> = prepared
        .gold_issues
        .iter()
        .map(|(id, _)| id.clone())
        .collect();
    for (id, why) in &prepared.gold_issues {
        log::warn!("excluding instance {id}: {why}");
    }
    let runnable: Vec<_> = prepared
        .instances
        .into_iter()
        .filter(|i| !excluded.contains(&i.question_id))
        .collect();
    if runnable.is_empty() {
        return Err(CliError::new(
            Status::ValidationFailure,
            anyhow!("no instance passed gold validation"),
        ));
    }

    let mut manifest = RunManifest::new(
        cfg.backend.model.clone(),
        cfg.ordered_methods(),
        prepared.dataset_digest,
    );
    manifest.scoring = cfg.scoring;
    manifest.decoding = cfg.decoding_settings();
    manifest.limits = cfg.run_limits();
    manifest.seed = cfg.seed;

    let (records, mut report) = run_dataset(
        &runnable,
        &prepared.executor,
        &prepared.backend,
        &manifest,
        cfg.workers,
    );
    report.excluded = excluded;

    let out = &cfg.output_dir;
    let mut buf = Vec::new();
    write_jsonl(&records, &mut buf).internal()?;
    write_atomic(&out.join(RECORDS_FILE), &buf).internal()?;
    write_atomic(
        &out.join(MANIFEST_FILE),
        &ManifestFile::new(manifest).to_bytes(),
    )
    .internal()?;
    let text = report.render();
    write_atomic(&out.join(RUN_REPORT_FILE), text.as_bytes()).internal()?;
    print!("{text}");
    Ok(if report.incomplete > 0 {
        Status::PartialRun
    } else {
        Status::Success
    })
}

fn load_records(
    records_path: &Path,
    manifest: &ManifestFile,
) -> Result<Vec<InstanceRecord>, CliError> {
    let file = fs::File::open(records_path)
        .with_context(|| format!("cannot open {}", records_path.display()))
        .validation()?;
    let numbered = read_jsonl(std::io::BufReader::new(file))
        .with_context(|| format!("rejected {}", records_path.display()))
        .validation()?;
    let errors = check_records(
        &numbered,
        &manifest.digest,
        manifest.manifest.limits.comparison,
    );
    if !errors.is_empty() {
        for e in &errors {
            println!("FAIL {e}");
        }
        return Err(CliError::new(
            Status::ValidationFailure,
            anyhow!("{} record(s) violate invariants", errors.len()),
        ));
    }
    Ok(numbered.into_iter().map(|(_, r)| r).collect())
}

fn compute(
    records_path: &Path,
    manifest_path: &Path,
    baseline_trials: u32,
) -> Result<(ManifestFile, Report), CliError> {
    let manifest = ManifestFile::read(manifest_path).validation()?;
    let records = load_records(records_path, &manifest)?;
    let opts = SummaryOptions {
        baseline_trials,
        seed: manifest.manifest.seed,
    };
    let report = summarize(
        &records,
        &manifest.manifest.methods,
        &manifest.manifest.model,
        &manifest.digest,
        opts,
    )
    .validation()?;
    Ok((manifest, report))
}

fn write_report(report: &Report, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut summary = serde_json::to_vec_pretty(&report.summary)?;
    summary.push(b'\n');
    let path = out.join(SUMMARY_FILE);
    write_atomic(&path, &summary)?;
    written.push(path);
    for curve in &report.curves {
        let mut buf = Vec::new();
        write_curve_csv(curve, &mut buf)?;
        let path =
            out.join(CURVES_DIR)
                .join(format!("{}_{}.csv", curve.method.code(), curve.kind.name()));
        write_atomic(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}

fn default_manifest(records: &Path) -> PathBuf {
    records
        .parent()
        .unwrap_or(Path::new("."))
        .join(MANIFEST_FILE)
}

pub fn metrics(
    records: &Path,
    manifest: Option<&Path>,
    out: Option<&Path>,
    baseline_trials: u32,
) -> CliResult {
    let manifest_path = manifest
        .map(Path::to_path_buf)
        .unwrap_or_else(|| default_manifest(records));
    let (_, report) = compute(records, &manifest_path, baseline_trials)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| records.parent().unwrap_or(Path::new(".")).to_path_buf());
    for path in write_report(&report, &out).internal()? {
        println!("wrote {}", path.display());
    }
    Ok(Status::Success)
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

/// Human-readable digest of a summary.
pub fn render_summary(report: &Report) -> String {
    let s = &report.summary;
    let mut out = format!(
        "manifest: {}\nmodel: {}\ncomplete: {}  incomplete: {}\nEX_none: {}  EX_full: {}  delta_full: {}\n\n",
        s.manifest_digest,
        s.model,
        s.n,
        s.n_incomplete,
        fmt(s.ex_none),
        fmt(s.ex_full),
        fmt(s.delta_full)
    );
    out.push_str("method  n  unscorable  AUDBC   random(mean)\n");
    for (m, ms) in &s.methods {
        out.push_str(&format!(
            "{:<6}  {}  {}  {}  {}\n",
            m.code(),
            ms.n,
            ms.n_unscorable,
            fmt(ms.audbc),
            fmt(ms.random_baseline.map(|b| b.mean))
        ));
    }
    out
}

pub fn report(run_dir: &Path, out: Option<&Path>, baseline_trials: u32) -> CliResult {
    let records = run_dir.join(RECORDS_FILE);
    let manifest_path = run_dir.join(MANIFEST_FILE);
    let (manifest, report) = compute(&records, &manifest_path, baseline_trials)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("report"));
    write_report(&report, &out).internal()?;
    write_atomic(&out.join(MANIFEST_FILE), &manifest.to_bytes()).internal()?;
    let run_report = run_dir.join(RUN_REPORT_FILE);
    if run_report.is_file() {
        let bytes = fs::read(&run_report).internal()?;
        write_atomic(&out.join(RUN_REPORT_FILE), &bytes).internal()?;
    }
    let text = render_summary(&report);
    write_atomic(&out.join(REPORT_FILE), text.as_bytes()).internal()?;
    print!("{text}");
    println!("report bundle: {}", out.display());
    Ok(Status::Success)
}
