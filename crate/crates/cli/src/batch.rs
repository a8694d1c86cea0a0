//! Manifest-driven batch runs writing one trace and one metrics file per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use redlight_core::sim::{run_scenario, trace_to_csv, DriverPolicy, EngineKind, RunMetrics, ScenarioConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> BatchError + '_ {
    move |source| BatchError::Io { path: path.to_path_buf(), source }
}

/// Inclusive seed range written `a..b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SeedRange {
    pub first: u64,
    pub last: u64,
}

impl SeedRange {
    pub fn seeds(self) -> impl Iterator<Item = u64> {
        self.first..=self.last
    }

    pub fn len(self) -> u64 {
        self.last - self.first + 1
    }
}

impl std::str::FromStr for SeedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (a, b) = s.split_once("..").ok_or_else(|| format!("seed range {s:?} is not of the form a..b"))?;
        let first: u64 = a.trim().parse().map_err(|_| format!("bad seed {a:?}"))?;
        let last: u64 = b.trim().parse().map_err(|_| format!("bad seed {b:?}"))?;
        if last < first {
            return Err(format!("seed range {s:?} is empty"));
        }
        Ok(Self { first, last })
    }
}

impl TryFrom<String> for SeedRange {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SeedRange> for String {
    fn from(r: SeedRange) -> String {
        format!("{}..{}", r.first, r.last)
    }
}

fn all_engines() -> Vec<EngineKind> {
    EngineKind::ALL.to_vec()
}

fn one() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Scenario files, relative to the manifest's directory.
    pub scenarios: Vec<PathBuf>,
    #[serde(default = "all_engines")]
    pub engines: Vec<EngineKind>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub seeds: Option<SeedRange>,
    /// Number of seeds `0..repeat` used when no range is given.
    #[serde(default = "one")]
    pub repeat: u64,
    /// Apply the scenario's seeded perturbation; otherwise the seed only
    /// drives observation noise.
    #[serde(default = "yes")]
    pub perturb: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, BatchError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| BatchError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn seed_list(&self) -> Result<Vec<u64>, BatchError> {
        match self.seeds {
            Some(r) if self.repeat != 1 && self.repeat != r.len() => {
                Err(BatchError::Usage(format!("seed range {} has {} seeds but repeat is {}", String::from(r), r.len(), self.repeat)))
            }
            Some(r) => Ok(r.seeds().collect()),
            None if self.repeat == 0 => Err(BatchError::Usage("repeat must be at least 1".into())),
            None => Ok((0..self.repeat).collect()),
        }
    }
}

/// Metrics file contents: the run's metrics plus where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub scenario: String,
    pub file: PathBuf,
    pub driver_policy: DriverPolicy,
    pub metrics: RunMetrics,
}

impl RunRecord {
    /// A compliant driver following the advisory ran the red light.
    pub fn gate_violation(&self) -> bool {
        self.metrics.engine == EngineKind::Advisory && self.driver_policy == DriverPolicy::Compliant && self.metrics.red_violation
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntryFailure {
    pub file: PathBuf,
    pub seed: Option<u64>,
    pub engine: Option<EngineKind>,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub seed: u64,
    pub peak_decel: BTreeMap<String, f64>,
    pub red_violation: BTreeMap<String, bool>,
    pub min_spacing: BTreeMap<String, f64>,
    /// Fractional peak-deceleration reduction of advisory against unguided.
    pub reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub rows: Vec<SummaryRow>,
    pub failures: Vec<EntryFailure>,
    pub gate_violations: Vec<String>,
    pub out_dir: PathBuf,
}

pub fn run_label(scenario: &str, engine: EngineKind, seed: u64) -> String {
    format!("{scenario}__{}__seed{seed}", engine.as_str())
}

fn scenario_label(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

pub fn run_batch(manifest: &RunManifest, base_dir: &Path, out_dir: &Path) -> Result<BatchSummary, BatchError> {
    if manifest.scenarios.is_empty() {
        return Err(BatchError::Usage("manifest lists no scenarios".into()));
    }
    if manifest.engines.is_empty() {
        return Err(BatchError::Usage("manifest selects no engines".into()));
    }
    let seeds = manifest.seed_list()?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut failures = Vec::new();
    let mut scenarios = Vec::new();
    for rel in &manifest.scenarios {
        let path = base_dir.join(rel);
        let loaded = fs::read_to_string(&path).map_err(|e| e.to_string()).and_then(|t| ScenarioConfig::from_json(&t).map_err(|e| e.to_string()));
        match loaded {
            Ok(cfg) => scenarios.push((scenario_label(rel), rel.clone(), cfg)),
            Err(error) => {
                warn!(file = %path.display(), %error, "skipping scenario");
                failures.push(EntryFailure { file: rel.clone(), seed: None, engine: None, error });
            }
        }
    }

    let jobs: Vec<(usize, u64, EngineKind)> = (0..scenarios.len())
        .flat_map(|i| seeds.iter().flat_map(move |&s| manifest.engines.iter().map(move |&e| (i, s, e))))
        .collect();
    let results: Vec<Result<RunRecord, EntryFailure>> = jobs
        .par_iter()
        .map(|&(i, seed, engine)| {
            let (label, file, base) = &scenarios[i];
            let cfg = if manifest.perturb { base.variant(seed) } else { ScenarioConfig { rng_seed: seed, ..base.clone() } };
            let fail = |error: String| EntryFailure { file: file.clone(), seed: Some(seed), engine: Some(engine), error };
            let out = run_scenario(&cfg, engine).map_err(|e| fail(e.to_string()))?;
            let record = RunRecord { scenario: label.clone(), file: file.clone(), driver_policy: cfg.driver_policy, metrics: out.metrics };
            let stem = out_dir.join(run_label(label, engine, seed));
            let trace_path = stem.with_extension("trace.csv");
            fs::write(&trace_path, trace_to_csv(&out.trace)).map_err(|e| fail(format!("{}: {e}", trace_path.display())))?;
            let metrics_path = stem.with_extension("metrics.json");
            let json = serde_json::to_string_pretty(&record).expect("metrics serialise");
            fs::write(&metrics_path, json).map_err(|e| fail(format!("{}: {e}", metrics_path.display())))?;
            info!(scenario = %label, seed, engine = engine.as_str(), peak = record.metrics.peak_decel, "run finished");
            Ok(record)
        })
        .collect();

    let mut records = Vec::new();
    for r in results {
        match r {
            Ok(rec) => records.push(rec),
            Err(f) => failures.push(f),
        }
    }
    let gate_violations = records.iter().filter(|r| r.gate_violation()).map(|r| run_label(&r.scenario, r.metrics.engine, r.metrics.seed)).collect();
    let summary = BatchSummary { rows: summarise(&records), failures, gate_violations, out_dir: out_dir.to_path_buf() };
    let path = out_dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary).expect("summary serialises")).map_err(io_err(&path))?;
    let path = out_dir.join("summary.csv");
    fs::write(&path, summary_csv(&summary.rows)).map_err(io_err(&path))?;
    Ok(summary)
}

pub fn summarise(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut rows: BTreeMap<(String, u64), SummaryRow> = BTreeMap::new();
    for r in records {
        let key = (r.scenario.clone(), r.metrics.seed);
        let row = rows.entry(key).or_insert_with(|| SummaryRow {
            scenario: r.scenario.clone(),
            seed: r.metrics.seed,
            peak_decel: BTreeMap::new(),
            red_violation: BTreeMap::new(),
            min_spacing: BTreeMap::new(),
            reduction: None,
        });
        let engine = r.metrics.engine.as_str().to_string();
        row.peak_decel.insert(engine.clone(), r.metrics.peak_decel);
        row.red_violation.insert(engine.clone(), r.metrics.red_violation);
        if let Some(s) = r.metrics.min_spacing {
            row.min_spacing.insert(engine, s);
        }
    }
    rows.into_values()
        .map(|mut row| {
            if let (Some(&a), Some(&u)) = (row.peak_decel.get("advisory"), row.peak_decel.get("none")) {
                row.reduction = (u > 0.0).then(|| crate::report::reduction(a, u));
            }
            row
        })
        .collect()
}

pub const SUMMARY_HEADER: &str = "scenario,seed,peak_advisory,peak_baseline,peak_unguided,violation_advisory,violation_baseline,violation_unguided,min_spacing_advisory,reduction_pct";

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let num = |v: Option<&f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
    let flag = |v: Option<&bool>| v.map(|b| b.to_string()).unwrap_or_default();
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.scenario,
            r.seed,
            num(r.peak_decel.get("advisory")),
            num(r.peak_decel.get("baseline")),
            num(r.peak_decel.get("none")),
            flag(r.red_violation.get("advisory")),
            flag(r.red_violation.get("baseline")),
            flag(r.red_violation.get("none")),
            num(r.min_spacing.get("advisory")),
            r.reduction.map(|x| format!("{:.1}", 100.0 * x)).unwrap_or_default(),
        ));
    }
    out
}

/// Reads every metrics file in `dir`.
pub fn load_records(dir: &Path) -> Result<Vec<RunRecord>, BatchError> {
    let mut records = Vec::new();
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        if !path.to_string_lossy().ends_with(".metrics.json") {
            continue;
        }
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let rec: RunRecord = serde_json::from_str(&text).map_err(|e| BatchError::Usage(format!("{}: {e}", path.display())))?;
        records.push(rec);
    }
    records.sort_by(|a, b| (&a.scenario, a.metrics.seed, a.metrics.engine.as_str()).cmp(&(&b.scenario, b.metrics.seed, b.metrics.engine.as_str())));
    Ok(records)
}
