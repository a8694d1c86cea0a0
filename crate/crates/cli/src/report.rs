//! Peak-deceleration comparison between advised and unguided runs.

use std::collections::BTreeMap;

use redlight_core::sim::EngineKind;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("no unguided run pairs with the advisory run {scenario} seed {seed}")]
    MissingUnguided { scenario: String, seed: u64 },
    #[error("no advisory run pairs with the unguided run {scenario} seed {seed}")]
    MissingAdvisory { scenario: String, seed: u64 },
    #[error("duplicate {engine} run for {scenario} seed {seed}")]
    Duplicate { scenario: String, seed: u64, engine: &'static str },
    #[error("unguided peak deceleration is zero for {scenario} seed {seed}")]
    ZeroBaseline { scenario: String, seed: u64 },
    #[error("no advisory/unguided pairs to compare")]
    Empty,
}

/// Peak deceleration of one run, as read back from its metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeakRecord {
    pub scenario: String,
    pub seed: u64,
    pub engine: EngineKind,
    pub peak_decel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReduction {
    pub scenario: String,
    pub seed: u64,
    pub advisory_peak: f64,
    pub unguided_peak: f64,
    /// Fractional reduction, 0.5 for a halved peak.
    pub reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub pairs: Vec<PairReduction>,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

pub fn reduction(advisory_peak: f64, unguided_peak: f64) -> f64 {
    (unguided_peak - advisory_peak) / unguided_peak
}

/// Pairs advisory and unguided records by scenario and seed. Baseline
/// records are ignored; every advisory or unguided record must have a
/// partner.
pub fn compare_report(records: &[PeakRecord]) -> Result<ReductionReport, ReportError> {
    let mut advisory: BTreeMap<(String, u64), f64> = BTreeMap::new();
    let mut unguided: BTreeMap<(String, u64), f64> = BTreeMap::new();
    for r in records {
        let table = match r.engine {
            EngineKind::Advisory => &mut advisory,
            EngineKind::None => &mut unguided,
            EngineKind::Baseline => continue,
        };
        if table.insert((r.scenario.clone(), r.seed), r.peak_decel).is_some() {
            return Err(ReportError::Duplicate { scenario: r.scenario.clone(), seed: r.seed, engine: r.engine.as_str() });
        }
    }
    if let Some((scenario, seed)) = unguided.keys().find(|k| !advisory.contains_key(*k)) {
        return Err(ReportError::MissingAdvisory { scenario: scenario.clone(), seed: *seed });
    }
    let mut pairs = Vec::with_capacity(advisory.len());
    for ((scenario, seed), &a) in &advisory {
        let Some(&u) = unguided.get(&(scenario.clone(), *seed)) else {
            return Err(ReportError::MissingUnguided { scenario: scenario.clone(), seed: *seed });
        };
        if u == 0.0 {
            return Err(ReportError::ZeroBaseline { scenario: scenario.clone(), seed: *seed });
        }
        pairs.push(PairReduction { scenario: scenario.clone(), seed: *seed, advisory_peak: a, unguided_peak: u, reduction: reduction(a, u) });
    }
    if pairs.is_empty() {
        return Err(ReportError::Empty);
    }
    let values = pairs.iter().map(|p| p.reduction);
    let mean = values.clone().sum::<f64>() / pairs.len() as f64;
    let min = values.clone().fold(f64::INFINITY, f64::min);
    let max = values.fold(f64::NEG_INFINITY, f64::max);
    Ok(ReductionReport { pairs, mean, min, max })
}

pub fn format_report(r: &ReductionReport) -> String {
    let mut out = String::from("scenario,seed,advisory_peak,unguided_peak,reduction_pct\n");
    for p in &r.pairs {
        out.push_str(&format!("{},{},{:.4},{:.4},{:.1}\n", p.scenario, p.seed, p.advisory_peak, p.unguided_peak, 100.0 * p.reduction));
    }
    out.push_str(&format!(
        "# {} pairs: mean {:.1} %, min {:.1} %, max {:.1} %\n",
        r.pairs.len(),
        100.0 * r.mean,
        100.0 * r.min,
        100.0 * r.max
    ));
    out
}
