//! Mean predicted risk and instability.
//!
//! For each (model, prompt, patient, level) cell the mean risk is the
//! arithmetic mean over valid repetitions (at least 3 of S must be valid);
//! instability is the absolute deviation of a level's mean risk from the same
//! patient's baseline mean under the same model and prompt.

use crate::error::{AuditError, Result};
use crate::prompting::PromptStyle;
use crate::provider::{GenerationOutcome, GenerationRecord};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::BTreeMap;

/// Cells with fewer valid repetitions than this are marked missing at the
/// full design's S = 5; see [`required_valid_reps`] for other S.
pub const MIN_VALID_REPS: usize = 3;

/// Majority-valid rule generalized to any repetition count: a cell needs a
/// strict majority of its S repetitions, floor(S/2) + 1 (3 of 5 at full
/// scale, 2 of 2 at desk scale).
pub fn required_valid_reps(reps: u8) -> usize {
    reps as usize / 2 + 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstabilityRecord {
    pub model: String,
    pub prompt: PromptStyle,
    pub patient_id: u32,
    pub t: u8,
    pub mean_risk: f64,
    /// absolute deviation from the t = 0 cell; absent for baseline rows and
    /// when the baseline itself is missing
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    pub n_valid_reps: usize,
    /// within-cell SD over repetitions, exported for diagnostics only
    pub rep_sd: f64,
}

/// Arithmetic mean over valid repetition scores at the full design's S = 5;
/// `None` marks the cell missing under the majority-valid rule.
pub fn mean_risk(scores: &[f64]) -> Option<f64> {
    mean_risk_with(scores, MIN_VALID_REPS)
}

/// [`mean_risk`] with an explicit majority threshold (see
/// [`required_valid_reps`]).
pub fn mean_risk_with(scores: &[f64], required: usize) -> Option<f64> {
    if scores.len() < required {
        return None;
    }
    Some(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Absolute deviation from baseline.
pub fn instability(mean_t: f64, mean_baseline: f64) -> f64 {
    (mean_t - mean_baseline).abs()
}

type CellId = (String, PromptStyle, u32, u8);

/// Aggregate a ledger into per-cell instability records. Missing cells (under
/// the majority-valid rule) are dropped listwise; the returned count says how
/// many were dropped.
pub fn compute_instability(
    records: &[GenerationRecord],
    reps: u8,
) -> (Vec<InstabilityRecord>, usize) {
    let required = required_valid_reps(reps);
    let mut cells: BTreeMap<CellId, Vec<f64>> = BTreeMap::new();
    for r in records {
        let scores = cells
            .entry((r.model.clone(), r.style, r.patient_id, r.t))
            .or_default();
        if r.outcome == GenerationOutcome::Ok {
            if let Some(parsed) = &r.parsed {
                scores.push(parsed.score);
            }
        }
    }

    let mut dropped = 0usize;
    let mut means: BTreeMap<CellId, (f64, usize, f64)> = BTreeMap::new();
    for (id, scores) in &cells {
        match mean_risk_with(scores, required) {
            Some(mean) => {
                let sd = if scores.len() > 1 {
                    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>()
                        / (scores.len() - 1) as f64;
                    var.sqrt()
                } else {
                    0.0
                };
                means.insert(id.clone(), (mean, scores.len(), sd));
            }
            None => dropped += 1,
        }
    }

    let mut out = Vec::with_capacity(means.len());
    for ((model, prompt, patient, t), (mean, n, sd)) in &means {
        let delta = if *t == 0 {
            None
        } else {
            means
                .get(&(model.clone(), *prompt, *patient, 0))
                .map(|(baseline, _, _)| instability(*mean, *baseline))
        };
        out.push(InstabilityRecord {
            model: model.clone(),
            prompt: *prompt,
            patient_id: *patient,
            t: *t,
            mean_risk: *mean,
            delta,
            n_valid_reps: *n,
            rep_sd: *sd,
        });
    }
    (out, dropped)
}

/// Mean instability with 95% CI per (model, prompt, level), over patients.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurvePoint {
    pub model: String,
    pub prompt: PromptStyle,
    pub t: u8,
    pub mean_delta: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_low: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_high: Option<f64>,
    pub n_patients: usize,
}

/// CI = mean +/- t(0.975, n-1) * SE over per-patient deltas; absent when
/// fewer than two patients contribute.
pub fn aggregate_curves(records: &[InstabilityRecord]) -> Vec<CurvePoint> {
    let mut groups: BTreeMap<(String, PromptStyle, u8), Vec<f64>> = BTreeMap::new();
    for r in records {
        if let Some(delta) = r.delta {
            groups
                .entry((r.model.clone(), r.prompt, r.t))
                .or_default()
                .push(delta);
        }
    }

    groups
        .into_iter()
        .map(|((model, prompt, t), deltas)| {
            let n = deltas.len();
            let mean = deltas.iter().sum::<f64>() / n as f64;
            let (ci_low, ci_high) = if n >= 2 {
                let var =
                    deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
                let se = (var / n as f64).sqrt();
                let tq = StudentsT::new(0.0, 1.0, (n - 1) as f64)
                    .expect("valid df")
                    .inverse_cdf(0.975);
                (Some(mean - tq * se), Some(mean + tq * se))
            } else {
                (None, None)
            };
            CurvePoint {
                model,
                prompt,
                t,
                mean_delta: mean,
                ci_low,
                ci_high,
                n_patients: n,
            }
        })
        .collect()
}

/// Instability table as CSV.
pub fn instability_to_csv(records: &[InstabilityRecord]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["model", "prompt", "patient", "t", "mean_risk", "delta", "n_valid_reps", "rep_sd"])
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    for r in records {
        wtr.write_record([
            r.model.clone(),
            r.prompt.key().to_string(),
            r.patient_id.to_string(),
            r.t.to_string(),
            format!("{:.6}", r.mean_risk),
            r.delta.map(|d| format!("{d:.6}")).unwrap_or_default(),
            r.n_valid_reps.to_string(),
            format!("{:.6}", r.rep_sd),
        ])
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| AuditError::Ledger(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Curve table as CSV.
pub fn curves_to_csv(points: &[CurvePoint]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["model", "prompt", "t", "mean_delta", "ci_low", "ci_high", "n_patients"])
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    for p in points {
        wtr.write_record([
            p.model.clone(),
            p.prompt.key().to_string(),
            p.t.to_string(),
            format!("{:.6}", p.mean_delta),
            p.ci_low.map(|v| format!("{v:.6}")).unwrap_or_default(),
            p.ci_high.map(|v| format!("{v:.6}")).unwrap_or_default(),
            p.n_patients.to_string(),
        ])
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    }
    let bytes = wtr.into_inner().map_err(|e| AuditError::Ledger(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
