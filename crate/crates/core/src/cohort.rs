//! Synthetic patient cohort sampling.
//!
//! Each feature of each patient is drawn from its own RNG substream
//! (`patient/{id}/feature/{feature_id}`), so adding a patient or a feature
//! never perturbs any other draw and the whole cohort is reproducible
//! bit-for-bit from `(catalog, n, master_seed)`.

use crate::catalog::{Condition, FeatureCatalog, FeatureDef, FeatureKind, Sampling};
use crate::error::{AuditError, Result};
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Flag(bool),
    Number(f64),
    Category(String),
}

impl FeatureValue {
    pub fn as_number(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_category(&self) -> Option<&str> {
        match self {
            FeatureValue::Category(s) => Some(s),
            _ => None,
        }
    }

    /// Human-readable form without units: booleans render as yes/no.
    pub fn render_bare(&self, decimals: u8) -> String {
        match self {
            FeatureValue::Flag(true) => "yes".to_string(),
            FeatureValue::Flag(false) => "no".to_string(),
            FeatureValue::Number(v) => format!("{:.*}", decimals as usize, v),
            FeatureValue::Category(s) => s.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PatientProfile {
    pub patient_id: u32,
    /// feature id -> sampled value, covering every catalog feature
    pub values: BTreeMap<String, FeatureValue>,
    /// RNG substream prefix used to produce this profile
    pub seed_trace: String,
}

impl PatientProfile {
    pub fn value(&self, feature_id: &str) -> Option<&FeatureValue> {
        self.values.get(feature_id)
    }
}

fn round_to(v: f64, decimals: u8) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (v * scale).round() / scale
}

fn condition_holds(cond: &Condition, sampled: &BTreeMap<String, FeatureValue>) -> bool {
    let Some(value) = sampled.get(&cond.feature) else {
        return false;
    };
    if let Some(expected) = &cond.equals {
        let matches = match value {
            FeatureValue::Category(s) => s == expected,
            FeatureValue::Flag(b) => (*b && expected == "yes") || (!*b && expected == "no"),
            FeatureValue::Number(_) => false,
        };
        if !matches {
            return false;
        }
    }
    if let Some(bound) = cond.below {
        match value.as_number() {
            Some(v) if v < bound => {}
            _ => return false,
        }
    }
    if let Some(bound) = cond.at_least {
        match value.as_number() {
            Some(v) if v >= bound => {}
            _ => return false,
        }
    }
    true
}

fn sample_feature(
    def: &FeatureDef,
    sampled: &BTreeMap<String, FeatureValue>,
    master_seed: u64,
    patient_id: u32,
) -> FeatureValue {
    let mut rng = rng::stream(master_seed, &rng::feature_label(patient_id, &def.id));
    match &def.sampling {
        Sampling::ClippedNormal { mean, sd } => {
            let dom = def.domain.as_ref().expect("validated");
            let raw = mean + sd * rng::standard_normal(&mut rng);
            FeatureValue::Number(round_to(raw.clamp(dom.min, dom.max), def.decimals.unwrap_or(1)))
        }
        Sampling::Uniform => {
            let dom = def.domain.as_ref().expect("validated");
            let u: f64 = rng.gen();
            FeatureValue::Number(round_to(
                dom.min + u * (dom.max - dom.min),
                def.decimals.unwrap_or(1),
            ))
        }
        Sampling::Categorical { probs, rules } => {
            let probs = rules
                .iter()
                .find(|r| condition_holds(&r.when, sampled))
                .map(|r| r.probs.as_slice())
                .unwrap_or(probs.as_slice());
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = def.categories.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            FeatureValue::Category(def.categories[idx].clone())
        }
        Sampling::Boolean { p_true, rules } => {
            let p = rules
                .iter()
                .find(|r| condition_holds(&r.when, sampled))
                .map(|r| r.p_true)
                .unwrap_or(*p_true);
            let u: f64 = rng.gen();
            FeatureValue::Flag(u < p)
        }
    }
}

/// Sample one patient. Deterministic given `(catalog, master_seed, patient_id)`.
pub fn sample_patient(catalog: &FeatureCatalog, master_seed: u64, patient_id: u32) -> PatientProfile {
    let mut values = BTreeMap::new();
    for def in catalog.features() {
        let value = sample_feature(def, &values, master_seed, patient_id);
        values.insert(def.id.clone(), value);
    }
    PatientProfile {
        patient_id,
        values,
        seed_trace: format!("master:{master_seed}/patient:{patient_id}"),
    }
}

/// Sample `n` patients with ids `0..n`.
pub fn sample_cohort(catalog: &FeatureCatalog, n: u32, master_seed: u64) -> Vec<PatientProfile> {
    (0..n).map(|id| sample_patient(catalog, master_seed, id)).collect()
}

/// One summary row, mirroring the cohort characteristic tables: continuous
/// features get mean/SD/median/IQR/range, categorical features get counts and
/// the modal category.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub feature_id: String,
    pub display_name: String,
    pub kind: FeatureKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sd: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub q3: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_categories: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modal_category: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub modal_percent: Option<f64>,
    /// category -> count, empty for continuous features
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortSummary {
    pub n: usize,
    pub rows: Vec<SummaryRow>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    // linear interpolation between order statistics
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Per-clinical-feature summary of a cohort.
pub fn cohort_summary(catalog: &FeatureCatalog, profiles: &[PatientProfile]) -> Result<CohortSummary> {
    if profiles.is_empty() {
        return Err(AuditError::EmptyCohort(
            "cohort_summary requires at least one patient".to_string(),
        ));
    }
    let mut rows = Vec::new();
    for def in catalog.clinical() {
        let mut row = SummaryRow {
            feature_id: def.id.clone(),
            display_name: def.display_name.clone(),
            kind: def.kind,
            mean: None,
            sd: None,
            median: None,
            q1: None,
            q3: None,
            min: None,
            max: None,
            n_categories: None,
            modal_category: None,
            modal_percent: None,
            counts: BTreeMap::new(),
        };
        match def.kind {
            FeatureKind::Continuous => {
                let mut xs: Vec<f64> = profiles
                    .iter()
                    .filter_map(|p| p.value(&def.id).and_then(FeatureValue::as_number))
                    .collect();
                xs.sort_by(|a, b| a.total_cmp(b));
                let n = xs.len() as f64;
                let mean = xs.iter().sum::<f64>() / n;
                let var = if xs.len() > 1 {
                    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                row.mean = Some(mean);
                row.sd = Some(var.sqrt());
                row.median = Some(quantile(&xs, 0.5));
                row.q1 = Some(quantile(&xs, 0.25));
                row.q3 = Some(quantile(&xs, 0.75));
                row.min = xs.first().copied();
                row.max = xs.last().copied();
            }
            FeatureKind::Categorical | FeatureKind::Boolean => {
                for p in profiles {
                    if let Some(v) = p.value(&def.id) {
                        *row.counts.entry(v.render_bare(0)).or_insert(0) += 1;
                    }
                }
                row.n_categories = Some(if def.kind == FeatureKind::Boolean {
                    2
                } else {
                    def.categories.len()
                });
                if let Some((cat, count)) = row
                    .counts
                    .iter()
                    .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                {
                    row.modal_category = Some(cat.clone());
                    row.modal_percent = Some(100.0 * *count as f64 / profiles.len() as f64);
                }
            }
        }
        rows.push(row);
    }
    Ok(CohortSummary {
        n: profiles.len(),
        rows,
    })
}

/// Cohort as CSV: one row per patient, one column per feature in catalog order.
pub fn cohort_to_csv(catalog: &FeatureCatalog, profiles: &[PatientProfile]) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["patient_id".to_string()];
    header.extend(catalog.features().iter().map(|f| f.id.clone()));
    wtr.write_record(&header)
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    for p in profiles {
        let mut record = vec![p.patient_id.to_string()];
        for def in catalog.features() {
            let v = p.value(&def.id).ok_or_else(|| {
                AuditError::Consistency(format!(
                    "patient {} missing feature `{}`",
                    p.patient_id, def.id
                ))
            })?;
            record.push(v.render_bare(def.decimals.unwrap_or(1)));
        }
        wtr.write_record(&record)
            .map_err(|e| AuditError::Ledger(e.to_string()))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Cohort as canonical JSON (feature ids sorted within each patient).
pub fn cohort_to_json(profiles: &[PatientProfile]) -> Result<String> {
    Ok(serde_json::to_string_pretty(profiles)?)
}

/// Summary table as CSV, one row per clinical feature.
pub fn summary_to_csv(summary: &CohortSummary) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record([
        "feature",
        "kind",
        "mean",
        "sd",
        "median",
        "q1",
        "q3",
        "min",
        "max",
        "n_categories",
        "modal_category",
        "modal_percent",
    ])
    .map_err(|e| AuditError::Ledger(e.to_string()))?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_default();
    for row in &summary.rows {
        wtr.write_record([
            row.display_name.clone(),
            format!("{:?}", row.kind).to_lowercase(),
            fmt(row.mean),
            fmt(row.sd),
            fmt(row.median),
            fmt(row.q1),
            fmt(row.q3),
            fmt(row.min),
            fmt(row.max),
            row.n_categories.map(|c| c.to_string()).unwrap_or_default(),
            row.modal_category.clone().unwrap_or_default(),
            fmt(row.modal_percent),
        ])
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    }
    let bytes = wtr
        .into_inner()
        .map_err(|e| AuditError::Ledger(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Check every declared incompatibility: currently Age < 22 with Employment =
/// Retired. Returns offending patient ids.
pub fn consistency_violations(profiles: &[PatientProfile]) -> Vec<u32> {
    profiles
        .iter()
        .filter(|p| {
            let young = p
                .value("age")
                .and_then(FeatureValue::as_number)
                .map(|a| a < 22.0)
                .unwrap_or(false);
            let retired = p
                .value("employment")
                .and_then(FeatureValue::as_category)
                .map(|e| e == "Retired")
                .unwrap_or(false);
            young && retired
        })
        .map(|p| p.patient_id)
        .collect()
}
