//! Nested feature configurations: the 15-feature clinical baseline plus ten
//! increments of five irrelevant features each.
//!
//! Each patient gets one uniformly random permutation of the 50-feature
//! irrelevant pool (stream `patient/{id}/batch-permutation`), shared across
//! all models, prompts, and repetitions. Batches are the consecutive
//! 5-feature chunks of that permutation, so configurations are nested by
//! construction and t = 10 exhausts the pool.

use crate::catalog::FeatureCatalog;
use crate::cohort::PatientProfile;
use crate::error::{AuditError, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub const BATCH_SIZE: usize = 5;
pub const MAX_LEVEL: u8 = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfiguration {
    pub patient_id: u32,
    /// perturbation level, 0..=10
    pub t: u8,
    /// clinical features first (catalog order), then irrelevant features in
    /// batch-insertion order
    pub visible_features: Vec<String>,
    pub selection_seed: String,
}

/// Build the 11 nested configurations for one patient.
pub fn build_configurations(
    patient: &PatientProfile,
    catalog: &FeatureCatalog,
    master_seed: u64,
) -> Vec<FeatureConfiguration> {
    let clinical: Vec<String> = catalog.clinical().map(|f| f.id.clone()).collect();
    let mut pool: Vec<String> = catalog.irrelevant().map(|f| f.id.clone()).collect();

    let label = rng::permutation_label(patient.patient_id);
    let mut stream = rng::stream(master_seed, &label);
    pool.shuffle(&mut stream);

    (0..=MAX_LEVEL)
        .map(|t| {
            let mut visible = clinical.clone();
            visible.extend(pool.iter().take(BATCH_SIZE * t as usize).cloned());
            FeatureConfiguration {
                patient_id: patient.patient_id,
                t,
                visible_features: visible,
                selection_seed: format!("master:{master_seed}/{label}"),
            }
        })
        .collect()
}

/// Render a configuration as ordered `(display_name, value)` lines, with
/// units for continuous features and yes/no for booleans.
pub fn configuration_payload(
    config: &FeatureConfiguration,
    patient: &PatientProfile,
    catalog: &FeatureCatalog,
) -> Result<Vec<(String, String)>> {
    config
        .visible_features
        .iter()
        .map(|id| {
            let def = catalog
                .get(id)
                .ok_or_else(|| AuditError::Consistency(format!("feature `{id}` not in catalog")))?;
            let value = patient.value(id).ok_or_else(|| {
                AuditError::Consistency(format!(
                    "feature `{id}` not present on patient {}",
                    patient.patient_id
                ))
            })?;
            let mut rendered = value.render_bare(def.decimals.unwrap_or(1));
            if let Some(units) = &def.units {
                rendered.push(' ');
                rendered.push_str(units);
            }
            Ok((def.display_name.clone(), rendered))
        })
        .collect()
}

/// A payload as prompt text, one `Name: value` line per feature.
pub fn payload_text(payload: &[(String, String)]) -> String {
    payload
        .iter()
        .map(|(name, value)| format!("{name}: {value}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// JSONL manifest of every configuration of a cohort, for pre-run audit.
pub fn configurations_to_jsonl(configs: &[FeatureConfiguration]) -> Result<String> {
    let mut out = String::new();
    for c in configs {
        out.push_str(&serde_json::to_string(c)?);
        out.push('\n');
    }
    Ok(out)
}
