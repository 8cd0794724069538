//! Run configuration: declarative file, flag overrides, and a canonical
//! digest that pins every field of a run.

use riskaudit_core::error::{AuditError, Result};
use riskaudit_core::parsing::RiskScale;
use riskaudit_core::perturbation::{BATCH_SIZE, MAX_LEVEL};
use riskaudit_core::prompting::PromptStyle;
use riskaudit_core::provider::ModelTarget;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Default per-call price used by the plan-stage cost estimate, in USD.
pub const DEFAULT_PRICE_PER_CALL_USD: f64 = 0.002;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditConfig {
    pub master_seed: u64,
    /// cohort size n
    pub patients: u32,
    pub models: Vec<ModelTarget>,
    pub prompts: Vec<PromptStyle>,
    /// maximum perturbation level T; levels run 0..=T
    pub levels: u8,
    /// repetitions S per cell
    pub reps: u8,
    pub batch_size: usize,
    pub scale: RiskScale,
    pub base_url: String,
    pub requests_per_second: f64,
    pub concurrency: usize,
    pub price_per_call_usd: f64,
}

impl Default for AuditConfig {
    /// The full factorial design: 4 models × 4 prompts × 50 patients ×
    /// 11 levels × 5 reps = 44,000 cells.
    fn default() -> Self {
        AuditConfig {
            master_seed: 42,
            patients: 50,
            models: ModelTarget::defaults(),
            prompts: PromptStyle::ALL.to_vec(),
            levels: MAX_LEVEL,
            reps: 5,
            batch_size: BATCH_SIZE,
            scale: RiskScale::default(),
            base_url: riskaudit_core::provider::DEFAULT_BASE_URL.to_string(),
            requests_per_second: 4.0,
            concurrency: 8,
            price_per_call_usd: DEFAULT_PRICE_PER_CALL_USD,
        }
    }
}

impl AuditConfig {
    /// Desk-scale preset: 2 models × 4 prompts × 10 patients × 11 levels ×
    /// 2 reps = 1,760 cells.
    pub fn desk_preset() -> Self {
        AuditConfig {
            patients: 10,
            models: ModelTarget::defaults().into_iter().take(2).collect(),
            reps: 2,
            ..AuditConfig::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: AuditConfig = toml::from_str(&text)
            .map_err(|e| AuditError::Config(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(AuditError::Config("reps must be at least 1".into()));
        }
        if self.patients == 0 {
            return Err(AuditError::Config("patients must be at least 1".into()));
        }
        if self.levels == 0 || self.levels > MAX_LEVEL {
            return Err(AuditError::Config(format!(
                "levels must be in 1..={MAX_LEVEL}"
            )));
        }
        if self.models.is_empty() {
            return Err(AuditError::Config("models list is empty".into()));
        }
        if self.prompts.is_empty() {
            return Err(AuditError::Config("prompts list is empty".into()));
        }
        if self.batch_size != BATCH_SIZE {
            return Err(AuditError::Config(format!(
                "batch_size is fixed at {BATCH_SIZE} by the perturbation lattice"
            )));
        }
        self.scale.validate()?;
        Ok(())
    }

    /// Total planned cells: models × prompts × patients × (levels + 1) × reps.
    pub fn cell_count(&self) -> u64 {
        self.models.len() as u64
            * self.prompts.len() as u64
            * self.patients as u64
            * (self.levels as u64 + 1)
            * self.reps as u64
    }

    /// SHA-256 over a canonical (sorted-key) JSON rendering; independent of
    /// the key order of any source file.
    pub fn digest(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut canonical = String::new();
        write_canonical(&value, &mut canonical);
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex::encode(hasher.finalize())
    }
}

fn write_canonical(value: &serde_json::Value, out: &mut String) {
    match value {
        serde_json::Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("string key"));
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
        serde_json::Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        other => out.push_str(&other.to_string()),
    }
}
