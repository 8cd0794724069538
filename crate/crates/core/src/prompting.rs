//! Rhetorical prompt variants around a configuration payload.
//!
//! Four frozen, version-stamped templates: neutral (the reference), logical,
//! human impact, and clinical judgment. The logical and clinical-judgment
//! variants additionally require per-feature contributions to sum exactly to
//! the emitted score.

use crate::error::{AuditError, Result};
use crate::parsing::RiskScale;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const TEMPLATE_VERSION: &str = "1.0.0";

const TEMPLATE_NEUTRAL: &str = include_str!("../templates/prompt_neutral.txt");
const TEMPLATE_LOGICAL: &str = include_str!("../templates/prompt_logical.txt");
const TEMPLATE_HUMAN_IMPACT: &str = include_str!("../templates/prompt_human_impact.txt");
const TEMPLATE_CLINICAL_JUDGMENT: &str = include_str!("../templates/prompt_clinical_judgment.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    Neutral,
    Logical,
    HumanImpact,
    ClinicalJudgment,
}

impl PromptStyle {
    pub const ALL: [PromptStyle; 4] = [
        PromptStyle::Neutral,
        PromptStyle::Logical,
        PromptStyle::HumanImpact,
        PromptStyle::ClinicalJudgment,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            PromptStyle::Neutral => "neutral",
            PromptStyle::Logical => "logical",
            PromptStyle::HumanImpact => "human_impact",
            PromptStyle::ClinicalJudgment => "clinical_judgment",
        }
    }

    /// Display label used in reports.
    pub fn label(&self) -> &'static str {
        match self {
            PromptStyle::Neutral => "Neutral",
            PromptStyle::Logical => "Logical",
            PromptStyle::HumanImpact => "Human Impact",
            PromptStyle::ClinicalJudgment => "Clinical Judgement",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        PromptStyle::ALL
            .into_iter()
            .find(|style| style.key() == s)
            .ok_or_else(|| AuditError::UnknownStyle(s.to_string()))
    }

    /// True when the template instructs contributions to sum exactly to the
    /// score.
    pub fn requires_sum_constraint(&self) -> bool {
        matches!(self, PromptStyle::Logical | PromptStyle::ClinicalJudgment)
    }

    fn template(&self) -> &'static str {
        match self {
            PromptStyle::Neutral => TEMPLATE_NEUTRAL,
            PromptStyle::Logical => TEMPLATE_LOGICAL,
            PromptStyle::HumanImpact => TEMPLATE_HUMAN_IMPACT,
            PromptStyle::ClinicalJudgment => TEMPLATE_CLINICAL_JUDGMENT,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptSpec {
    pub style: PromptStyle,
    pub template_version: String,
    pub rendered_text: String,
    pub requires_sum_constraint: bool,
    pub response_schema_clause: String,
    pub scale: RiskScale,
}

fn format_bound(v: f64, decimals: u8) -> String {
    format!("{:.*}", decimals as usize, v)
}

/// Render a prompt for one configuration payload. Deterministic: identical
/// inputs produce byte-identical text.
pub fn render_prompt(style: PromptStyle, payload_text: &str, scale: &RiskScale) -> Result<PromptSpec> {
    if payload_text.is_empty() {
        return Err(AuditError::Consistency("empty payload".to_string()));
    }
    let min = format_bound(scale.min, scale.decimals);
    let max = format_bound(scale.max, scale.decimals);
    let rendered = style
        .template()
        .replace("{{payload}}", payload_text)
        .replace("{{scale_min}}", &min)
        .replace("{{scale_max}}", &max)
        .replace("{{decimals}}", &scale.decimals.to_string());

    let schema_clause = rendered
        .split("```")
        .nth(1)
        .map(|s| s.trim().to_string())
        .unwrap_or_default();

    Ok(PromptSpec {
        style,
        template_version: TEMPLATE_VERSION.to_string(),
        rendered_text: rendered,
        requires_sum_constraint: style.requires_sum_constraint(),
        response_schema_clause: schema_clause,
        scale: scale.clone(),
    })
}

/// 256-bit digest of (style, template version, rendered text, scale), used as
/// the cache key component for a generation cell.
pub fn prompt_fingerprint(spec: &PromptSpec) -> String {
    let mut hasher = Sha256::new();
    hasher.update(spec.style.key().as_bytes());
    hasher.update([0]);
    hasher.update(spec.template_version.as_bytes());
    hasher.update([0]);
    hasher.update(spec.rendered_text.as_bytes());
    hasher.update([0]);
    hasher.update(spec.scale.min.to_le_bytes());
    hasher.update(spec.scale.max.to_le_bytes());
    hasher.update([spec.scale.decimals]);
    hex::encode(hasher.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scale() -> RiskScale {
        RiskScale::default()
    }

    #[test]
    fn neutral_contains_key_instruction_and_no_sum_clause() {
        let spec = render_prompt(PromptStyle::Neutral, "Age: 43 years", &scale()).unwrap();
        assert!(spec.rendered_text.contains("Assign a numerical risk score"));
        assert!(!spec.rendered_text.contains("sum exactly"));
        assert!(!spec.requires_sum_constraint);
    }

    #[test]
    fn logical_contains_causal_instruction_and_sum_clause() {
        let spec = render_prompt(PromptStyle::Logical, "Age: 43 years", &scale()).unwrap();
        assert!(spec
            .rendered_text
            .contains("formal, logic-based approach, explicitly reflecting causal relationships"));
        assert!(spec.rendered_text.contains("contributions must sum exactly"));
        assert!(spec.requires_sum_constraint);
    }

    #[test]
    fn human_impact_contains_table_language() {
        let spec = render_prompt(PromptStyle::HumanImpact, "Age: 43 years", &scale()).unwrap();
        assert!(spec.rendered_text.contains("personal consequences"));
        assert!(spec
            .rendered_text
            .contains("greatest concern for hospitalization risk"));
        assert!(!spec.requires_sum_constraint);
    }

    #[test]
    fn clinical_judgment_contains_expert_language_and_sum_clause() {
        let spec = render_prompt(PromptStyle::ClinicalJudgment, "Age: 43 years", &scale()).unwrap();
        assert!(spec.rendered_text.contains("acting as a clinical expert"));
        assert!(spec.rendered_text.contains("professional"));
        assert!(spec.rendered_text.contains("impacts must sum exactly"));
        assert!(spec.requires_sum_constraint);
    }

    #[test]
    fn every_style_excludes_baseline_risk_and_states_bounds() {
        for style in PromptStyle::ALL {
            let spec = render_prompt(style, "Age: 43 years", &scale()).unwrap();
            let lower = spec.rendered_text.to_lowercase();
            assert!(lower.contains("baseline"), "{style:?}");
            assert!(spec.rendered_text.contains("0.0"), "{style:?}");
            assert!(spec.rendered_text.contains("10.0"), "{style:?}");
            assert!(spec.rendered_text.contains("RISK_SCORE:"), "{style:?}");
        }
    }

    #[test]
    fn payload_appears_exactly_once() {
        let payload = "Age: 43 years\nDrinks Coffee: yes";
        for style in PromptStyle::ALL {
            let spec = render_prompt(style, payload, &scale()).unwrap();
            assert_eq!(spec.rendered_text.matches(payload).count(), 1, "{style:?}");
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_prompt(PromptStyle::Neutral, "Age: 43 years", &scale()).unwrap();
        let b = render_prompt(PromptStyle::Neutral, "Age: 43 years", &scale()).unwrap();
        assert_eq!(a.rendered_text, b.rendered_text);
        assert_eq!(prompt_fingerprint(&a), prompt_fingerprint(&b));
    }

    #[test]
    fn fingerprint_separates_payloads_and_versions() {
        let a = render_prompt(PromptStyle::Neutral, "Age: 43 years", &scale()).unwrap();
        let b = render_prompt(PromptStyle::Neutral, "Age: 44 years", &scale()).unwrap();
        assert_ne!(prompt_fingerprint(&a), prompt_fingerprint(&b));

        let mut c = a.clone();
        c.template_version = "1.0.1".to_string();
        assert_ne!(prompt_fingerprint(&a), prompt_fingerprint(&c));
    }

    #[test]
    fn unknown_style_is_rejected() {
        assert!(PromptStyle::parse("sarcastic").is_err());
        assert_eq!(PromptStyle::parse("human_impact").unwrap(), PromptStyle::HumanImpact);
    }
}
