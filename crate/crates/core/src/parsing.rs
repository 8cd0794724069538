//! Extraction of risk scores and per-feature attributions from raw model text.
//!
//! Structured mode parses the fenced block the prompt asks for. When no block
//! is present the fallback scans prose for a score near "risk" wording and
//! salvages attribution lines pattern-wise. Parsing is total: every raw text
//! yields either a `ParsedAssessment` or an explicit failure reason, never a
//! pipeline abort.

use crate::catalog::FeatureCatalog;
use crate::error::{AuditError, Result};
use crate::perturbation::FeatureConfiguration;
use crate::prompting::PromptSpec;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;

/// Numeric scale the model is asked to score on. Default 0-10, one decimal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScale {
    pub min: f64,
    pub max: f64,
    pub decimals: u8,
}

impl Default for RiskScale {
    fn default() -> Self {
        RiskScale {
            min: 0.0,
            max: 10.0,
            decimals: 1,
        }
    }
}

impl RiskScale {
    pub fn validate(&self) -> Result<()> {
        if self.min < self.max {
            Ok(())
        } else {
            Err(AuditError::Config(format!(
                "risk scale min {} must be below max {}",
                self.min, self.max
            )))
        }
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

/// Mild overshoot beyond the scale is clamped (LLMs overshoot bounds);
/// anything further is a parse failure.
pub const CLAMP_OVERSHOOT_FRACTION: f64 = 0.05;

/// Contribution sums further than this from the score are flagged.
pub const SUM_RESIDUAL_EPSILON: f64 = 0.05;

/// Minimum normalized similarity for an attribution name to match a feature.
pub const MATCH_THRESHOLD: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseMode {
    Structured,
    Fallback,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Attribution {
    /// matched catalog feature id, or None when unmatched
    pub feature_id: Option<String>,
    pub name_raw: String,
    pub contribution: f64,
    pub rationale: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParsedAssessment {
    pub score: f64,
    pub attributions: Vec<Attribution>,
    /// |score - sum(contributions)| when the sum constraint applies
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sum_residual: Option<f64>,
    /// residual exceeded `SUM_RESIDUAL_EPSILON`
    pub sum_flagged: bool,
    pub parse_mode: ParseMode,
    /// score was out of range and clamped to the scale boundary
    pub clamped: bool,
}

impl ParsedAssessment {
    pub fn unmatched_count(&self) -> usize {
        self.attributions.iter().filter(|a| a.feature_id.is_none()).count()
    }
}

fn number_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?\d+(?:\.\d+)?").unwrap())
}

fn normalize_name(s: &str) -> String {
    let lowered: String = s
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                ' '
            }
        })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn similarity(a: &str, b: &str) -> f64 {
    let max_len = a.chars().count().max(b.chars().count());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / max_len as f64
}

/// Match a reported attribution name against the configuration's visible
/// features. Case-insensitive, punctuation-stripped, normalized edit
/// distance; ties break by catalog order.
pub fn attribution_match(
    name: &str,
    config: &FeatureConfiguration,
    catalog: &FeatureCatalog,
) -> Option<String> {
    let needle = normalize_name(name);
    // exact normalized match first: the common case, and much cheaper
    for def in catalog.features() {
        if config.visible_features.iter().any(|id| id == &def.id)
            && (normalize_name(&def.display_name) == needle || normalize_name(&def.id) == needle)
        {
            return Some(def.id.clone());
        }
    }
    let mut best: Option<(f64, String)> = None;
    // catalog order, so earlier features win ties
    for def in catalog.features() {
        if !config.visible_features.iter().any(|id| id == &def.id) {
            continue;
        }
        let candidates = [normalize_name(&def.display_name), normalize_name(&def.id)];
        let sim = candidates
            .iter()
            .map(|c| similarity(&needle, c))
            .fold(f64::NEG_INFINITY, f64::max);
        if sim >= MATCH_THRESHOLD && best.as_ref().map(|(s, _)| sim > *s).unwrap_or(true) {
            best = Some((sim, def.id.clone()));
        }
    }
    best.map(|(_, id)| id)
}

fn parse_impact_line(line: &str) -> Option<(String, f64, String)> {
    let rest = line.trim().strip_prefix("FEATURE_IMPACT:").unwrap_or(line.trim());
    let parts: Vec<&str> = rest.splitn(3, '|').collect();
    if parts.len() < 2 {
        return None;
    }
    let name = parts[0].trim();
    let value: f64 = parts[1].trim().parse().ok()?;
    if name.is_empty() {
        return None;
    }
    let rationale = parts.get(2).map(|s| s.trim().to_string()).unwrap_or_default();
    Some((name.to_string(), value, rationale))
}

fn extract_fenced_block(raw: &str) -> Option<&str> {
    // take the first fenced block that mentions RISK_SCORE
    let mut rest = raw;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        // skip a language tag on the opening fence
        let body_start = after.find('\n').map(|i| i + 1).unwrap_or(0);
        let body = &after[body_start..];
        let end = body.find("```")?;
        let block = &body[..end];
        if block.contains("RISK_SCORE") {
            return Some(block);
        }
        rest = &body[end + 3..];
    }
    None
}

fn accept_score(raw_score: f64, scale: &RiskScale) -> Option<(f64, bool)> {
    let slack = CLAMP_OVERSHOOT_FRACTION * scale.span();
    if raw_score >= scale.min && raw_score <= scale.max {
        Some((raw_score, false))
    } else if raw_score >= scale.min - slack && raw_score <= scale.max + slack {
        Some((raw_score.clamp(scale.min, scale.max), true))
    } else {
        None
    }
}

fn fallback_score(raw: &str, scale: &RiskScale) -> Option<(f64, bool)> {
    let lower = raw.to_lowercase();
    let mut found = None;
    for (pos, _) in lower.match_indices("risk") {
        // first standalone number within a short window after the mention
        let mut window_end = (pos + 60).min(lower.len());
        while !lower.is_char_boundary(window_end) {
            window_end -= 1;
        }
        let window = &lower[pos..window_end];
        if let Some(m) = number_re().find(window) {
            if let Ok(v) = m.as_str().parse::<f64>() {
                if v >= scale.min && v <= scale.max {
                    found = Some((v, false));
                }
            }
        }
    }
    found.or_else(|| {
        // last in-range number anywhere, as a final salvage
        number_re()
            .find_iter(raw)
            .filter_map(|m| m.as_str().parse::<f64>().ok())
            .filter(|v| *v >= scale.min && *v <= scale.max)
            .last()
            .map(|v| (v, false))
    })
}

/// Parse a raw model response against the prompt's constraints.
pub fn parse(
    raw: &str,
    spec: &PromptSpec,
    config: &FeatureConfiguration,
    catalog: &FeatureCatalog,
    scale: &RiskScale,
) -> std::result::Result<ParsedAssessment, String> {
    if raw.trim().is_empty() {
        return Err("empty response".to_string());
    }

    let (mode, score, clamped, impact_source) = if let Some(block) = extract_fenced_block(raw) {
        let score_line = block
            .lines()
            .find_map(|l| l.trim().strip_prefix("RISK_SCORE:"))
            .ok_or_else(|| "fenced block lacks RISK_SCORE line".to_string())?;
        let raw_score: f64 = number_re()
            .find(score_line)
            .and_then(|m| m.as_str().parse().ok())
            .ok_or_else(|| format!("unparsable RISK_SCORE line `{}`", score_line.trim()))?;
        let (score, clamped) = accept_score(raw_score, scale)
            .ok_or_else(|| format!("score {raw_score} outside scale with >5% overshoot"))?;
        (ParseMode::Structured, score, clamped, block.to_string())
    } else {
        let (score, clamped) = fallback_score(raw, scale)
            .ok_or_else(|| "no extractable score".to_string())?;
        (ParseMode::Fallback, score, clamped, raw.to_string())
    };

    let attributions: Vec<Attribution> = impact_source
        .lines()
        .filter(|l| l.trim().starts_with("FEATURE_IMPACT:") || (mode == ParseMode::Fallback && l.contains('|')))
        .filter_map(parse_impact_line)
        .map(|(name, contribution, rationale)| Attribution {
            feature_id: attribution_match(&name, config, catalog),
            name_raw: name,
            contribution,
            rationale,
        })
        .collect();

    let (sum_residual, sum_flagged) = if spec.requires_sum_constraint && !attributions.is_empty() {
        let total: f64 = attributions.iter().map(|a| a.contribution).sum();
        let residual = (score - total).abs();
        (Some(residual), residual > SUM_RESIDUAL_EPSILON)
    } else {
        (None, false)
    };

    Ok(ParsedAssessment {
        score,
        attributions,
        sum_residual,
        sum_flagged,
        parse_mode: mode,
        clamped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::FeatureCatalog;
    use crate::cohort::sample_cohort;
    use crate::perturbation::build_configurations;
    use crate::prompting::{render_prompt, PromptStyle};

    fn fixtures(style: PromptStyle, t: usize) -> (FeatureCatalog, FeatureConfiguration, PromptSpec) {
        let cat = FeatureCatalog::default_catalog();
        let cohort = sample_cohort(&cat, 1, 42);
        let config = build_configurations(&cohort[0], &cat, 42).remove(t);
        let spec = render_prompt(style, "Age: 43 years", &RiskScale::default()).unwrap();
        (cat, config, spec)
    }

    #[test]
    fn structured_block_parses() {
        let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
        let raw = "Here is my assessment.\n```\nRISK_SCORE: 6.5\nFEATURE_IMPACT: Age | 0.5 | midlife\nFEATURE_IMPACT: Smoking | 1.0 | risk factor\n```\n";
        let parsed = parse(raw, &spec, &config, &cat, &RiskScale::default()).unwrap();
        assert_eq!(parsed.score, 6.5);
        assert_eq!(parsed.parse_mode, ParseMode::Structured);
        assert_eq!(parsed.attributions.len(), 2);
        assert_eq!(parsed.attributions[0].feature_id.as_deref(), Some("age"));
        assert_eq!(parsed.attributions[1].feature_id.as_deref(), Some("smoking"));
        assert!(!parsed.clamped);
    }

    #[test]
    fn prose_response_falls_back() {
        let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
        let raw = "Considering the profile, the overall risk is about 7 out of 10 for this patient.";
        let parsed = parse(raw, &spec, &config, &cat, &RiskScale::default()).unwrap();
        assert_eq!(parsed.score, 7.0);
        assert_eq!(parsed.parse_mode, ParseMode::Fallback);
    }

    #[test]
    fn mild_overshoot_is_clamped() {
        let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
        let raw = "```\nRISK_SCORE: 10.3\n```";
        let parsed = parse(raw, &spec, &config, &cat, &RiskScale::default()).unwrap();
        assert_eq!(parsed.score, 10.0);
        assert!(parsed.clamped);
    }

    #[test]
    fn large_overshoot_fails() {
        let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
        let raw = "```\nRISK_SCORE: 14.2\n```";
        assert!(parse(raw, &spec, &config, &cat, &RiskScale::default()).is_err());
    }

    #[test]
    fn sum_residual_is_flagged_for_constrained_styles() {
        let (cat, config, spec) = fixtures(PromptStyle::Logical, 0);
        let raw = "```\nRISK_SCORE: 6.5\nFEATURE_IMPACT: Age | 3.2 | a\nFEATURE_IMPACT: BMI | 3.2 | b\n```";
        let parsed = parse(raw, &spec, &config, &cat, &RiskScale::default()).unwrap();
        let residual = parsed.sum_residual.unwrap();
        assert!((residual - 0.1).abs() < 1e-9);
        assert!(parsed.sum_flagged);
    }

    #[test]
    fn exact_sum_is_not_flagged() {
        let (cat, config, spec) = fixtures(PromptStyle::Logical, 0);
        let raw = "```\nRISK_SCORE: 6.4\nFEATURE_IMPACT: Age | 3.2 | a\nFEATURE_IMPACT: BMI | 3.2 | b\n```";
        let parsed = parse(raw, &spec, &config, &cat, &RiskScale::default()).unwrap();
        assert!(!parsed.sum_flagged);
    }

    #[test]
    fn no_score_anywhere_is_a_parse_failure() {
        let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
        let err = parse("I cannot assess this patient.", &spec, &config, &cat, &RiskScale::default())
            .unwrap_err();
        assert!(err.contains("no extractable score"));
    }

    #[test]
    fn attribution_match_normalizes() {
        let (cat, config, _) = fixtures(PromptStyle::Neutral, 10);
        assert_eq!(
            attribution_match("drinks coffee", &config, &cat).as_deref(),
            Some("drinks_coffee")
        );
        assert_eq!(
            attribution_match("Drinks Coffee", &config, &cat).as_deref(),
            Some("drinks_coffee")
        );
    }

    #[test]
    fn paraphrased_name_stays_unmatched() {
        // frozen case: below the 0.85 normalized-edit-distance threshold
        let (cat, config, _) = fixtures(PromptStyle::Neutral, 10);
        assert_eq!(attribution_match("coffee consumption", &config, &cat), None);
    }

    #[test]
    fn invisible_features_do_not_match() {
        // at t = 0 only clinical features are visible
        let (cat, config, _) = fixtures(PromptStyle::Neutral, 0);
        assert_eq!(attribution_match("Drinks Coffee", &config, &cat), None);
        assert_eq!(attribution_match("Age", &config, &cat).as_deref(), Some("age"));
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// `parse` is total: arbitrary text never panics, and any
            /// accepted score lies within the risk scale.
            #[test]
            fn parse_is_total_and_scores_stay_on_scale(raw in "\\PC{0,400}") {
                let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
                let scale = RiskScale::default();
                if let Ok(parsed) = parse(&raw, &spec, &config, &cat, &scale) {
                    prop_assert!(parsed.score >= scale.min && parsed.score <= scale.max);
                }
            }

            /// Wrapping a well-formed structured block in arbitrary prose
            /// never changes the extracted score.
            #[test]
            fn surrounding_prose_cannot_shift_a_structured_score(
                prefix in "[a-zA-Z0-9 .,]{0,120}",
                suffix in "[a-zA-Z0-9 .,]{0,120}",
                tenths in 0u32..=100,
            ) {
                let (cat, config, spec) = fixtures(PromptStyle::Neutral, 0);
                let score = f64::from(tenths) / 10.0;
                let raw = format!("{prefix}\n```\nRISK_SCORE: {score:.1}\n```\n{suffix}");
                let parsed = parse(&raw, &spec, &config, &cat, &RiskScale::default())
                    .expect("well-formed block must parse");
                prop_assert_eq!(parsed.parse_mode, ParseMode::Structured);
                prop_assert!((parsed.score - score).abs() < 1e-12);
            }
        }
    }
}
