//! Deterministic mock responders.
//!
//! Mocks enable desk-scale calibration and power runs without provider
//! access. Every mock response conforms to the structured response format, is
//! deterministic given (behavior, patient, t, rep, seed), and its attribution
//! lines sum exactly to the emitted score.

use crate::catalog::FeatureCatalog;
use crate::cohort::{FeatureValue, PatientProfile};
use crate::error::{AuditError, Result};
use crate::parsing::RiskScale;
use crate::perturbation::FeatureConfiguration;
use crate::prompting::PromptStyle;
use crate::rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockBehavior {
    /// score = f(clinical features) + N(0, sigma0), independent of t
    NullModel { sigma0: f64 },
    /// adds delta * t on top of the null model
    LinearDrift { delta: f64, sigma0: f64 },
    /// adds a per-style offset once irrelevant features are present (t >= 1),
    /// so the offset appears in instability as a level effect
    PromptShift {
        offsets: BTreeMap<String, f64>,
        sigma0: f64,
    },
    /// perturbs per-feature contributions; the score itself stays at f(clinical)
    AttributionNoise { sigma: f64 },
}

impl MockBehavior {
    /// Parse a CLI behavior string, e.g. `null_model`,
    /// `linear_drift:delta=0.2,sigma=0.3`, `prompt_shift:logical=1.0`,
    /// `attribution_noise:sigma=0.2`.
    pub fn parse(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, a),
            None => (s, ""),
        };
        let mut params: BTreeMap<String, f64> = BTreeMap::new();
        for pair in args.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| AuditError::Config(format!("bad mock parameter `{pair}`")))?;
            let v: f64 = v
                .parse()
                .map_err(|_| AuditError::Config(format!("bad mock value `{pair}`")))?;
            params.insert(k.to_string(), v);
        }
        let sigma = |default: f64| params.get("sigma").copied().unwrap_or(default);
        match name {
            "null_model" => Ok(MockBehavior::NullModel { sigma0: sigma(0.3) }),
            "linear_drift" => Ok(MockBehavior::LinearDrift {
                delta: params.get("delta").copied().unwrap_or(0.2),
                sigma0: sigma(0.3),
            }),
            "prompt_shift" => {
                let sigma0 = sigma(0.3);
                let offsets: BTreeMap<String, f64> = params
                    .iter()
                    .filter(|(k, _)| k.as_str() != "sigma")
                    .map(|(k, v)| (k.clone(), *v))
                    .collect();
                for style in offsets.keys() {
                    PromptStyle::parse(style)?;
                }
                Ok(MockBehavior::PromptShift { offsets, sigma0 })
            }
            "attribution_noise" => Ok(MockBehavior::AttributionNoise { sigma: sigma(0.2) }),
            other => Err(AuditError::Config(format!("unknown mock behavior `{other}`"))),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            MockBehavior::NullModel { sigma0 } => format!("null_model:sigma={sigma0}"),
            MockBehavior::LinearDrift { delta, sigma0 } => {
                format!("linear_drift:delta={delta},sigma={sigma0}")
            }
            MockBehavior::PromptShift { offsets, sigma0 } => {
                let parts: Vec<String> =
                    offsets.iter().map(|(k, v)| format!("{k}={v}")).collect();
                format!("prompt_shift:{},sigma={sigma0}", parts.join(","))
            }
            MockBehavior::AttributionNoise { sigma } => format!("attribution_noise:sigma={sigma}"),
        }
    }
}

/// Deterministic risk contribution of the clinical features only.
fn clinical_base(patient: &PatientProfile) -> f64 {
    let ham = match patient
        .value("ham_d")
        .and_then(FeatureValue::as_category)
        .unwrap_or("")
    {
        s if s.starts_with("7-17") => 1.0,
        s if s.starts_with("18-24") => 2.0,
        s if s.starts_with("25+") => 3.0,
        _ => 0.0,
    };
    let flag = |id: &str| match patient.value(id) {
        Some(FeatureValue::Flag(true)) => 1.0,
        _ => 0.0,
    };
    let smoker = patient
        .value("smoking")
        .and_then(FeatureValue::as_category)
        .map(|s| if s == "Yes" { 1.0 } else { 0.0 })
        .unwrap_or(0.0);
    let age = patient
        .value("age")
        .and_then(FeatureValue::as_number)
        .unwrap_or(40.0);

    2.0 + 0.5 * ham
        + 0.6 * flag("been_sad_or_fatigued")
        + 0.6 * flag("loss_of_interest")
        + 0.3 * smoker
        + 0.01 * (age - 40.0)
}

/// Produce the raw response text for one mock generation cell.
pub fn mock_responder(
    behavior: &MockBehavior,
    model_key: &str,
    style: PromptStyle,
    patient: &PatientProfile,
    config: &FeatureConfiguration,
    catalog: &FeatureCatalog,
    rep: u8,
    master_seed: u64,
    scale: &RiskScale,
) -> String {
    let label = rng::mock_label(model_key, style.key(), patient.patient_id, config.t, rep);
    let mut noise_rng = rng::stream(master_seed, &label);
    let z = rng::standard_normal(&mut noise_rng);

    let base = clinical_base(patient);
    let raw_score = match behavior {
        MockBehavior::NullModel { sigma0 } => base + sigma0 * z,
        MockBehavior::LinearDrift { delta, sigma0 } => {
            base + delta * config.t as f64 + sigma0 * z
        }
        MockBehavior::PromptShift { offsets, sigma0 } => {
            let offset = if config.t >= 1 {
                offsets.get(style.key()).copied().unwrap_or(0.0)
            } else {
                0.0
            };
            base + offset + sigma0 * z
        }
        MockBehavior::AttributionNoise { .. } => base,
    };

    let clamped = raw_score.clamp(scale.min, scale.max);
    let score_text = format!("{:.*}", scale.decimals as usize, clamped);
    let score: f64 = score_text.parse().expect("formatted score parses");

    // Per-feature contributions: a deterministic base value per feature,
    // optionally noised, with the final line adjusted so the printed values
    // sum exactly to the score.
    let mut contributions: Vec<(String, f64)> = config
        .visible_features
        .iter()
        .map(|id| {
            let def = catalog.get(id).expect("visible features are in catalog");
            let mut attr_rng =
                rng::stream(master_seed, &format!("mock-attr/{id}/{label}"));
            let u: f64 = attr_rng.gen();
            let mut c = 0.8 * (u - 0.5);
            if let MockBehavior::AttributionNoise { sigma } = behavior {
                c += sigma * rng::standard_normal(&mut attr_rng);
            }
            (def.display_name.clone(), c)
        })
        .collect();
    // round-trip through the printed representation so the parser's sum
    // matches exactly
    let n = contributions.len();
    let mut head_sum = 0.0;
    for (_, c) in contributions.iter_mut().take(n.saturating_sub(1)) {
        let printed: f64 = format!("{c}").parse().unwrap();
        *c = printed;
        head_sum += printed;
    }
    if let Some((_, last)) = contributions.last_mut() {
        *last = score - head_sum;
    }

    let mut out = String::with_capacity(256 + 64 * n);
    out.push_str("Assessment of the patient profile follows.\n\n```\n");
    out.push_str(&format!("RISK_SCORE: {score_text}\n"));
    for (name, c) in &contributions {
        out.push_str(&format!("FEATURE_IMPACT: {name} | {c} | simulated contribution\n"));
    }
    out.push_str("```\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::FeatureCatalog;
    use crate::cohort::sample_cohort;
    use crate::perturbation::build_configurations;
    use crate::prompting::{render_prompt, PromptStyle};

    fn setup() -> (FeatureCatalog, PatientProfile, Vec<FeatureConfiguration>) {
        let cat = FeatureCatalog::default_catalog();
        let mut cohort = sample_cohort(&cat, 1, 42);
        let configs = build_configurations(&cohort[0], &cat, 42);
        (cat, cohort.remove(0), configs)
    }

    fn score_of(raw: &str) -> f64 {
        raw.lines()
            .find_map(|l| l.trim().strip_prefix("RISK_SCORE:"))
            .unwrap()
            .trim()
            .parse()
            .unwrap()
    }

    #[test]
    fn null_model_without_noise_ignores_t() {
        let (cat, patient, configs) = setup();
        let behavior = MockBehavior::NullModel { sigma0: 0.0 };
        let scale = RiskScale::default();
        let a = mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[0], &cat, 1, 42, &scale);
        let b = mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[10], &cat, 1, 42, &scale);
        assert_eq!(score_of(&a), score_of(&b));
    }

    #[test]
    fn linear_drift_is_exact_without_noise() {
        let (cat, patient, configs) = setup();
        let behavior = MockBehavior::LinearDrift { delta: 0.2, sigma0: 0.0 };
        let scale = RiskScale::default();
        let s0 = score_of(&mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[0], &cat, 1, 42, &scale));
        let s5 = score_of(&mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[5], &cat, 1, 42, &scale));
        assert!((s5 - s0 - 1.0).abs() < 1e-9, "{s5} - {s0}");
    }

    #[test]
    fn prompt_shift_spares_baseline() {
        let (cat, patient, configs) = setup();
        let mut offsets = BTreeMap::new();
        offsets.insert("logical".to_string(), 1.0);
        let behavior = MockBehavior::PromptShift { offsets, sigma0: 0.0 };
        let scale = RiskScale::default();
        let base = score_of(&mock_responder(&behavior, "m", PromptStyle::Logical, &patient, &configs[0], &cat, 1, 42, &scale));
        let shifted = score_of(&mock_responder(&behavior, "m", PromptStyle::Logical, &patient, &configs[3], &cat, 1, 42, &scale));
        let neutral = score_of(&mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[3], &cat, 1, 42, &scale));
        assert!((shifted - base - 1.0).abs() < 1e-9);
        assert!((neutral - base).abs() < 1e-9);
    }

    #[test]
    fn contributions_sum_to_score() {
        let (cat, patient, configs) = setup();
        let behavior = MockBehavior::LinearDrift { delta: 0.2, sigma0: 0.3 };
        let scale = RiskScale::default();
        let raw = mock_responder(&behavior, "m", PromptStyle::Logical, &patient, &configs[4], &cat, 2, 42, &scale);
        let spec = render_prompt(PromptStyle::Logical, "x", &scale).unwrap();
        let parsed = crate::parsing::parse(&raw, &spec, &configs[4], &cat, &scale).unwrap();
        assert!(parsed.sum_residual.unwrap() < 1e-9);
        assert_eq!(parsed.attributions.len(), configs[4].visible_features.len());
        assert_eq!(parsed.unmatched_count(), 0);
    }

    #[test]
    fn responses_are_deterministic() {
        let (cat, patient, configs) = setup();
        let behavior = MockBehavior::NullModel { sigma0: 0.3 };
        let scale = RiskScale::default();
        let a = mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[2], &cat, 3, 42, &scale);
        let b = mock_responder(&behavior, "m", PromptStyle::Neutral, &patient, &configs[2], &cat, 3, 42, &scale);
        assert_eq!(a, b);
    }

    #[test]
    fn behavior_strings_round_trip() {
        for s in [
            "null_model",
            "null_model:sigma=0.1",
            "linear_drift:delta=0.2,sigma=0.3",
            "prompt_shift:logical=1.0,sigma=0",
            "attribution_noise:sigma=0.2",
        ] {
            MockBehavior::parse(s).unwrap();
        }
        assert!(MockBehavior::parse("chaotic").is_err());
        assert!(MockBehavior::parse("prompt_shift:sarcastic=1.0").is_err());
    }
}
