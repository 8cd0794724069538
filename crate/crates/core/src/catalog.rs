//! Feature catalog: 15 clinical baseline features plus 50 irrelevant features,
//! with marginal and conditional sampling rules.
//!
//! The catalog is a versioned, human-editable TOML file. Features are declared
//! in topological order: a conditional rule may only reference a feature
//! declared earlier in the file. The shipped default lives in
//! `templates/catalog.toml`.

use crate::error::{AuditError, Result};
use serde::{Deserialize, Serialize};

pub const CLINICAL_COUNT: usize = 15;
pub const IRRELEVANT_COUNT: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
    Boolean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relevance {
    Clinical,
    Irrelevant,
}

/// Value range for a continuous feature.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContinuousDomain {
    pub min: f64,
    pub max: f64,
}

/// Predicate on a previously sampled feature.
///
/// `equals` matches a categorical level or boolean ("yes"/"no"); `below` and
/// `at_least` match continuous values. All present predicates must hold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Condition {
    pub feature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub below: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_least: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalRule {
    pub when: Condition,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BooleanRule {
    pub when: Condition,
    pub p_true: f64,
}

/// Marginal distribution, with optional conditional overrides. The first
/// matching rule wins; otherwise the default parameters apply.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sampling {
    /// Normal(mean, sd) clamped into the feature domain.
    ClippedNormal { mean: f64, sd: f64 },
    /// Uniform over the feature domain.
    Uniform,
    Categorical {
        probs: Vec<f64>,
        #[serde(default, rename = "rule", skip_serializing_if = "Vec::is_empty")]
        rules: Vec<CategoricalRule>,
    },
    Boolean {
        p_true: f64,
        #[serde(default, rename = "rule", skip_serializing_if = "Vec::is_empty")]
        rules: Vec<BooleanRule>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureDef {
    pub id: String,
    pub display_name: String,
    pub kind: FeatureKind,
    pub relevance: Relevance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decimals: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<ContinuousDomain>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
    pub sampling: Sampling,
}

impl FeatureDef {
    fn conditions(&self) -> Vec<&Condition> {
        match &self.sampling {
            Sampling::Categorical { rules, .. } => rules.iter().map(|r| &r.when).collect(),
            Sampling::Boolean { rules, .. } => rules.iter().map(|r| &r.when).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
struct CatalogFile {
    schema_version: u32,
    #[serde(rename = "feature")]
    features: Vec<FeatureDef>,
}

/// Ordered feature catalog: clinical features first (Tables 1-2 order), then
/// the 50 irrelevant features.
#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    pub schema_version: u32,
    features: Vec<FeatureDef>,
}

pub const DEFAULT_CATALOG_TOML: &str = include_str!("../templates/catalog.toml");

impl FeatureCatalog {
    /// Parse and validate a catalog from TOML text.
    pub fn load(text: &str) -> Result<Self> {
        let file: CatalogFile = toml::from_str(text)?;
        let catalog = FeatureCatalog {
            schema_version: file.schema_version,
            features: file.features,
        };
        catalog.validate()?;
        Ok(catalog)
    }

    /// The default catalog shipped with the crate.
    pub fn default_catalog() -> Self {
        Self::load(DEFAULT_CATALOG_TOML).expect("shipped catalog is valid")
    }

    pub fn features(&self) -> &[FeatureDef] {
        &self.features
    }

    pub fn get(&self, id: &str) -> Option<&FeatureDef> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.features.iter().position(|f| f.id == id)
    }

    pub fn clinical(&self) -> impl Iterator<Item = &FeatureDef> {
        self.features
            .iter()
            .filter(|f| f.relevance == Relevance::Clinical)
    }

    pub fn irrelevant(&self) -> impl Iterator<Item = &FeatureDef> {
        self.features
            .iter()
            .filter(|f| f.relevance == Relevance::Irrelevant)
    }

    pub fn total(&self) -> usize {
        self.features.len()
    }

    fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for f in &self.features {
            if !seen.insert(f.id.as_str()) {
                return Err(AuditError::Catalog(format!("duplicate feature id `{}`", f.id)));
            }
        }

        let clinical = self.clinical().count();
        let irrelevant = self.irrelevant().count();
        if clinical != CLINICAL_COUNT {
            return Err(AuditError::Catalog(format!(
                "expected {CLINICAL_COUNT} clinical features, found {clinical}"
            )));
        }
        if irrelevant != IRRELEVANT_COUNT {
            return Err(AuditError::Catalog(format!(
                "expected {IRRELEVANT_COUNT} irrelevant features, found {irrelevant}"
            )));
        }

        for (idx, f) in self.features.iter().enumerate() {
            self.validate_feature(f)?;
            for cond in f.conditions() {
                match self.index_of(&cond.feature) {
                    None => {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}` conditions on undeclared feature `{}`",
                            f.id, cond.feature
                        )))
                    }
                    Some(dep) if dep >= idx => {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}` conditions on `{}`, which is declared later",
                            f.id, cond.feature
                        )))
                    }
                    Some(_) => {}
                }
                if cond.equals.is_none() && cond.below.is_none() && cond.at_least.is_none() {
                    return Err(AuditError::Catalog(format!(
                        "feature `{}` has a rule with no predicate on `{}`",
                        f.id, cond.feature
                    )));
                }
            }
        }
        Ok(())
    }

    fn validate_feature(&self, f: &FeatureDef) -> Result<()> {
        match f.kind {
            FeatureKind::Continuous => {
                let dom = f.domain.as_ref().ok_or_else(|| {
                    AuditError::Catalog(format!("continuous feature `{}` lacks a domain", f.id))
                })?;
                if !(dom.min < dom.max) {
                    return Err(AuditError::Catalog(format!(
                        "feature `{}` has empty domain [{}, {}]",
                        f.id, dom.min, dom.max
                    )));
                }
                match &f.sampling {
                    Sampling::ClippedNormal { sd, .. } if *sd > 0.0 => {}
                    Sampling::Uniform => {}
                    _ => {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}`: continuous features need clipped_normal or uniform sampling",
                            f.id
                        )))
                    }
                }
            }
            FeatureKind::Categorical => {
                if f.categories.len() < 2 {
                    return Err(AuditError::Catalog(format!(
                        "categorical feature `{}` needs >= 2 categories",
                        f.id
                    )));
                }
                let check = |probs: &[f64]| -> Result<()> {
                    if probs.len() != f.categories.len() {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}`: {} probabilities for {} categories",
                            f.id,
                            probs.len(),
                            f.categories.len()
                        )));
                    }
                    let sum: f64 = probs.iter().sum();
                    if probs.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}`: probabilities must be nonnegative and sum to 1 (sum = {sum})",
                            f.id
                        )));
                    }
                    Ok(())
                };
                match &f.sampling {
                    Sampling::Categorical { probs, rules } => {
                        check(probs)?;
                        for r in rules {
                            check(&r.probs)?;
                        }
                    }
                    _ => {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}`: categorical features need categorical sampling",
                            f.id
                        )))
                    }
                }
            }
            FeatureKind::Boolean => match &f.sampling {
                Sampling::Boolean { p_true, rules } => {
                    let ok = |p: f64| (0.0..=1.0).contains(&p);
                    if !ok(*p_true) || rules.iter().any(|r| !ok(r.p_true)) {
                        return Err(AuditError::Catalog(format!(
                            "feature `{}`: p_true out of [0, 1]",
                            f.id
                        )));
                    }
                }
                _ => {
                    return Err(AuditError::Catalog(format!(
                        "feature `{}`: boolean features need boolean sampling",
                        f.id
                    )))
                }
            },
        }
        Ok(())
    }
}

/// Load a catalog from a file path.
pub fn load_catalog(path: &std::path::Path) -> Result<FeatureCatalog> {
    let text = std::fs::read_to_string(path)?;
    FeatureCatalog::load(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_catalog_counts() {
        let cat = FeatureCatalog::default_catalog();
        assert_eq!(cat.clinical().count(), 15);
        assert_eq!(cat.irrelevant().count(), 50);
        assert_eq!(cat.total(), 65);
    }

    #[test]
    fn clinical_features_lead_in_table_order() {
        let cat = FeatureCatalog::default_catalog();
        let names: Vec<&str> = cat
            .features()
            .iter()
            .take(15)
            .map(|f| f.display_name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "Age",
                "BMI",
                "Weekly Alcohol Intake (Drinks)",
                "Hours of Sleep",
                "Family Health History",
                "Current Diagnosis",
                "Race",
                "Gender",
                "Sexual Orientation",
                "Smoking",
                "HAM-D",
                "Been Sad or Fatigued",
                "Loss of Interest",
                "Employment",
                "Socioeconomic Status",
            ]
        );
        assert!(cat.features().iter().take(15).all(|f| f.relevance == Relevance::Clinical));
    }

    #[test]
    fn irrelevant_list_is_complete_and_ordered() {
        let cat = FeatureCatalog::default_catalog();
        let names: Vec<&str> = cat.irrelevant().map(|f| f.display_name.as_str()).collect();
        assert_eq!(names.first(), Some(&"Political Ideology"));
        assert_eq!(names.get(5), Some(&"Drinks Coffee"));
        assert_eq!(names.last(), Some(&"Votes"));
        assert_eq!(names.len(), 50);
    }

    #[test]
    fn wrong_clinical_count_is_rejected() {
        // demote one clinical feature
        let text = DEFAULT_CATALOG_TOML.replacen(
            "relevance = \"clinical\"",
            "relevance = \"irrelevant\"",
            1,
        );
        let err = FeatureCatalog::load(&text).unwrap_err();
        assert!(err.to_string().contains("expected 15 clinical"), "{err}");
    }

    #[test]
    fn forward_reference_in_rule_is_rejected() {
        let text = DEFAULT_CATALOG_TOML.replace(
            "feature = \"age\"",
            "feature = \"socioeconomic_status\"",
        );
        let err = FeatureCatalog::load(&text).unwrap_err();
        assert!(err.to_string().contains("declared later"), "{err}");
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let dup = format!("{DEFAULT_CATALOG_TOML}\n[[feature]]\nid = \"votes\"\ndisplay_name = \"Votes\"\nkind = \"boolean\"\nrelevance = \"irrelevant\"\n[feature.sampling]\nkind = \"boolean\"\np_true = 0.5\n");
        let err = FeatureCatalog::load(&dup).unwrap_err();
        assert!(err.to_string().contains("duplicate feature id `votes`"), "{err}");
    }
}
