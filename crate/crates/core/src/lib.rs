//! Reliability audit of LLM-generated clinical risk scores.
//!
//! The pipeline samples a synthetic patient cohort, builds nested feature
//! configurations that add clinically irrelevant features in batches, renders
//! rhetorical prompt variants, executes them against chat-completion providers
//! (or deterministic mocks), and analyzes the resulting risk scores with a
//! random-intercept mixed-effects hypothesis battery.

pub mod brent;
pub mod catalog;
pub mod cohort;
pub mod error;
pub mod inference;
pub mod ledger;
pub mod metrics;
pub mod mock;
pub mod parsing;
pub mod perturbation;
pub mod prompting;
pub mod provider;
pub mod report;
pub mod rng;

pub use catalog::{FeatureCatalog, FeatureDef, FeatureKind, Relevance};
pub use cohort::{CohortSummary, PatientProfile};
pub use error::AuditError;
pub use inference::{HypothesisFamily, HypothesisResult, LmmDesign, LmmFit};
pub use ledger::{Ledger, LedgerWriter};
pub use metrics::InstabilityRecord;
pub use mock::MockBehavior;
pub use parsing::{ParsedAssessment, RiskScale};
pub use perturbation::FeatureConfiguration;
pub use prompting::{PromptSpec, PromptStyle};
pub use provider::{GenerationOutcome, GenerationRecord, ModelTarget};
