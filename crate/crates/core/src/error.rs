use thiserror::Error;

/// Errors surfaced by the audit pipeline.
#[derive(Debug, Error)]
pub enum AuditError {
    #[error("catalog: {0}")]
    Catalog(String),

    #[error("catalog parse error: {0}")]
    CatalogParse(#[from] toml::de::Error),

    #[error("empty cohort: {0}")]
    EmptyCohort(String),

    #[error("internal consistency: {0}")]
    Consistency(String),

    #[error("unknown prompt style: {0}")]
    UnknownStyle(String),

    #[error("provider: {0}")]
    Provider(String),

    #[error("missing credential: set {0}")]
    MissingCredential(String),

    #[error("ledger: {0}")]
    Ledger(String),

    #[error("ledger line {line}: {source}")]
    LedgerCorrupt {
        line: usize,
        source: serde_json::Error,
    },

    #[error("inference: {0}")]
    Inference(String),

    #[error("rank deficient fixed design: column `{0}`")]
    RankDeficient(String),

    #[error("config: {0}")]
    Config(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AuditError>;
