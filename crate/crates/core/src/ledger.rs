//! Append-only run ledger (JSONL) and the content-addressed response cache.
//!
//! Each record is one line, written and flushed atomically from a single
//! writer. The ledger is the analysis source of truth; the cache lets a
//! resumed real-provider run skip completed cells entirely.

use crate::error::{AuditError, Result};
use crate::provider::{CellKey, GenerationRecord};
use sha2::{Digest, Sha256};
use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub struct LedgerWriter {
    out: BufWriter<File>,
}

impl LedgerWriter {
    /// Create a fresh ledger, truncating any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        Ok(LedgerWriter {
            out: BufWriter::new(File::create(path)?),
        })
    }

    /// Open for append (resume).
    pub fn append_to(path: &Path) -> Result<Self> {
        Ok(LedgerWriter {
            out: BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?),
        })
    }

    /// Append one record as a single flushed line.
    pub fn append(&mut self, record: &GenerationRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.out.write_all(line.as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Default)]
pub struct Ledger {
    pub records: Vec<GenerationRecord>,
}

impl Ledger {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: GenerationRecord = serde_json::from_str(&line)
                .map_err(|source| AuditError::LedgerCorrupt { line: i + 1, source })?;
            records.push(record);
        }
        Ok(Ledger { records })
    }

    /// Keys of every cell already present, for resume.
    pub fn completed_keys(&self) -> HashSet<CellKey> {
        self.records.iter().map(|r| r.cell_key()).collect()
    }
}

/// Content-addressed raw-response cache keyed on
/// (model, prompt fingerprint, rep, temperature).
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ResponseCache { dir: dir.to_path_buf() })
    }

    fn path_for(&self, model: &str, fingerprint: &str, rep: u8, temperature: f64) -> PathBuf {
        let mut hasher = Sha256::new();
        hasher.update(model.as_bytes());
        hasher.update([0]);
        hasher.update(fingerprint.as_bytes());
        hasher.update([0, rep, 0]);
        hasher.update(temperature.to_le_bytes());
        self.dir.join(format!("{}.txt", hex::encode(hasher.finalize())))
    }

    pub fn get(&self, model: &str, fingerprint: &str, rep: u8, temperature: f64) -> Option<String> {
        std::fs::read_to_string(self.path_for(model, fingerprint, rep, temperature)).ok()
    }

    pub fn put(
        &self,
        model: &str,
        fingerprint: &str,
        rep: u8,
        temperature: f64,
        raw: &str,
    ) -> Result<()> {
        let path = self.path_for(model, fingerprint, rep, temperature);
        // write-then-rename keeps partial writes out of the cache
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, raw)?;
        std::fs::rename(&tmp, &path)?;
        Ok(())
    }
}
