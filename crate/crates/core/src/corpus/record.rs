use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CsrResponse {
    Yes,
    No,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Positive,
    Negative,
    Unlabeled,
}

/// One support message with its curation outcome. Field order is the JSONL
/// column order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub id: String,
    pub text: String,
    pub intent: Option<String>,
    pub csr_response: Option<CsrResponse>,
    pub split: Split,
    /// Synthetic ground truth; `None` for out-of-scope. Never used in training.
    pub true_intent: Option<String>,
}

impl CurationRecord {
    pub fn kind(&self) -> RecordKind {
        match self.csr_response {
            Some(CsrResponse::Yes) => RecordKind::Positive,
            Some(CsrResponse::No) => RecordKind::Negative,
            None => RecordKind::Unlabeled,
        }
    }

    pub fn is_curated(&self) -> bool {
        self.csr_response.is_some()
    }

    pub fn validate(&self) -> Result<()> {
        if self.csr_response.is_some() && self.intent.is_none() {
            return Err(Error::invalid(format!(
                "record {}: csr_response without an intent",
                self.id
            )));
        }
        Ok(())
    }
}

/// Writes one JSON object per line.
pub fn save_records(path: &Path, records: &[CurationRecord]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        r.validate()?;
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL dataset. Blank lines are skipped; malformed or invalid
/// lines fail with their 1-based line number.
pub fn load_records(path: &Path) -> Result<Vec<CurationRecord>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: CurationRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}
