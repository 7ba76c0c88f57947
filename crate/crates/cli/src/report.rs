//! Report files and provenance.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Inconclusive,
    Info,
}

impl Status {
    pub fn label(self) -> &'static str {
        match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Inconclusive => "INCONCLUSIVE",
            Status::Info => "info",
        }
    }

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub check: String,
    pub status: Status,
    pub detail: String,
}

impl SummaryRow {
    pub fn new(check: impl Into<String>, status: Status, detail: impl Into<String>) -> Self {
        SummaryRow {
            check: check.into(),
            status,
            detail: detail.into(),
        }
    }

    pub fn info(check: impl Into<String>, detail: impl Into<String>) -> Self {
        Self::new(check, Status::Info, detail)
    }
}

/// Contents of `<kind>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub kind: ExperimentKind,
    pub config_sha256: String,
    pub seed: u64,
    pub tool_version: String,
    pub summary: Vec<SummaryRow>,
    /// Data files written next to the report.
    pub files: Vec<String>,
    pub result: serde_json::Value,
}

pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// First line of every CSV and plot-data file.
pub fn provenance_header(kind: ExperimentKind, hash: &str, seed: u64) -> String {
    format!("# kind={} config_sha256={hash} seed={seed}\n", kind.name())
}
