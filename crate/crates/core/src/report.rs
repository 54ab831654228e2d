//! JSON run reports.

use serde::{Deserialize, Serialize};

use crate::analysis::SyntheticStreamSpec;
use crate::engine::SchemeResult;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum InputEcho {
    Trace {
        path: String,
        num_layers: u32,
        num_kv_heads: u32,
        head_dim: u32,
        dtype: String,
        prefill_len: u32,
        decode_steps: u32,
    },
    Synthetic {
        spec: SyntheticStreamSpec,
    },
}

/// Everything needed to reproduce a comparison run, plus its results.
///
/// Readers ignore fields they do not know, so newer reports still load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub input: InputEcho,
    pub schemes: Vec<SchemeResult>,
    /// The only field that differs between identical runs.
    pub wall_clock_ms: u64,
}

impl RunReport {
    pub fn new(seed: u64, input: InputEcho, schemes: Vec<SchemeResult>, wall_clock_ms: u64) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            input,
            schemes,
            wall_clock_ms,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::corrupt(format!("report encoding: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: Self =
            serde_json::from_str(text).map_err(|e| Error::corrupt(format!("report decoding: {e}")))?;
        if report.schema_version > REPORT_SCHEMA_VERSION {
            return Err(Error::Version {
                what: "report schema",
                expected: REPORT_SCHEMA_VERSION,
                found: report.schema_version,
            });
        }
        Ok(report)
    }

    pub fn scheme(&self, name: &str) -> Option<&SchemeResult> {
        self.schemes.iter().find(|s| s.name == name)
    }
}
