//! Trace results as JSON lines.

use std::io::BufRead;

use probekit_core::probe::{RecordError, TraceResult};

#[derive(Debug, thiserror::Error)]
pub enum ParseError {
    #[error("malformed record: {0}")]
    Syntax(#[from] serde_json::Error),
    #[error("inconsistent record: {0}")]
    Invalid(#[from] RecordError),
    #[error("reading records: {0}")]
    Io(#[from] std::io::Error),
}

/// One-line JSON encoding of a result, without the trailing newline.
pub fn serialize_result(r: &TraceResult) -> String {
    serde_json::to_string(r).expect("trace results always serialize")
}

/// Inverse of [`serialize_result`]; also rejects records that break any
/// result invariant.
pub fn deserialize_result(line: &str) -> Result<TraceResult, ParseError> {
    let r: TraceResult = serde_json::from_str(line)?;
    r.validate()?;
    Ok(r)
}

/// Reads one result per non-blank line.
pub fn read_results(reader: impl BufRead) -> Result<Vec<TraceResult>, ParseError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(deserialize_result(&line)?);
        }
    }
    Ok(out)
}
