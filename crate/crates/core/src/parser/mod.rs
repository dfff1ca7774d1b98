//! Codecs between [`ParsedTrace`](crate::trace::ParsedTrace) and its two file
//! formats: the compact `gotrace` binary stream and the `ParseResult` JSON
//! document.

mod binary;
mod json;
pub mod varint;

use std::path::Path;

pub use binary::{encode_binary, parse_binary, MAGIC, VERSION};
pub use json::{emit_json, parse_json};

use crate::trace::ParsedTrace;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseError {
    #[error("bad magic at byte offset {offset}: expected \"gotrace\"")]
    BadMagic { offset: usize },
    #[error("unsupported format version {version} at byte offset {offset}")]
    UnsupportedVersion { offset: usize, version: u64 },
    #[error("unknown opcode 0x{opcode:02x} at byte offset {offset}")]
    UnknownOpcode { offset: usize, opcode: u8 },
    #[error("record truncated at byte offset {offset}")]
    TruncatedRecord { offset: usize },
    #[error("varint longer than 10 bytes at byte offset {offset}")]
    VarintOverflow { offset: usize },
    #[error("invalid UTF-8 string at byte offset {offset}")]
    InvalidUtf8 { offset: usize },
    #[error("timestamp overflows 64 bits at byte offset {offset}")]
    TimestampOverflow { offset: usize },
    #[error("malformed document{}: {reason}", at_event(*.index))]
    MalformedDocument { index: Option<usize>, reason: String },
    #[error("event {index}: unknown event type code {code}")]
    UnknownEventTypeCode { index: usize, code: i128 },
    #[error("event {index}: key {key:?} is not a valid integer")]
    TypeMismatch { index: usize, key: String },
}

fn at_event(index: Option<usize>) -> String {
    index.map(|i| format!(" at event {i}")).unwrap_or_default()
}

impl ParseError {
    /// Byte offset for binary errors.
    pub fn offset(&self) -> Option<usize> {
        use ParseError::*;
        match self {
            BadMagic { offset }
            | UnsupportedVersion { offset, .. }
            | UnknownOpcode { offset, .. }
            | TruncatedRecord { offset }
            | VarintOverflow { offset }
            | InvalidUtf8 { offset }
            | TimestampOverflow { offset } => Some(*offset),
            _ => None,
        }
    }

    /// Event index for JSON errors.
    pub fn event_index(&self) -> Option<usize> {
        use ParseError::*;
        match self {
            MalformedDocument { index, .. } => *index,
            UnknownEventTypeCode { index, .. } | TypeMismatch { index, .. } => Some(*index),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("event {index} cannot be encoded: {reason}")]
    UnencodableTrace { index: usize, reason: String },
}

/// On-disk representation of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    Binary,
    Json,
}

impl TraceFormat {
    pub fn name(self) -> &'static str {
        match self {
            TraceFormat::Binary => "binary",
            TraceFormat::Json => "json",
        }
    }

    /// Picks a format from the file extension, falling back to sniffing the
    /// magic bytes.
    pub fn detect(path: &Path, bytes: &[u8]) -> TraceFormat {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(".json") {
            TraceFormat::Json
        } else if name.ends_with(".gotrace") || bytes.starts_with(b"gotr") {
            TraceFormat::Binary
        } else {
            TraceFormat::Json
        }
    }
}

impl std::str::FromStr for TraceFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "binary" => Ok(TraceFormat::Binary),
            "json" => Ok(TraceFormat::Json),
            other => Err(format!("unknown trace format {other:?}")),
        }
    }
}

/// Parses `bytes` in the given format.
pub fn parse_bytes(bytes: &[u8], format: TraceFormat) -> Result<ParsedTrace, ParseError> {
    match format {
        TraceFormat::Binary => parse_binary(bytes),
        TraceFormat::Json => {
            let text = std::str::from_utf8(bytes).map_err(|e| ParseError::MalformedDocument {
                index: None,
                reason: format!("not UTF-8: {e}"),
            })?;
            parse_json(text)
        }
    }
}
