//! Exit codes and the JSON error report written to stderr.

use std::path::PathBuf;

use izoo_core::inrz::FormatError;
use izoo_core::CoreError;
use serde_json::json;

pub const USAGE: i32 = 2;
pub const IO: i32 = 3;
pub const CRC: i32 = 4;
pub const VERSION: i32 = 5;
pub const FORMAT: i32 = 6;
pub const INVALID: i32 = 7;
pub const NUMERIC: i32 = 8;
pub const LOCKED: i32 = 9;

/// Failures that originate in the CLI itself rather than the toolkit.
#[derive(Debug)]
pub enum CliError {
    Locked(PathBuf),
    Invalid(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Locked(p) => write!(
                f,
                "{} exists: another zooctl run is using this output directory",
                p.display()
            ),
            CliError::Invalid(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

pub fn invalid(msg: impl Into<String>) -> anyhow::Error {
    CliError::Invalid(msg.into()).into()
}

fn format_code(e: &FormatError) -> (&'static str, i32) {
    match e {
        FormatError::CrcMismatch { .. } => ("crc", CRC),
        FormatError::UnsupportedVersion { .. } => ("version", VERSION),
        _ => ("format", FORMAT),
    }
}

/// Classify an error by the first recognizable cause in its chain.
pub fn classify(err: &anyhow::Error) -> (&'static str, i32) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return match e {
                CliError::Locked(_) => ("locked", LOCKED),
                CliError::Invalid(_) => ("invalid", INVALID),
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Format(f) => format_code(f),
                CoreError::Io { .. } => ("io", IO),
                CoreError::InvalidArgument(_) => ("invalid", INVALID),
                CoreError::NonFiniteLoss { .. } | CoreError::Autograd(_) => ("numeric", NUMERIC),
                CoreError::Image(_) | CoreError::Json(_) => ("format", FORMAT),
            };
        }
        if let Some(f) = cause.downcast_ref::<FormatError>() {
            return format_code(f);
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("format", FORMAT);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", IO);
        }
    }
    ("invalid", INVALID)
}

pub fn report(kind: &str, code: i32, message: &str) {
    eprintln!("{}", json!({ "error": kind, "code": code, "message": message }));
}
