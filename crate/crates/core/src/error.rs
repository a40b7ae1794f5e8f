use std::fmt;
use std::io;
use std::path::PathBuf;

use crate::workspace::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse error classes, one per process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Other,
    Format,
    Policy,
    Quota,
    Integrity,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Other => 1,
            ErrorCategory::Format => 2,
            ErrorCategory::Policy => 3,
            ErrorCategory::Quota => 4,
            ErrorCategory::Integrity => 5,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("lineage error: {0}")]
    Lineage(String),
    #[error("authorization error: {0}")]
    Unauthorized(String),
    #[error("tamper detected: {0}")]
    Tamper(String),
    #[error("replay refused: {0}")]
    ReplayRefused(String),
    #[error("store is locked by another writer: {}", .0.display())]
    Locked(PathBuf),
    #[error("format error: {0}")]
    Format(String),
    #[error("malformed action: {0}")]
    MalformedAction(String),
    #[error("policy violation: {}", ViolationList(.0))]
    Policy(Vec<Violation>),
    #[error("edit failed, workspace rolled back: {0}")]
    EditFailed(String),
    #[error("quota refused (Remaining Evals: {global}, Session Evals Remaining: {session})")]
    QuotaRefused { global: u64, session: u64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no candidates and no staged seed")]
    SeedMissing,
    #[error("parent artifact unreadable: {0}")]
    ParentCorrupt(String),
    #[error("external process: {0}")]
    External(String),
    #[error("not a workspace: {}", .0.display())]
    NotAWorkspace(PathBuf),
    #[error("refusing to initialize non-empty directory {}", .0.display())]
    NotEmpty(PathBuf),
    #[error("config error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

struct ViolationList<'a>(&'a [Violation]);

impl fmt::Display for ViolationList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Format(_) => ErrorCategory::Format,
            Error::Policy(_) | Error::MalformedAction(_) => ErrorCategory::Policy,
            Error::QuotaRefused { .. } => ErrorCategory::Quota,
            Error::Lineage(_) | Error::Tamper(_) | Error::ReplayRefused(_) => {
                ErrorCategory::Integrity
            }
            _ => ErrorCategory::Other,
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.category().exit_code()
    }
}

/// Attaches a path to an I/O error.
pub(crate) trait IoContext<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn ctx(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| Error::Io {
            context: what(),
            source,
        })
    }
}

pub(crate) fn io_at<T>(r: io::Result<T>, path: &std::path::Path) -> Result<T> {
    r.ctx(|| path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_categories() {
        assert_eq!(Error::Format("x".into()).exit_code(), 2);
        assert_eq!(Error::MalformedAction("x".into()).exit_code(), 3);
        assert_eq!(Error::Policy(vec![]).exit_code(), 3);
        assert_eq!(Error::QuotaRefused { global: 0, session: 3 }.exit_code(), 4);
        assert_eq!(Error::Tamper("x".into()).exit_code(), 5);
        assert_eq!(Error::Lineage("x".into()).exit_code(), 5);
        assert_eq!(Error::SeedMissing.exit_code(), 1);
    }

    #[test]
    fn quota_message_names_counters() {
        let msg = Error::QuotaRefused { global: 0, session: 4 }.to_string();
        assert!(msg.contains("Remaining Evals: 0"));
    }
}
