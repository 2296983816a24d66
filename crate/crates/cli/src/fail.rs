//! Process-level error carrying its exit code: 2 for usage/input problems,
//! 3 for an aborted optimization.

use std::fmt;
use std::path::Path;

use tetraforge_core::Error as CoreError;

#[derive(Debug)]
pub struct Fail {
    pub code: i32,
    pub msg: String,
}

impl fmt::Display for Fail {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl Fail {
    pub fn usage(msg: impl Into<String>) -> Fail {
        Fail {
            code: 2,
            msg: msg.into(),
        }
    }

    pub fn abort(msg: impl Into<String>) -> Fail {
        Fail {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl From<CoreError> for Fail {
    fn from(e: CoreError) -> Fail {
        match e {
            CoreError::OptimizationAborted(_) => Fail::abort(e.to_string()),
            _ => Fail::usage(e.to_string()),
        }
    }
}

/// Annotate an IO error with the path it concerns.
pub fn io_fail(action: &str, path: &Path, e: std::io::Error) -> Fail {
    Fail::usage(format!("cannot {action} {}: {e}", path.display()))
}

pub type CliResult<T> = Result<T, Fail>;
