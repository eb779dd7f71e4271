//! Command implementations behind the `lsrm` binary, plus the property
//! checks the acceptance tests share with `lsrm verify`.

pub mod checks;
pub mod compare;
pub mod config;
pub mod run;
pub mod verify;

use crate::error::LsrmError;

pub const EXIT_PASS: i32 = 0;
pub const EXIT_VERIFY_FAILED: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

/// Process exit code for an error that aborted a command.
pub fn exit_code(e: &LsrmError) -> i32 {
    match e {
        LsrmError::Config(_) | LsrmError::Json(_) => EXIT_CONFIG,
        _ => EXIT_INTERNAL,
    }
}
