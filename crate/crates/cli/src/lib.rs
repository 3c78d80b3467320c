//! Library side of the `codetts` command: run configuration, WAV files,
//! diagnostics files, SVG plots and the command implementations.

pub mod commands;
pub mod config;
pub mod diagnostics;
pub mod plot;
pub mod wav;

use codetts::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_TRUNCATED: i32 = 4;

/// Exit status for a failed command.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Shape { .. } | Error::Stream(_) => EXIT_CONFIG,
        Error::Io(_) | Error::Format(_) => EXIT_IO,
        Error::Numeric(_) | Error::Contract(_) => EXIT_FAILURE,
    }
}
