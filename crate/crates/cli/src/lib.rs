//! Commands behind the `surgtwin` binary and the supervisor console service.

pub mod commands;
pub mod console;
