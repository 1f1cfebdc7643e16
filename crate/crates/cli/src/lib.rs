//! Library surface of the `cbnt` command-line tool; commands are callable
//! in-process so integration tests can drive full pipelines.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod slices;

/// Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
/// failure.
pub fn exit_code_for(err: &anyhow::Error) -> i32 {
    if let Some(core) = err.downcast_ref::<cbnt_core::Error>() {
        return match core {
            cbnt_core::Error::Config(_) => 2,
            cbnt_core::Error::NonFiniteGradient(_)
            | cbnt_core::Error::Divergence { .. }
            | cbnt_core::Error::Numerical(_) => 4,
            _ => 3,
        };
    }
    // Config parsing/validation failures surface as anyhow context chains.
    let text = format!("{err:#}");
    if text.contains("config") || text.contains("CBNT_SEED") || text.contains("--set") {
        2
    } else {
        3
    }
}
