//! Scenario runner behind the `smallgain` binary.
//!
//! Every command is a pure function of a [`ScenarioConfig`]; it returns the
//! exit code, a JSON report and the artifact files, and never touches the
//! file system itself.

pub mod commands;
pub mod config;

use serde_json::Value;

pub use commands::{run, Command};
pub use config::ScenarioConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] smallgain::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Exit-code contract shared by all commands.
pub mod exit {
    pub const PASS: i32 = 0;
    pub const FAIL: i32 = 1;
    pub const INCONCLUSIVE: i32 = 2;
    pub const INPUT: i32 = 3;
}

#[derive(Debug, Clone)]
pub struct CommandOutput {
    pub exit: i32,
    pub report: Value,
    /// File name and contents, written below the output directory.
    pub artifacts: Vec<(String, Vec<u8>)>,
}

/// Adds run metadata; `generated_at` is null under a fixed clock so reports
/// compare byte for byte.
pub fn stamp(report: &mut Value, seed: u64, fixed_clock: bool) {
    let generated_at = if fixed_clock {
        Value::Null
    } else {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| Value::from(d.as_secs()))
            .unwrap_or(Value::Null)
    };
    if let Value::Object(map) = report {
        map.insert("version".into(), Value::from(env!("CARGO_PKG_VERSION")));
        map.insert("seed".into(), Value::from(seed));
        map.insert("generated_at".into(), generated_at);
    }
}

/// Pretty JSON with a trailing newline.
pub fn render(report: &Value) -> Result<Vec<u8>, CliError> {
    let mut out = serde_json::to_vec_pretty(report)?;
    out.push(b'\n');
    Ok(out)
}
