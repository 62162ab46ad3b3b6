use std::path::Path;
use std::time::SystemTime;

use anyhow::Context;
use serde::Serialize;

/// Top-level schema shared by every report. `timestamp` is the only field
/// that differs between identical invocations.
#[derive(Debug, Serialize)]
pub struct Report<'a, C: Serialize, R: Serialize> {
    pub version: &'static str,
    pub timestamp: String,
    pub command: &'a str,
    pub config: C,
    pub results: R,
    pub warnings: Vec<String>,
}

pub fn write<C: Serialize, R: Serialize>(
    path: &Path,
    command: &str,
    config: C,
    results: R,
    warnings: Vec<String>,
) -> anyhow::Result<()> {
    let report = Report {
        version: cellcomm::VERSION,
        timestamp: humantime::format_rfc3339_seconds(SystemTime::now()).to_string(),
        command,
        config,
        results,
        warnings,
    };
    cellcomm::io::write_json(path, &report).with_context(|| format!("writing report {}", path.display()))
}
