//! Report emission: JSON lines for machine consumption plus CSV files for
//! plotting.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::errors::{CliResult, PathCtx};

/// Writes one JSON object per line.
pub fn write_jsonl(path: &Path, rows: &[Value]) -> CliResult<()> {
    let mut text = String::new();
    for row in rows {
        text.push_str(&serde_json::to_string(row).at(path)?);
        text.push('\n');
    }
    fs::write(path, text).at(path)
}

/// Minimal CSV: values never contain commas or quotes in our reports, so
/// plain joining is exact.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).at(path)
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}
