//! Report files: `<command>.summary.txt`, `<command>.json`,
//! `<command>.timings.json` and any CSV side files.
//!
//! Timings live in their own file so the JSON report is byte-identical
//! across repeated runs of the same configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use crate::error::{CliError, ExitStatus, Result};

#[derive(Debug, Clone)]
pub struct Artifacts {
    pub command: String,
    pub status: ExitStatus,
    /// Ordered `key = value` lines for the summary.
    pub summary: Vec<(String, String)>,
    pub result: Value,
    pub csv: Option<(String, String)>,
}

impl Artifacts {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            status: ExitStatus::Ok,
            summary: Vec::new(),
            result: Value::Null,
            csv: None,
        }
    }

    pub fn line(&mut self, key: impl Into<String>, value: impl ToString) {
        self.summary.push((key.into(), value.to_string()));
    }
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn status_name(s: ExitStatus) -> &'static str {
    match s {
        ExitStatus::Ok => "ok",
        ExitStatus::Exhausted => "exhausted",
        ExitStatus::Diverged => "diverged",
        _ => "error",
    }
}

/// Writes every artifact and returns the paths written.
pub fn emit(
    dir: &Path,
    art: &Artifacts,
    echo: &BTreeMap<String, String>,
    seed: u64,
    timings: &[(&str, f64)],
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut written = Vec::new();

    let mut text = format!(
        "command = {}\nstatus = {}\nseed = {seed}\n",
        art.command,
        status_name(art.status)
    );
    for (k, v) in &art.summary {
        text.push_str(&format!("{k} = {v}\n"));
    }
    for (k, v) in echo {
        text.push_str(&format!("config.{k} = {v}\n"));
    }
    let path = dir.join(format!("{}.summary.txt", art.command));
    write(&path, &text)?;
    written.push(path);

    let report = json!({
        "command": art.command,
        "status": status_name(art.status),
        "seed": seed,
        "config": echo,
        "result": art.result,
    });
    let path = dir.join(format!("{}.json", art.command));
    let body = serde_json::to_string_pretty(&report).expect("reports are plain data");
    write(&path, &(body + "\n"))?;
    written.push(path);

    let t: BTreeMap<&str, f64> = timings.iter().copied().collect();
    let path = dir.join(format!("{}.timings.json", art.command));
    write(&path, &(serde_json::to_string_pretty(&t).expect("plain map") + "\n"))?;
    written.push(path);

    if let Some((name, body)) = &art.csv {
        let path = dir.join(name);
        write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}
