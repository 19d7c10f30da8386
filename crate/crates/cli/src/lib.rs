//! Command-line driver for `ei-core`.
//!
//! `ei <command> [--config FILE] [--<key> VALUE ...]`. Every config key is
//! also a flag of the same name; see [`config::KEYS`] for the full list.

pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod run;

use std::ffi::OsString;
use std::path::Path;
use std::time::Instant;

use clap::{Arg, ArgMatches};

use crate::config::{parse_config_text, RunConfig, KEYS, OUTPUT_DIR_VAR};
use crate::error::{CliError, ExitStatus, Result};
use crate::run::{Command, COMMANDS};

pub fn cli() -> clap::Command {
    let mut cmd = clap::Command::new("ei")
        .about("Extremum-increment training for bias-free sigmoid networks")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .global(true)
                .value_name("FILE")
                .help("key = value run configuration"),
        );
    for (key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        cmd = cmd.arg(Arg::new(*key).long(*key).global(true).value_name("VALUE").help(help));
    }
    for (name, about) in COMMANDS {
        cmd = cmd.subcommand(clap::Command::new(*name).about(*about));
    }
    cmd
}

fn overrides(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    if let Some(path) = m.get_one::<String>("config") {
        let path = Path::new(path);
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        out.extend(parse_config_text(&text, path)?);
    }
    for (key, _, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

/// Resolves the configuration, runs the command and writes its reports.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<ExitStatus> {
    let start = Instant::now();
    let art = run::run(command, cfg)?;
    let compute = start.elapsed().as_secs_f64();
    let written = output::emit(&cfg.output_dir, &art, &cfg.echo, cfg.seed, &[("compute_s", compute)])?;
    for p in written {
        eprintln!("wrote {}", p.display());
    }
    Ok(art.status)
}

/// Entry point shared by the binary and the tests; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitStatus::Config.code() } else { 0 };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = name.parse::<Command>().and_then(|command| {
        let cfg = RunConfig::resolve(&overrides(sub)?, std::env::var(OUTPUT_DIR_VAR).ok())?;
        execute(command, &cfg)
    });
    match result {
        Ok(status) => {
            if status != ExitStatus::Ok {
                eprintln!("ei: {name} finished with status {status:?}");
            }
            status.code()
        }
        Err(e) => {
            eprintln!("ei: error: {e}");
            e.status().code()
        }
    }
}
