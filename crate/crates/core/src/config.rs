//! `key=value` config files.
//!
//! One setting per line; blank lines and lines starting with `#` are
//! ignored. Keys are the long flag names of the command (`samples=8`,
//! `lr-decay=0.92`). A file's settings are spliced in ahead of the command
//! line flags, so explicit flags win.

use std::ffi::OsString;
use std::fs;

use clap::Command;

use crate::error::{Error, Result};

pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("config line {}: expected key=value, got {line:?}", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::config(format!("config line {}: empty key", n + 1)));
        }
        if k == "config" {
            return Err(Error::config("config files cannot include other config files"));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(p.into());
        }
    }
    None
}

/// Expands `--config FILE` into `--key=value` flags placed right after the
/// subcommand. Keys the subcommand does not know are config errors.
pub fn splice_config(args: Vec<OsString>, cmd: &Command) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let Some(sub_name) = args.get(1).map(|s| s.to_string_lossy().into_owned()) else {
        return Ok(args);
    };
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| Error::config(format!("--config needs a subcommand, got {sub_name:?}")))?;
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let mut spliced = vec![args[0].clone(), args[1].clone()];
    for (k, v) in parse_config(&text)? {
        if !sub.get_arguments().any(|a| a.get_long() == Some(k.as_str())) {
            return Err(Error::config(format!("unknown config key {k:?} for {sub_name}")));
        }
        spliced.push(format!("--{k}={v}").into());
    }
    spliced.extend(args.into_iter().skip(2));
    Ok(spliced)
}
