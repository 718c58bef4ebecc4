//! Flat `key = value` config files, spliced into argv ahead of the
//! command-line flags so that flags given explicitly take precedence.

use std::ffi::OsString;
use std::path::Path;

use prefclust_core::io::read_text;
use prefclust_core::{Error, Result};

/// Parses `key = value` lines. Blank lines and `#` comments are ignored;
/// keys are flag names without the leading dashes.
pub fn parse_config(text: &str, source: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Data {
            path: source.to_string(),
            line: i + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim();
        if key.is_empty() || key.starts_with('-') || key == "config" {
            return Err(Error::Data {
                path: source.to_string(),
                line: i + 1,
                message: format!("invalid key {key:?}"),
            });
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

/// Flags for config entries; `true`/`false` values toggle switches.
fn as_flags(entries: &[(String, String)]) -> Vec<OsString> {
    entries
        .iter()
        .filter_map(|(k, v)| match v.as_str() {
            "true" => Some(format!("--{k}")),
            "false" => None,
            _ => Some(format!("--{k}={v}")),
        })
        .map(OsString::from)
        .collect()
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

/// Inserts the config file's flags right after the subcommand name.
pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let path = Path::new(&path);
    let entries = parse_config(&read_text(path)?, &path.display().to_string())?;
    if args.len() < 2 {
        return Ok(args);
    }
    let mut out = args[..2].to_vec();
    out.extend(as_flags(&entries));
    out.extend_from_slice(&args[2..]);
    Ok(out)
}
