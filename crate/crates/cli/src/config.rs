//! `--config FILE` support: `key = value` lines become `--key value` flags,
//! inserted right after the subcommand so explicit flags still win.

use std::ffi::OsString;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};

/// Global flags that take a value and may appear before the subcommand.
const GLOBAL_VALUE_FLAGS: &[&str] = &["--seed", "--config", "--out-dir"];

pub fn parse_config(text: &str) -> Result<Vec<String>> {
    let mut args = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("config line {}: expected key = value, got {raw:?}", i + 1);
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            bail!("config line {}: invalid key {:?}", i + 1, key);
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            _ => {
                args.push(format!("--{key}"));
                args.push(value.to_string());
            }
        }
    }
    Ok(args)
}

fn config_path(argv: &[OsString]) -> Option<OsString> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

/// Index just past the subcommand name (and a task positional, if present).
fn insertion_point(argv: &[OsString], task_subcommands: &[&str]) -> Option<usize> {
    let mut i = 1;
    while i < argv.len() {
        let s = argv[i].to_string_lossy();
        if GLOBAL_VALUE_FLAGS.contains(&s.as_ref()) {
            i += 2;
        } else if s.starts_with('-') {
            i += 1;
        } else {
            let mut at = i + 1;
            if task_subcommands.contains(&s.as_ref()) && argv.get(at).is_some_and(|t| !t.to_string_lossy().starts_with('-')) {
                at += 1;
            }
            return Some(at);
        }
    }
    None
}

/// Expands `--config` into explicit flags. Later occurrences override earlier ones.
pub fn expand_args(argv: Vec<OsString>, task_subcommands: &[&str]) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let path = Path::new(&path);
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let extra = parse_config(&text)?;
    let Some(at) = insertion_point(&argv, task_subcommands) else {
        return Ok(argv);
    };
    let mut out = argv[..at].to_vec();
    out.extend(extra.into_iter().map(OsString::from));
    out.extend_from_slice(&argv[at..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn parses_pairs_and_booleans() {
        let args = parse_config("# comment\nbatch_size = 4\nround-robin = true\nfreeze_encoder=false\n\nlr=0.001 # trailing").unwrap();
        assert_eq!(args, vec!["--batch-size", "4", "--round-robin", "--lr", "0.001"]);
        assert!(parse_config("nonsense").is_err());
    }

    #[test]
    fn inserts_after_subcommand_and_task() {
        let argv = os(&["wasmrev", "--seed", "3", "finetune", "fpi", "--epochs", "1"]);
        assert_eq!(insertion_point(&argv, &["finetune"]), Some(5));
        let argv = os(&["wasmrev", "pretrain", "--epochs", "1"]);
        assert_eq!(insertion_point(&argv, &["finetune"]), Some(2));
        assert_eq!(insertion_point(&os(&["wasmrev", "--seed", "1"]), &[]), None);
    }
}
