//! `key=value` config files merged under the command-line flags.

use clap::Command;
use std::fs;

/// Pairs from a config file; blank lines and `#` comments are skipped.
pub fn read_pairs(path: &str) -> Result<Vec<(String, String)>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| format!("{path}:{}: expected key=value", i + 1))?;
        let k = k.trim().trim_start_matches("--");
        if k.is_empty() {
            return Err(format!("{path}:{}: empty key", i + 1));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Insert the config file's pairs as flags right after the innermost
/// subcommand, so that flags given on the command line, which come later,
/// override them.
pub fn merge(cmd: &Command, args: Vec<String>) -> Result<Vec<String>, String> {
    let Some(path) = config_path(&args) else { return Ok(args) };
    let pairs = read_pairs(&path)?;
    let mut pos = 1;
    let mut cur = cmd.clone();
    loop {
        let found = args.iter().enumerate().skip(pos).find_map(|(i, a)| {
            cur.get_subcommands()
                .find(|s| s.get_name() == a || s.get_all_aliases().any(|x| x == a))
                .map(|s| (i, s.clone()))
        });
        match found {
            Some((i, sub)) => {
                pos = i + 1;
                cur = sub;
            }
            None => break,
        }
    }
    let mut extra = Vec::new();
    for (k, v) in pairs {
        match v.as_str() {
            "true" => extra.push(format!("--{k}")),
            "false" => {}
            _ => extra.push(format!("--{k}={v}")),
        }
    }
    let mut out = args[..pos].to_vec();
    out.extend(extra);
    out.extend_from_slice(&args[pos..]);
    Ok(out)
}
