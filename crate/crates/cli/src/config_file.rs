//! `--config FILE`: a TOML key/value file whose keys are flag names.
//!
//! The file's entries are spliced in as flags right after the subcommand,
//! ahead of the real command line, and every flag overrides earlier copies
//! of itself, so explicit flags win.

use std::ffi::OsString;

use insertion_core::{Error, Result};

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
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

/// Flag list for the entries of a config file, in file order.
pub fn config_flags(text: &str) -> Result<Vec<OsString>> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config file: {e}")))?;
    let mut out = Vec::new();
    for (key, value) in table {
        let flag = format!("--{}", key.replace('_', "-"));
        let v = match value {
            toml::Value::String(s) => s,
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            toml::Value::Boolean(b) => b.to_string(),
            other => {
                return Err(Error::Config(format!(
                    "config key {key}: unsupported value {other}"
                )))
            }
        };
        out.push(flag.into());
        out.push(v.into());
    }
    Ok(out)
}

pub fn expand_args(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    if args.len() < 2 {
        return Ok(args);
    }
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.to_string_lossy())))?;
    let mut out = args[..2].to_vec();
    out.extend(config_flags(&text)?);
    out.extend_from_slice(&args[2..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_follow_file_order() {
        let flags = config_flags("steps = 20\nlearning_rate = 0.001\ntask = \"copy\"\n").unwrap();
        let s: Vec<String> = flags.iter().map(|f| f.to_string_lossy().into_owned()).collect();
        assert!(s.contains(&"--learning-rate".to_string()));
        assert!(s.windows(2).any(|w| w[0] == "--steps" && w[1] == "20"));
    }

    #[test]
    fn config_is_spliced_before_user_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "steps = 5\n").unwrap();
        let args: Vec<OsString> = ["bin", "train", "--config", p.to_str().unwrap(), "--steps", "7"]
            .iter()
            .map(OsString::from)
            .collect();
        let out = expand_args(args).unwrap();
        let s: Vec<String> = out.iter().map(|f| f.to_string_lossy().into_owned()).collect();
        assert_eq!(&s[..4], &["bin", "train", "--steps", "5"]);
        assert_eq!(s.last().unwrap(), "7");
    }

    #[test]
    fn rejects_tables() {
        assert!(config_flags("[section]\na = 1\n").is_err());
    }
}
