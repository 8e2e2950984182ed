//! Flag / config-file / default layering and the CLI error type.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// `Usage` maps to exit code 2, `Runtime` to 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Runtime(_) => "runtime",
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<prunekv::Error> for CliError {
    fn from(e: prunekv::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

const SECTIONS: [&str; 5] = ["train", "generate", "benchmark", "analyze", "selftest"];

/// Parsed `--config` file: one table per subcommand.
#[derive(Debug, Default)]
pub struct ConfigFile {
    sections: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("malformed config {}: {e}", path.display())))?;
        let Value::Object(sections) = serde_json::to_value(table).map_err(|e| CliError::Usage(e.to_string()))? else {
            unreachable!("a TOML document is a table");
        };
        for (key, value) in &sections {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!("unknown config section `{key}`")));
            }
            if !value.is_object() {
                return Err(CliError::Usage(format!("config section `{key}` must be a table")));
            }
        }
        Ok(Self { sections })
    }

    /// Flags over this file's `section` over `R::default()`.
    pub fn resolve<F: Serialize, R: DeserializeOwned>(&self, section: &str, flags: &F) -> CliResult<R> {
        let mut merged = match self.sections.get(section) {
            Some(Value::Object(m)) => m.clone(),
            _ => Map::new(),
        };
        if let Value::Object(set) = serde_json::to_value(flags)? {
            merged.extend(set.into_iter().filter(|(_, v)| !v.is_null()));
        }
        serde_json::from_value(Value::Object(merged))
            .map_err(|e| CliError::Usage(format!("invalid `{section}` settings: {e}")))
    }
}

pub fn require_out(out: &Option<PathBuf>) -> CliResult<&Path> {
    out.as_deref()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out or `out` in the config)".into()))
}

pub fn read_input(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize)]
    struct Flags {
        a: Option<u32>,
        b: Option<String>,
    }

    #[derive(Debug, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Resolved {
        a: u32,
        b: String,
        c: f64,
    }

    impl Default for Resolved {
        fn default() -> Self {
            Self {
                a: 1,
                b: "x".into(),
                c: 0.5,
            }
        }
    }

    fn file(text: &str) -> ConfigFile {
        let dir = std::env::temp_dir().join(format!("prunekv-cfg-{}-{}", std::process::id(), text.len()));
        std::fs::write(&dir, text).unwrap();
        let cfg = ConfigFile::load(&dir);
        std::fs::remove_file(&dir).unwrap();
        cfg.unwrap()
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let cfg = file("[train]\na = 5\nc = 2.0\n");
        let flags = Flags { a: Some(9), b: None };
        let r: Resolved = cfg.resolve("train", &flags).unwrap();
        assert_eq!(
            r,
            Resolved {
                a: 9,
                b: "x".into(),
                c: 2.0
            }
        );
    }

    #[test]
    fn unknown_keys_are_usage_errors() {
        let cfg = file("[train]\nbogus = 1\n");
        let r: CliResult<Resolved> = cfg.resolve("train", &Flags { a: None, b: None });
        assert!(matches!(r, Err(CliError::Usage(_))));
    }

    #[test]
    fn unknown_sections_are_rejected() {
        let path = std::env::temp_dir().join(format!("prunekv-cfg-sec-{}", std::process::id()));
        std::fs::write(&path, "[serve]\nport = 1\n").unwrap();
        assert!(matches!(ConfigFile::load(&path), Err(CliError::Usage(_))));
        std::fs::remove_file(&path).unwrap();
    }
}
