//! Flag and config-file resolution: defaults < config file < flags.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// Keys accepted in a config file. Each matches a long flag name.
pub const KEYS: &[&str] = &[
    "data",
    "checkpoint",
    "run",
    "qrels",
    "report",
    "seed",
    "window-size",
    "strategy",
    "stride",
    "tau",
    "calibration-weight",
    "epochs",
    "batch-size",
    "lr",
    "no-point-loss",
    "no-calibration",
    "no-in-batch",
    "no-adaptive",
    "use-point-scores",
    "train-queries",
    "eval-queries",
    "eval-candidates",
    "noise",
    "d-model",
    "layers",
    "heads",
    "d-ff",
    "max-candidate-tokens",
    "sizes",
    "repetitions",
    "tag",
    "log",
];

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation; exit code 2.
    Usage(String),
    /// A stage failed while running; exit code 1.
    Runtime { stage: &'static str, message: String },
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime { stage, message } => write!(f, "{stage} failed: {message}"),
        }
    }
}

pub fn usage(m: impl Into<String>) -> CliError {
    CliError::Usage(m.into())
}

/// Wraps library errors with the stage that produced them.
pub trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T, E: fmt::Display> Stage<T> for Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime {
            stage,
            message: e.to_string(),
        })
    }
}

/// Values from a flat `key = value` file; `#` starts a comment.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("--config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|m| usage(format!("--config {}: {m}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
            let key = k.trim().replace('_', "-");
            if !KEYS.contains(&key.as_str()) {
                return Err(format!("line {}: unknown key {key:?}", n + 1));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(Self { values })
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }
}

/// Resolves one setting from a flag, then the config file.
pub struct Resolver<'a> {
    pub file: &'a ConfigFile,
}

impl Resolver<'_> {
    pub fn opt<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.raw(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| usage(format!("invalid value {v:?} for {key} in config file: {e}"))),
        }
    }

    pub fn get<T: FromStr>(&self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.opt(key, flag)?.unwrap_or(default))
    }

    pub fn switch(&self, key: &str, flag: bool) -> Result<bool, CliError> {
        Ok(flag || self.opt::<bool>(key, None)?.unwrap_or(false))
    }

    pub fn required_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        self.opt(key, flag)?
            .ok_or_else(|| usage(format!("missing required --{key}")))
    }

    /// Like [`Self::required_path`], also checking that the path exists.
    pub fn existing_path(&self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let p = self.required_path(key, flag)?;
        if !p.exists() {
            return Err(usage(format!("--{key} {}: no such file or directory", p.display())));
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = ConfigFile::parse("epochs = 5\n# note\nlr=0.01 # trailing\nno_point_loss = true\n").unwrap();
        let r = Resolver { file: &file };
        assert_eq!(r.get("epochs", None, 3usize).unwrap(), 5);
        assert_eq!(r.get("epochs", Some(7usize), 3).unwrap(), 7);
        assert_eq!(r.get("lr", None, 1.0f64).unwrap(), 0.01);
        assert_eq!(r.get("tau", None, 10.0f64).unwrap(), 10.0);
        assert!(r.switch("no-point-loss", false).unwrap());
        assert!(!r.switch("no-calibration", false).unwrap());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ConfigFile::parse("bogus = 1").is_err());
        assert!(ConfigFile::parse("epochs").is_err());
        let file = ConfigFile::parse("epochs = many").unwrap();
        let r = Resolver { file: &file };
        assert!(matches!(r.get("epochs", None, 3usize), Err(CliError::Usage(_))));
    }
}
