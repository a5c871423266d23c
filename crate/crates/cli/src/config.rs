//! Plain-text `key = value` settings merged from a file and flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::CliError;

/// Resolved settings of one command. Keys are restricted to the command's
/// documented list.
#[derive(Debug, Clone)]
pub struct Settings {
    command: &'static str,
    allowed: &'static [&'static str],
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn new(command: &'static str, allowed: &'static [&'static str]) -> Self {
        Self { command, allowed, values: BTreeMap::new() }
    }

    /// Reads `key = value` lines. Blank lines and `#` comments are
    /// skipped; a `command` line must name this command.
    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", path.display(), n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "command" {
                if value != self.command {
                    return Err(CliError::Usage(format!("{} is a config for `{value}`, not `{}`", path.display(), self.command)));
                }
                continue;
            }
            self.check_key(key)?;
            self.values.insert(key.to_string(), value.to_string());
        }
        Ok(())
    }

    fn check_key(&self, key: &str) -> Result<(), CliError> {
        if self.allowed.contains(&key) {
            Ok(())
        } else {
            Err(CliError::Usage(format!("unknown key `{key}` for `{}` (known: {})", self.command, self.allowed.join(", "))))
        }
    }

    /// Flag override; `None` leaves the current value.
    pub fn set(&mut self, key: &str, value: Option<impl Display>) {
        debug_assert!(self.allowed.contains(&key), "{key}");
        if let Some(v) = value {
            self.values.insert(key.to_string(), v.to_string());
        }
    }

    /// Boolean switch: only a raised flag overrides.
    pub fn set_flag(&mut self, key: &str, raised: bool, value: impl Display) {
        if raised {
            self.set(key, Some(value));
        }
    }

    pub fn default(&mut self, key: &str, value: impl Display) {
        debug_assert!(self.allowed.contains(&key), "{key}");
        self.values.entry(key.to_string()).or_insert_with(|| value.to_string());
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key).ok_or_else(|| CliError::Usage(format!("missing setting `{key}`")))?;
        raw.parse().map_err(|e| CliError::Usage(format!("bad value for `{key}`: {raw:?} ({e})")))
    }

    /// Empty values count as unset.
    pub fn get_opt<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.raw(key) {
            None | Some("") => Ok(None),
            Some(_) => self.get(key).map(Some),
        }
    }

    /// Every resolved key in a form `--config` accepts.
    pub fn snapshot(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.values {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.display().to_string(), e))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.snapshot()).map_err(|e| CliError::Io(path.display().to_string(), e))
    }
}

pub const SNAPSHOT_FILE: &str = "config.txt";

pub const SYNTH_KEYS: &[&str] = &["out", "ids", "per_id", "clothes", "seed", "height", "width"];

pub const TRAIN_KEYS: &[&str] = &[
    "data",
    "out",
    "variant",
    "epochs",
    "steps",
    "lr",
    "lr_floor",
    "momentum",
    "weight_decay",
    "alpha",
    "margin",
    "lambda_cls",
    "lambda_tri",
    "lambda_mcl",
    "lambda_hcl",
    "cad",
    "saj",
    "pie",
    "jigsaw",
    "shielding",
    "pie_triplet",
    "spread",
    "p",
    "k",
    "seed",
    "checkpoint_every",
    "resume",
    "pretrained",
];

pub const EVAL_KEYS: &[&str] =
    &["data", "out", "checkpoint", "query_split", "gallery_split", "exclude_same_camera", "exclude_same_clothes", "export_similarity"];

pub const EXTRACT_KEYS: &[&str] = &["data", "out", "checkpoint", "split", "normalize"];
