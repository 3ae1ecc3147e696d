//! Loading configs from disk with command-line overrides.
//!
//! Files ending in `.json` are read as JSON; anything else as TOML. Keys
//! mirror the field names of the target type, nested tables included, and
//! unknown keys are rejected.
//!
//! An override is `dotted.key=value`. The key walks nested tables,
//! creating missing ones. The value is read as a TOML value (`0.001`,
//! `true`, `[16, 24]`, `"text"`); anything that does not parse as one is
//! taken as a bare string, so `task=charlm` works unquoted.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::harness::train::TrainConfig;
use crate::network::NetworkSpec;
use crate::steps::{MirroredConfig, StepsConfig};

/// Types whose invariants can be checked after deserialization.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

impl Validate for StepsConfig {
    fn validate(&self) -> Result<()> {
        StepsConfig::validate(self)
    }
}

impl Validate for MirroredConfig {
    fn validate(&self) -> Result<()> {
        MirroredConfig::validate(self)
    }
}

impl Validate for NetworkSpec {
    fn validate(&self) -> Result<()> {
        NetworkSpec::validate(self)
    }
}

impl Validate for TrainConfig {
    fn validate(&self) -> Result<()> {
        TrainConfig::validate(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn of(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

fn toml_error(origin: &str, text: &str, e: &toml::de::Error) -> Error {
    match e.span() {
        Some(span) => {
            let (line, col) = line_col(text, span.start);
            Error::Config(format!("{origin}:{line}:{col}: {}", e.message().trim()))
        }
        None => Error::Config(format!("{origin}: {}", e.message().trim())),
    }
}

fn json_error(origin: &str, e: &serde_json::Error) -> Error {
    if e.line() == 0 {
        Error::Config(format!("{origin}: {e}"))
    } else {
        Error::Config(format!("{origin}:{}:{}: {e}", e.line(), e.column()))
    }
}

/// Parses `text` straight into `C`, keeping source positions in errors.
pub fn parse_str<C: DeserializeOwned>(text: &str, format: Format, origin: &str) -> Result<C> {
    match format {
        Format::Toml => toml::from_str(text).map_err(|e| toml_error(origin, text, &e)),
        Format::Json => serde_json::from_str(text).map_err(|e| json_error(origin, &e)),
    }
}

fn parse_tree(text: &str, format: Format, origin: &str) -> Result<Value> {
    match format {
        Format::Toml => {
            let table: toml::Table = toml::from_str(text).map_err(|e| toml_error(origin, text, &e))?;
            serde_json::to_value(table).map_err(|e| Error::Config(format!("{origin}: {e}")))
        }
        Format::Json => serde_json::from_str(text).map_err(|e| json_error(origin, &e)),
    }
}

fn override_value(raw: &str) -> Value {
    let raw = raw.trim();
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .and_then(|v| serde_json::to_value(v).ok())
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Applies one `dotted.key=value` override to a parsed tree.
pub fn apply_override(tree: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!(
                "override {key:?}: {} is not a table",
                parts[..i].join(".")
            )));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), override_value(raw));
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Parses `text`, applies `overrides` in order and validates the result.
pub fn load_str<C: DeserializeOwned + Validate>(
    text: &str,
    format: Format,
    origin: &str,
    overrides: &[String],
) -> Result<C> {
    let cfg: C = if overrides.is_empty() {
        parse_str(text, format, origin)?
    } else {
        let mut tree = parse_tree(text, format, origin)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("{origin} (after overrides): {e}")))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file, applies overrides and validates every invariant.
pub fn load_config<C: DeserializeOwned + Validate>(path: &Path, overrides: &[String]) -> Result<C> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    load_str(&text, Format::of(path), &path.display().to_string(), overrides)
}

pub fn emit_config<C: Serialize>(cfg: &C, format: Format) -> Result<String> {
    match format {
        Format::Toml => toml::to_string(cfg).map_err(|e| Error::Config(format!("cannot emit config: {e}"))),
        Format::Json => serde_json::to_string_pretty(cfg)
            .map(|s| s + "\n")
            .map_err(|e| Error::Config(format!("cannot emit config: {e}"))),
    }
}
