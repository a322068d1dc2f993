//! Input file formats and their loading, with field-level diagnostics.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use taper::experiments::{canonical_system, CanonicalSystem};
use taper::models::{ImpulseResponse, Mode, DEFAULT_TAIL_TOL};

use crate::CliError;

/// A response kernel given by modes, by explicit values, or by canonical id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub canonical: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modes: Option<Vec<Mode>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_tol: Option<f64>,
}

/// A resolved system.
#[derive(Debug, Clone)]
pub struct System {
    pub label: String,
    pub kernel: ImpulseResponse,
    pub canonical: Option<CanonicalSystem>,
}

impl SystemSpec {
    pub fn canonical(id: &str) -> Self {
        Self { canonical: Some(id.to_string()), ..Default::default() }
    }

    pub fn resolve(&self) -> Result<System, CliError> {
        let given = [self.canonical.is_some(), self.modes.is_some(), self.kernel.is_some()];
        if given.iter().filter(|&&b| b).count() != 1 {
            return Err(CliError::usage("system spec needs exactly one of `canonical`, `modes` or `kernel`"));
        }
        let domain = |field: &str, e: taper::Error| CliError::usage(format!("system spec field `{field}`: {e}"));
        if let Some(id) = &self.canonical {
            let sys = canonical_system(id).map_err(|e| domain("canonical", e))?;
            let kernel = sys.kernel().map_err(|e| domain("canonical", e))?;
            return Ok(System { label: self.id.clone().unwrap_or_else(|| sys.id.clone()), kernel, canonical: Some(sys) });
        }
        let kernel = if let Some(modes) = &self.modes {
            ImpulseResponse::from_modes(modes, self.tail_tol.unwrap_or(DEFAULT_TAIL_TOL)).map_err(|e| domain("modes", e))?
        } else {
            ImpulseResponse::from_values(self.kernel.clone().unwrap_or_default()).map_err(|e| domain("kernel", e))?
        };
        Ok(System { label: self.id.clone().unwrap_or_else(|| "custom".into()), kernel, canonical: None })
    }
}

/// Parses JSON; errors name the offending field path, line and column.
pub fn parse_json<T: DeserializeOwned>(text: &str, source: &str) -> Result<T, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { String::new() } else { format!(" (field `{path}`)") };
        CliError::usage(format!("{source}: {}{field}", e.inner()))
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    parse_json(&text, &path.display().to_string())
}

/// Inline JSON, or `@path` to read a file.
pub fn json_arg<T: DeserializeOwned>(value: &str, flag: &str) -> Result<T, CliError> {
    match value.strip_prefix('@') {
        Some(path) => read_json(Path::new(path)),
        None => parse_json(value, flag),
    }
}

/// Parses `lo:hi` pairs separated by commas.
pub fn parse_pairs(text: &str) -> Result<Vec<(f64, f64)>, CliError> {
    text.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| CliError::usage(format!("pair `{p}` is not of the form lo:hi")))?;
            Ok((parse_f64(a)?, parse_f64(b)?))
        })
        .collect()
}

pub fn parse_f64(text: &str) -> Result<f64, CliError> {
    text.trim().parse().map_err(|_| CliError::usage(format!("`{text}` is not a number")))
}

/// Parses a comma-separated list of numbers.
pub fn parse_list(text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',').map(parse_f64).collect()
}
