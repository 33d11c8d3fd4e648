//! Plain-text run configuration: `key=value` lines with section-prefixed
//! keys. Blank lines and `#` comments are ignored; keys outside the known
//! vocabulary are usage errors so typos cannot silently fall back to
//! defaults.

use std::collections::BTreeMap;
use std::path::Path;

use crate::CliError;

pub const KNOWN_KEYS: &[&str] = &[
    "phantom.dims",
    "phantom.labels",
    "phantom.subjects",
    "phantom.misalign_sigma",
    "phantom.noise_sigma",
    "phantom.seed",
    "train.patch",
    "train.stride",
    "train.fg_patches",
    "train.bg_patches",
    "train.atlas_draw",
    "train.epochs",
    "train.batch",
    "train.seed",
    "train.levels",
    "train.base",
    "train.augment",
    "train.lr0",
    "fusion.beta",
    "fusion.patch_radius",
    "fusion.search_radius",
    "fusion.ridge",
    "fusion.tau",
    "eval.labels",
];

#[derive(Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    /// Loads the file when a path is given; no file means all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("cannot read config {}: {e}", path.display())))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::Usage(format!(
                    "{} line {}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            let key = k.trim().to_string();
            if !KNOWN_KEYS.contains(&key.as_str()) {
                return Err(CliError::Usage(format!(
                    "{} line {}: unknown key {key:?}",
                    path.display(),
                    lineno + 1
                )));
            }
            values.insert(key, v.trim().to_string());
        }
        Ok(RunConfig { values })
    }

    fn parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value {raw:?} for {key}"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize, CliError> {
        self.parsed(key, default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64, CliError> {
        self.parsed(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64, CliError> {
        self.parsed(key, default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool, CliError> {
        self.parsed(key, default)
    }

    /// `AxBxC` triple, e.g. `24x24x24`.
    pub fn triple_or(
        &self,
        key: &str,
        default: (usize, usize, usize),
    ) -> Result<(usize, usize, usize), CliError> {
        let Some(raw) = self.values.get(key) else {
            return Ok(default);
        };
        let parts: Vec<&str> = raw.split('x').collect();
        if parts.len() != 3 {
            return Err(CliError::Usage(format!(
                "bad value {raw:?} for {key}: want AxBxC"
            )));
        }
        let mut d = [0usize; 3];
        for (slot, p) in d.iter_mut().zip(&parts) {
            *slot = p
                .parse()
                .map_err(|_| CliError::Usage(format!("bad value {raw:?} for {key}: want AxBxC")))?;
        }
        Ok((d[0], d[1], d[2]))
    }

    /// Comma-separated label list, e.g. `1,2,3`.
    pub fn labels_or(&self, key: &str, default: Vec<u32>) -> Result<Vec<u32>, CliError> {
        let Some(raw) = self.values.get(key) else {
            return Ok(default);
        };
        raw.split(',')
            .map(|p| {
                p.trim()
                    .parse()
                    .map_err(|_| CliError::Usage(format!("bad label {p:?} in {key}")))
            })
            .collect()
    }
}

pub fn triple_string(t: (usize, usize, usize)) -> String {
    format!("{}x{}x{}", t.0, t.1, t.2)
}
