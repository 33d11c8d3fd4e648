//! Checkpoint directories: one DLFV file per parameter plus text manifests.
//!
//! A checkpoint is a directory containing `manifest.txt` (index, name,
//! shape, element count per parameter), `config.txt` (caller-defined
//! `key=value` pairs) and one `p{index:04}.dlfv` volume per parameter with
//! the elements flattened along x. Nothing in the format depends on time or
//! machine, so identical parameters produce byte-identical directories.

use std::path::Path;

use crate::error::{Error, Result};
use crate::volcore::{read_volume, write_volume, Volume};

/// One named parameter block with its logical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamEntry {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Self {
        ParamEntry {
            name: name.into(),
            shape,
            data,
        }
    }
}

fn shape_string(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad shape component {p:?} in manifest")))
        })
        .collect()
}

/// Writes every entry under `dir`, creating the directory if needed.
pub fn save_params(dir: &Path, entries: &[ParamEntry]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (idx, e) in entries.iter().enumerate() {
        if e.name.is_empty() || e.name.contains(['\t', '\n']) {
            return Err(Error::Format(format!(
                "parameter name {:?} is empty or contains tab/newline",
                e.name
            )));
        }
        let count: usize = e.shape.iter().product();
        if count != e.data.len() {
            return Err(Error::Shape(format!(
                "parameter {} shape {:?} wants {count} values, got {}",
                e.name,
                e.shape,
                e.data.len()
            )));
        }
        manifest.push_str(&format!(
            "{idx}\t{}\t{}\t{count}\n",
            e.name,
            shape_string(&e.shape)
        ));
        let vol = Volume::new(1, (e.data.len(), 1, 1), [1.0, 1.0, 1.0], e.data.clone())?;
        write_volume(&vol, dir.join(format!("p{idx:04}.dlfv")))?;
    }
    std::fs::write(dir.join("manifest.txt"), manifest)?;
    Ok(())
}

/// Reads all entries back in manifest order.
pub fn load_params(dir: &Path) -> Result<Vec<ParamEntry>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let mut entries = Vec::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(Error::Format(format!(
                "manifest line {} has {} fields, want 4",
                lineno + 1,
                parts.len()
            )));
        }
        let idx: usize = parts[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad index {:?} in manifest", parts[0])))?;
        if idx != lineno {
            return Err(Error::Format(format!(
                "manifest index {idx} out of order at line {}",
                lineno + 1
            )));
        }
        let shape = parse_shape(parts[2])?;
        let count: usize = parts[3]
            .parse()
            .map_err(|_| Error::Format(format!("bad count {:?} in manifest", parts[3])))?;
        if shape.iter().product::<usize>() != count {
            return Err(Error::Format(format!(
                "manifest line {}: shape {} does not have {count} elements",
                lineno + 1,
                parts[2]
            )));
        }
        let vol = read_volume(dir.join(format!("p{idx:04}.dlfv")))?;
        if vol.data().len() != count {
            return Err(Error::Format(format!(
                "parameter {} holds {} values, manifest says {count}",
                parts[1],
                vol.data().len()
            )));
        }
        entries.push(ParamEntry::new(parts[1], shape, vol.data().to_vec()));
    }
    Ok(entries)
}

/// Writes `key=value` lines in the given order.
pub fn save_config(path: &Path, pairs: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in pairs {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Format(format!("bad config pair {k:?}={v:?}")));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Format(format!(
                "config line {} has no '=': {line:?}",
                lineno + 1
            )));
        };
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}
