//! JSON-Lines dataset manifest: one artefact–clean pair per line.

use crate::frame::Channel;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Artefact classes addressed by the simulators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtefactClass {
    LineDropout,
    GainNoise,
    TipTailing,
    PhaseHop,
}

impl ArtefactClass {
    pub const ALL: [ArtefactClass; 4] = [
        ArtefactClass::LineDropout,
        ArtefactClass::GainNoise,
        ArtefactClass::TipTailing,
        ArtefactClass::PhaseHop,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArtefactClass::LineDropout => "line_dropout",
            ArtefactClass::GainNoise => "gain_noise",
            ArtefactClass::TipTailing => "tip_tailing",
            ArtefactClass::PhaseHop => "phase_hop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Bench,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: String,
    pub artefact_path: String,
    pub mask_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ignore_path: Option<String>,
    pub channel: Channel,
    pub scan_size_um: f32,
    pub z_scale: f32,
    pub split: Split,
    pub artefact_class: ArtefactClass,
}

impl ManifestEntry {
    /// Frame identifier shared by all masks drawn from the same clean frame.
    pub fn frame_id(&self) -> String {
        Path::new(&self.clean_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.id.clone())
    }
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {message}")]
    MissingField { line: usize, message: String },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: path `{path}` does not exist")]
    DanglingPath { line: usize, path: String },
}

/// Resolves a manifest-relative POSIX path.
pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    base.join(relative)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(raw).map_err(|e| {
            let message = e.to_string();
            if message.starts_with("missing field") {
                ManifestError::MissingField { line, message }
            } else {
                ManifestError::Parse { line, message }
            }
        })?;
        if !seen.insert(entry.id.clone()) {
            return Err(ManifestError::DuplicateId { line, id: entry.id });
        }
        out.push(entry);
    }
    Ok(out)
}

/// Reads all entries in file order. With `validate`, every referenced file must exist.
pub fn read_manifest(path: impl AsRef<Path>, validate: bool) -> Result<Vec<ManifestEntry>, ManifestError> {
    let path = path.as_ref();
    let entries = parse_manifest(&fs::read_to_string(path)?)?;
    if validate {
        for (i, e) in entries.iter().enumerate() {
            let paths = [Some(&e.clean_path), Some(&e.artefact_path), Some(&e.mask_path), e.ignore_path.as_ref()];
            for p in paths.into_iter().flatten() {
                if !resolve(path, p).exists() {
                    return Err(ManifestError::DanglingPath {
                        line: i + 1,
                        path: p.clone(),
                    });
                }
            }
        }
    }
    Ok(entries)
}

pub fn entry_line(entry: &ManifestEntry) -> String {
    serde_json::to_string(entry).expect("manifest entries always serialize")
}

/// Appends one entry, rejecting an id already present in the file.
pub fn append_manifest(path: impl AsRef<Path>, entry: &ManifestEntry) -> Result<(), ManifestError> {
    let path = path.as_ref();
    let existing = if path.exists() {
        parse_manifest(&fs::read_to_string(path)?)?
    } else {
        Vec::new()
    };
    if existing.iter().any(|e| e.id == entry.id) {
        return Err(ManifestError::DuplicateId {
            line: existing.len() + 1,
            id: entry.id.clone(),
        });
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", entry_line(entry))?;
    Ok(())
}

/// Writes a whole manifest, replacing any previous file.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<(), ManifestError> {
    let mut text = String::new();
    let mut seen = HashSet::new();
    for (i, e) in entries.iter().enumerate() {
        if !seen.insert(&e.id) {
            return Err(ManifestError::DuplicateId {
                line: i + 1,
                id: e.id.clone(),
            });
        }
        text.push_str(&entry_line(e));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}
