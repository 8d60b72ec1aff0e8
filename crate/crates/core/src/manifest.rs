// SPDX-License-Identifier: Apache-2.0

//! Corpus manifests: one JSON object per line, `{program_id, path, seed}`.
//!
//! Paths are relative to the manifest's directory. A manifest may be lazy:
//! when a listed `.trc` file does not exist, the trace is regenerated from
//! the profile set and the seed, which gives the same samples the file
//! would hold.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::LabeledTraces;
use crate::synth::{render_all, Corpus, ProgramProfile, RenderedProfile, SynthError, TriggerConfig};
use crate::trace::{load_trace, Trace, TraceError};
use crate::Error;

/// Profile set stored next to a manifest so lazy entries can be rebuilt.
pub const PROFILES_FILE: &str = "profiles.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("trace {0} is missing and no profile set is available to regenerate it")]
    MissingTrace(PathBuf),
    #[error("no profile for program {0}")]
    UnknownProgram(String),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub program_id: String,
    pub path: String,
    pub seed: u64,
}

pub fn write_manifest<W: Write>(mut out: W, entries: &[ManifestEntry]) -> io::Result<()> {
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_manifest<R: BufRead>(input: R) -> Result<Vec<ManifestEntry>, ManifestError> {
    let mut entries = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        entries.push(serde_json::from_str(&line).map_err(|source| ManifestError::Json { line: i + 1, source })?);
    }
    Ok(entries)
}

/// Manifest entries for a synthetic corpus, with paths
/// `<program_id>/<index>.trc` counted per program.
pub fn corpus_manifest(corpus: &Corpus) -> Vec<ManifestEntry> {
    let mut counters: HashMap<&str, usize> = HashMap::new();
    corpus
        .entries()
        .iter()
        .map(|e| {
            let k = counters.entry(&e.program_id).or_default();
            let path = format!("{}/{:05}.trc", e.program_id, *k);
            *k += 1;
            ManifestEntry {
                program_id: e.program_id.clone(),
                path,
                seed: e.seed,
            }
        })
        .collect()
}

/// A manifest resolved against its directory and, optionally, a profile set.
#[derive(Debug, Clone)]
pub struct ManifestSet {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
    profiles: HashMap<String, Arc<RenderedProfile>>,
}

impl ManifestSet {
    /// Opens a manifest. If `profiles` is `None`, a `profiles.json` next to
    /// the manifest is used when present.
    pub fn open(path: impl AsRef<Path>, profiles: Option<&[ProgramProfile]>, trigger: &TriggerConfig) -> Result<Self, ManifestError> {
        let path = path.as_ref();
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let entries = read_manifest(BufReader::new(fs::File::open(path)?))?;
        let stored;
        let profiles = match profiles {
            Some(p) => Some(p),
            None => {
                let candidate = root.join(PROFILES_FILE);
                if candidate.exists() {
                    stored = crate::synth::load_profiles(candidate)?;
                    Some(stored.as_slice())
                } else {
                    None
                }
            }
        };
        Self::new(root, entries, profiles, trigger)
    }

    pub fn new(
        root: PathBuf,
        entries: Vec<ManifestEntry>,
        profiles: Option<&[ProgramProfile]>,
        trigger: &TriggerConfig,
    ) -> Result<Self, ManifestError> {
        let profiles = match profiles {
            Some(p) if !p.is_empty() => render_all(p, trigger)?
                .into_iter()
                .map(|r| (r.program_id().to_owned(), r))
                .collect(),
            _ => HashMap::new(),
        };
        Ok(Self { root, entries, profiles })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, index: usize) -> PathBuf {
        self.root.join(&self.entries[index].path)
    }

    /// Keeps only the entries of `program_id`.
    pub fn only(mut self, program_id: &str) -> Self {
        self.entries.retain(|e| e.program_id == program_id);
        self
    }

    pub fn program_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.program_id) {
                ids.push(e.program_id.clone());
            }
        }
        ids
    }

    pub fn profile(&self, program_id: &str) -> Option<&Arc<RenderedProfile>> {
        self.profiles.get(program_id)
    }

    /// The full trace for entry `index`, labelled with its program.
    pub fn trace(&self, index: usize) -> Result<Trace, Error> {
        let e = &self.entries[index];
        let path = self.path_of(index);
        if path.exists() {
            return Ok(load_trace(&path)?.with_program_id(e.program_id.clone()));
        }
        let profile = self.regenerator(index)?;
        Ok(profile.trace(e.seed))
    }

    fn regenerator(&self, index: usize) -> Result<&Arc<RenderedProfile>, ManifestError> {
        let e = &self.entries[index];
        if self.profiles.is_empty() {
            return Err(ManifestError::MissingTrace(self.path_of(index)));
        }
        self.profiles
            .get(&e.program_id)
            .ok_or_else(|| ManifestError::UnknownProgram(e.program_id.clone()))
    }
}

impl LabeledTraces for ManifestSet {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn label(&self, index: usize) -> Option<&str> {
        Some(&self.entries[index].program_id)
    }

    fn window(&self, index: usize, len: usize) -> Result<Vec<f64>, Error> {
        let mut out = Vec::new();
        self.window_into(index, len, &mut out)?;
        Ok(out)
    }

    fn window_into(&self, index: usize, len: usize, out: &mut Vec<f64>) -> Result<(), Error> {
        let path = self.path_of(index);
        if path.exists() {
            let t = load_trace(&path)?;
            let start = t.triggers().ok_or(TraceError::TriggersUnset)?.start;
            out.clear();
            out.extend_from_slice(t.window_at(start, len)?);
            return Ok(());
        }
        let profile = self.regenerator(index)?;
        let start = profile.triggers().start;
        if start + len > crate::trace::CAPTURE_LEN {
            return Err(TraceError::TooShort {
                start,
                needed: len,
                available: crate::trace::CAPTURE_LEN,
            }
            .into());
        }
        out.resize(len, 0.0);
        profile.window_into(self.entries[index].seed, start, out);
        Ok(())
    }
}
